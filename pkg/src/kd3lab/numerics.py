"""Numerical building blocks: stable nonlinearities, similarity, and the RNG."""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import _kernels as K

EPS_NORM = 1e-12

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


class NonFiniteError(ValueError):
    pass


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NonFiniteError(f"{what}: non-finite value {x[bad]!r} at index {bad}")


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    _check_finite(x, "softmax input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def sigmoid(x):
    """Logistic function, evaluated without overflow for either sign."""
    if np.isscalar(x):
        x = float(x)
        if not math.isfinite(x):
            raise NonFiniteError(f"sigmoid input {x!r} is not finite")
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    a = np.asarray(x, dtype=np.float64)
    _check_finite(a, "sigmoid input")
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale to unit Euclidean norm along the last axis.

    Rows whose norm is below ``eps`` map to the zero vector instead of NaN.
    """
    a = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    safe = np.where(norm < eps, 1.0, norm)
    return np.where(norm < eps, 0.0, a / safe)


def cosine_sim(u, v) -> float:
    a = np.asarray(u, dtype=np.float64).ravel()
    b = np.asarray(v, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine_sim of a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(min(1.0, max(-1.0, (a @ b) / (na * nb))))


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + _SPLITMIX_GAMMA) & K.MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & K.MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & K.MASK64
    return x, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator with explicit 256-bit state.

    The state is four uint64 words filled from ``seed`` by splitmix64.
    ``stream=k`` applies the 2**128-step jump ``k`` times, giving
    non-overlapping substreams for the same seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed <= K.MASK64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = int(stream)
        words = []
        x = self.seed
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)
        for _ in range(stream):
            self._jump()

    @classmethod
    def from_state(cls, words) -> "Rng":
        r = cls.__new__(cls)
        r.seed, r.stream = -1, -1
        r.state = np.array([int(w) for w in words], dtype=np.uint64)
        if not r.state.any():
            raise ValueError("all-zero xoshiro state is invalid")
        return r

    def substream(self, k: int) -> "Rng":
        """Independent generator: same seed, jump-separated stream ``k``."""
        return Rng(self.seed, k)

    def _jump(self) -> None:
        acc = [0, 0, 0, 0]
        buf = np.empty(1, dtype=np.uint64)
        for word in _JUMP:
            for b in range(64):
                if (word >> b) & 1:
                    for i in range(4):
                        acc[i] ^= int(self.state[i])
                K.fill_u64_py(self.state, buf)
        self.state[:] = np.array(acc, dtype=np.uint64)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        K.fill_u64(self.state, out)
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        K.fill_uniform(self.state, out)
        out = low + (high - low) * out
        return float(out[0]) if size is None else out.reshape(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        K.fill_normal(self.state, out)
        out = loc + scale * out
        return float(out[0]) if size is None else out.reshape(size)

    def gamma(self, shape: float, size=None):
        if not shape > 0:
            raise ValueError(f"gamma shape must be > 0, got {shape}")
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        K.fill_gamma(self.state, float(shape), out)
        return float(out[0]) if size is None else out.reshape(size)

    def beta_sym(self, delta: float, size=None):
        """Beta(delta, delta) as X / (X + Y) with X, Y ~ Gamma(delta)."""
        if not delta > 0:
            raise ValueError(f"Beta concentration must be > 0, got {delta}")
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        K.fill_beta_sym(self.state, float(delta), out)
        return float(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        return K.permutation(self.state, int(n))

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]


def sample_beta(delta: float, rng: Rng) -> float:
    return rng.beta_sym(delta)


def permutation(n: int, rng: Rng) -> np.ndarray:
    return rng.permutation(n)
