"""Hot inner loops, each with a numba and a pure-numpy/Python implementation.

Public names dispatch on :func:`kd3lab._accel.using_numba`.  The ``*_nb`` and
``*_py`` variants are importable directly so tests and the benchmark can pin
a path.

Random generator: xoshiro256** (Blackman & Vigna) over a 4-word uint64 state,
seeded through splitmix64.  Doubles use the top 53 bits of one output word.
Normals use Box-Muller (two words per normal, the sine branch is discarded).
Gamma variates use Marsaglia-Tsang squeeze/rejection, with the
``G(a) = G(a+1) * U**(1/a)`` boost for a < 1.  Bounded integers use modulo
rejection, so every integer draw is exactly unbiased.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import njit, prange, using_numba

MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0

# ---------------------------------------------------------------------------
# xoshiro256** : numba
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _rotl_nb(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _next_nb(s):
    result = _rotl_nb(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl_nb(s[3], 45)
    return result


@njit(cache=True)
def _uniform_nb(s):
    return float(_next_nb(s) >> np.uint64(11)) * _INV_2_53


@njit(cache=True)
def _normal_nb(s):
    u1 = 1.0 - _uniform_nb(s)
    u2 = _uniform_nb(s)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


@njit(cache=True)
def _gamma_nb(s, shape):
    boost = 1.0
    a = shape
    if a < 1.0:
        a = shape + 1.0
        boost = -1.0  # marker; applied after the main draw
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = _normal_nb(s)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = _uniform_nb(s)
        if u < 1.0 - 0.0331 * (x * x) * (x * x):
            break
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            break
    g = d * v
    if boost < 0.0:
        u = 1.0 - _uniform_nb(s)
        g = g * u ** (1.0 / shape)
    return g


@njit(cache=True)
def _beta_sym_nb(s, delta):
    x = _gamma_nb(s, delta)
    y = _gamma_nb(s, delta)
    tot = x + y
    if tot == 0.0:
        return 1.0 if _uniform_nb(s) < 0.5 else 0.0
    return x / tot


@njit(cache=True)
def _bounded_nb(s, n):
    # unbiased integer in [0, n) by modulo rejection
    un = np.uint64(n)
    top = np.uint64(0xFFFFFFFFFFFFFFFF) - un + np.uint64(1)
    while True:
        x = _next_nb(s)
        r = x % un
        if x - r <= top:
            return np.int64(r)


@njit(cache=True)
def fill_u64_nb(s, out):
    for i in range(out.shape[0]):
        out[i] = _next_nb(s)


@njit(cache=True)
def fill_uniform_nb(s, out):
    for i in range(out.shape[0]):
        out[i] = _uniform_nb(s)


@njit(cache=True)
def fill_normal_nb(s, out):
    for i in range(out.shape[0]):
        out[i] = _normal_nb(s)


@njit(cache=True)
def fill_gamma_nb(s, shape, out):
    for i in range(out.shape[0]):
        out[i] = _gamma_nb(s, shape)


@njit(cache=True)
def fill_beta_sym_nb(s, delta, out):
    for i in range(out.shape[0]):
        out[i] = _beta_sym_nb(s, delta)


@njit(cache=True)
def permutation_nb(s, n):
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = _bounded_nb(s, i + 1)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm


# ---------------------------------------------------------------------------
# xoshiro256** : pure Python (same stream, bit for bit)
# ---------------------------------------------------------------------------


class _PyState:
    __slots__ = ("arr", "s0", "s1", "s2", "s3")

    def __init__(self, arr):
        self.arr = arr
        self.s0, self.s1, self.s2, self.s3 = (int(v) for v in arr)

    def flush(self):
        self.arr[:] = np.array([self.s0, self.s1, self.s2, self.s3], dtype=np.uint64)

    def next(self):
        s1 = self.s1
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        self.s2 ^= self.s0
        self.s3 ^= s1
        self.s1 = s1 ^ self.s2
        self.s0 ^= self.s3
        self.s2 ^= t
        s3 = self.s3
        self.s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        return result

    def uniform(self):
        return (self.next() >> 11) * _INV_2_53

    def normal(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def gamma(self, shape):
        a = shape + 1.0 if shape < 1.0 else shape
        d = a - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform()
            if u < 1.0 - 0.0331 * (x * x) * (x * x):
                break
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                break
        g = d * v
        if shape < 1.0:
            u = 1.0 - self.uniform()
            g = g * u ** (1.0 / shape)
        return g

    def beta_sym(self, delta):
        x = self.gamma(delta)
        y = self.gamma(delta)
        tot = x + y
        if tot == 0.0:
            return 1.0 if self.uniform() < 0.5 else 0.0
        return x / tot

    def bounded(self, n):
        top = MASK64 - n + 1
        while True:
            x = self.next()
            r = x % n
            if x - r <= top:
                return r


def fill_u64_py(s, out):
    st = _PyState(s)
    for i in range(out.shape[0]):
        out[i] = st.next()
    st.flush()


def fill_uniform_py(s, out):
    st = _PyState(s)
    for i in range(out.shape[0]):
        out[i] = st.uniform()
    st.flush()


def fill_normal_py(s, out):
    st = _PyState(s)
    for i in range(out.shape[0]):
        out[i] = st.normal()
    st.flush()


def fill_gamma_py(s, shape, out):
    st = _PyState(s)
    for i in range(out.shape[0]):
        out[i] = st.gamma(shape)
    st.flush()


def fill_beta_sym_py(s, delta, out):
    st = _PyState(s)
    for i in range(out.shape[0]):
        out[i] = st.beta_sym(delta)
    st.flush()


def permutation_py(s, n):
    st = _PyState(s)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = st.bounded(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    st.flush()
    return np.array(perm, dtype=np.int64)


# ---------------------------------------------------------------------------
# Contrastive loss (one side), dot-product similarity on unit embeddings
# ---------------------------------------------------------------------------


@njit(cache=True)
def mdcl_one_side_nb(zbar, zhat, tau, include_positive):
    n = zbar.shape[0]
    # the two products go through BLAS, same as the fallback
    sim = (zbar @ zhat.T) / tau
    coef = np.zeros((n, n))
    loss = 0.0
    for i in range(n):
        m = -np.inf
        for j in range(n):
            if (j != i or include_positive) and sim[i, j] > m:
                m = sim[i, j]
        tot = 0.0
        for j in range(n):
            if j != i or include_positive:
                tot += math.exp(sim[i, j] - m)
        lse = m + math.log(tot)
        loss += lse - sim[i, i]
        for j in range(n):
            if j != i or include_positive:
                coef[i, j] = math.exp(sim[i, j] - lse) / tau
        coef[i, i] -= 1.0 / tau
    return loss, coef @ zhat, coef.T @ zbar


def mdcl_one_side_py(zbar, zhat, tau, include_positive):
    n = zbar.shape[0]
    sim = (zbar @ zhat.T) / tau
    mask = np.ones((n, n), dtype=bool)
    if not include_positive:
        np.fill_diagonal(mask, False)
    masked = np.where(mask, sim, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(masked - m).sum(axis=1))
    loss = float(np.sum(lse - np.diag(sim)))
    coef = np.where(mask, np.exp(masked - lse[:, None]), 0.0) / tau
    coef[np.diag_indices(n)] -= 1.0 / tau
    return loss, coef @ zhat, coef.T @ zbar


# ---------------------------------------------------------------------------
# Per-instance statistics and MixDistribution perturbation
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def row_stats_nb(x):
    n, d = x.shape
    mu = np.empty(n)
    sd = np.empty(n)
    for i in prange(n):
        acc = 0.0
        for k in range(d):
            acc += x[i, k]
        m = acc / d
        acc = 0.0
        for k in range(d):
            diff = x[i, k] - m
            acc += diff * diff
        mu[i] = m
        sd[i] = math.sqrt(acc / d)
    return mu, sd


def row_stats_py(x):
    mu = x.mean(axis=1)
    sd = np.sqrt(((x - mu[:, None]) ** 2).mean(axis=1))
    return mu, sd


@njit(cache=True, parallel=True)
def mix_perturb_nb(x, partner, lam, eps):
    n, d = x.shape
    mu, sd = row_stats_nb(x)
    out = np.empty((n, d))
    gmix = np.empty(n)
    bmix = np.empty(n)
    for i in prange(n):
        p = partner[i]
        g = lam[i] * sd[i] + (1.0 - lam[i]) * sd[p]
        b = lam[i] * mu[i] + (1.0 - lam[i]) * mu[p]
        gmix[i] = g
        bmix[i] = b
        scale = g / (sd[i] + eps)
        for k in range(d):
            out[i, k] = scale * (x[i, k] - mu[i]) + b
    return out, gmix, bmix


def mix_perturb_py(x, partner, lam, eps):
    mu, sd = row_stats_py(x)
    g = lam * sd + (1.0 - lam) * sd[partner]
    b = lam * mu + (1.0 - lam) * mu[partner]
    out = (g / (sd + eps))[:, None] * (x - mu[:, None]) + b[:, None]
    return out, g, b


# ---------------------------------------------------------------------------
# Selection scoring
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def combine_argmax_nb(p_t, p_s, alpha):
    n, k = p_t.shape
    labels = np.empty(n, dtype=np.int64)
    conf = np.empty(n)
    for i in prange(n):
        best = -1.0
        arg = 0
        for c in range(k):
            v = (1.0 - alpha) * p_t[i, c] + alpha * p_s[i, c]
            if v > best:
                best = v
                arg = c
        labels[i] = arg
        conf[i] = best
    return labels, conf


def combine_argmax_py(p_t, p_s, alpha):
    comb = (1.0 - alpha) * p_t + alpha * p_s
    labels = np.argmax(comb, axis=1).astype(np.int64)  # first max wins
    conf = comb[np.arange(comb.shape[0]), labels]
    return labels, conf


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _pick(nb, py):
    def f(*args):
        return (nb if using_numba() else py)(*args)

    f.__name__ = py.__name__.removesuffix("_py")
    f.__doc__ = py.__doc__
    return f


fill_u64 = _pick(fill_u64_nb, fill_u64_py)
fill_uniform = _pick(fill_uniform_nb, fill_uniform_py)
fill_normal = _pick(fill_normal_nb, fill_normal_py)
fill_gamma = _pick(fill_gamma_nb, fill_gamma_py)
fill_beta_sym = _pick(fill_beta_sym_nb, fill_beta_sym_py)
permutation = _pick(permutation_nb, permutation_py)
mdcl_one_side = _pick(mdcl_one_side_nb, mdcl_one_side_py)
row_stats = _pick(row_stats_nb, row_stats_py)
mix_perturb = _pick(mix_perturb_nb, mix_perturb_py)
combine_argmax = _pick(combine_argmax_nb, combine_argmax_py)
