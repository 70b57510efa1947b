"""MixDistribution perturbation and the cross-view contrastive loss built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .numerics import Rng

INSTANCE = "instance"
BATCH = "batch"


@dataclass
class MixParams:
    delta: float = 0.5
    epsilon_std: float = 1e-5
    scope: str = INSTANCE

    def validate(self) -> None:
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.epsilon_std > 0:
            raise ValueError(f"epsilon_std must be > 0, got {self.epsilon_std}")
        if self.scope not in (INSTANCE, BATCH):
            raise ValueError(f"scope must be {INSTANCE!r} or {BATCH!r}, got {self.scope!r}")


def instance_stats(x) -> tuple[float, float]:
    """Mean and population standard deviation over all elements."""
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("statistics of an empty instance")
    mu = float(a.mean())
    return mu, float(np.sqrt(np.mean((a - mu) ** 2)))


def mix_statistics(x, partner, lam: float) -> tuple[float, float]:
    """Returns (gamma_mix, beta_mix) = lam-blend of the two instances' (std, mean)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    mu_x, sd_x = instance_stats(x)
    mu_p, sd_p = instance_stats(partner)
    return lam * sd_x + (1.0 - lam) * sd_p, lam * mu_x + (1.0 - lam) * mu_p


def perturb(x, gamma_mix: float, beta_mix: float, epsilon_std: float) -> np.ndarray:
    if not epsilon_std > 0:
        raise ValueError("epsilon_std must be > 0")
    a = np.asarray(x, dtype=np.float64)
    mu, sd = instance_stats(a)
    return gamma_mix * (a - mu) / (sd + epsilon_std) + beta_mix


@dataclass
class PerturbedPair:
    original: np.ndarray
    perturbed: np.ndarray
    lam: float
    partner: int
    gamma_mix: float
    beta_mix: float


@dataclass
class PerturbedBatch:
    """Array form of a list of :class:`PerturbedPair`; index or iterate for pairs."""

    x: np.ndarray
    xhat: np.ndarray
    lam: np.ndarray
    partner: np.ndarray
    gamma_mix: np.ndarray
    beta_mix: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> PerturbedPair:
        return PerturbedPair(
            self.x[i], self.xhat[i], float(self.lam[i]), int(self.partner[i]),
            float(self.gamma_mix[i]), float(self.beta_mix[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def perturb_batch(batch, params: MixParams, rng: Rng) -> PerturbedBatch:
    """One permutation, one Beta(delta, delta) lambda per instance, then re-styling.

    Instance scope mixes each row's own statistics with its permuted partner's.
    Batch scope uses statistics of the whole batch on both sides (so the blend
    collapses to the batch statistics) with a single lambda.
    """
    params.validate()
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("perturb_batch needs a nonempty (n, d) batch")
    n = x.shape[0]
    partner = rng.permutation(n)
    if params.scope == INSTANCE:
        lam = rng.beta_sym(params.delta, size=n)
        xhat, g, b = K.mix_perturb(x, partner, lam, params.epsilon_std)
    else:
        lam = np.full(n, rng.beta_sym(params.delta))
        mu_all, sd_all = instance_stats(x)
        mu_p, sd_p = instance_stats(x[partner])
        g = np.full(n, lam[0] * sd_all + (1 - lam[0]) * sd_p)
        b = np.full(n, lam[0] * mu_all + (1 - lam[0]) * mu_p)
        mu, sd = K.row_stats(x)
        xhat = (g / (sd + params.epsilon_std))[:, None] * (x - mu[:, None]) + b[:, None]
    return PerturbedBatch(x, xhat, lam, partner, g, b)


def mdcl_loss_one_side(z_bar, z_hat, tau: float = 0.30, include_positive: bool = False):
    """Cross-view contrastive loss on unit embeddings (similarity = dot product).

    loss = -sum_i log( exp(s_ii/tau) / sum_{j != i} exp(s_ij/tau) ),  s_ij = z_bar_i . z_hat_j

    The positive pair is left out of the denominator unless ``include_positive``.
    Returns ``(loss, d loss/d z_bar, d loss/d z_hat)``.
    """
    zb = np.ascontiguousarray(z_bar, dtype=np.float64)
    zh = np.ascontiguousarray(z_hat, dtype=np.float64)
    if zb.shape != zh.shape or zb.ndim != 2:
        raise ValueError(f"embedding lists must have equal (n, e) shapes: {zb.shape} vs {zh.shape}")
    if zb.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 instances (empty negative set)")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    loss, gb, gh = K.mdcl_one_side(zb, zh, float(tau), bool(include_positive))
    return float(loss), gb, gh


@dataclass
class MDCLResult:
    loss: float
    loss_student: float
    loss_teacher: float
    grad_student: tuple  # (d/d z_bar_S, d/d z_hat_S): feeds student head + extractor
    grad_teacher: tuple  # (d/d z_bar_T, d/d z_hat_T): feeds the teacher head only


def mdcl_combined(teacher_pairs, student_pairs, tau: float = 0.30, include_positive: bool = False) -> MDCLResult:
    """Sum of the student-side and teacher-side losses; each pair is (z_bar, z_hat)."""
    ls, gbs, ghs = mdcl_loss_one_side(*student_pairs, tau, include_positive)
    lt, gbt, ght = mdcl_loss_one_side(*teacher_pairs, tau, include_positive)
    return MDCLResult(ls + lt, ls, lt, (gbs, ghs), (gbt, ght))
