"""Teacher-student dynamic instance selection over the web pool."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .datagen import LabeledSet, Provenance
from .model import Network, predict_probs


@dataclass(frozen=True)
class ScheduleState:
    t: int  # current epoch, 0-based
    total: int  # total epochs

    def __post_init__(self):
        if self.t < 0 or self.total < 1:
            raise ValueError(f"invalid schedule state t={self.t}, total={self.total}")


def alpha_schedule(state: ScheduleState) -> float:
    """Student weight in the prediction mix: exp(-5 (t/(I/2) - 1)^2) up to I/2, then 1."""
    half = state.total / 2
    if state.t > half:
        return 1.0
    return math.exp(-5.0 * (state.t / half - 1.0) ** 2)


def combine_predictions(p_t, p_s, alpha_t: float) -> np.ndarray:
    p_t = np.asarray(p_t, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise ValueError(f"prediction shapes differ: {p_t.shape} vs {p_s.shape}")
    if not 0.0 <= alpha_t <= 1.0:
        raise ValueError(f"alpha_t must be in [0, 1], got {alpha_t}")
    return (1.0 - alpha_t) * p_t + alpha_t * p_s


def predict_and_confidence(combined):
    """Argmax label (lowest index wins ties) and its probability."""
    c = np.asarray(combined, dtype=np.float64)
    if c.ndim == 1:
        k = int(np.argmax(c))
        return k, float(c[k])
    lab = np.argmax(c, axis=1)
    return lab, c[np.arange(c.shape[0]), lab]


def class_thresholds(class_counts, v_th: float) -> np.ndarray:
    n = np.asarray(class_counts, dtype=np.float64)
    if not 0.0 < v_th <= 1.0:
        raise ValueError(f"V_th must be in (0, 1], got {v_th}")
    top = n.max() if n.size else 0.0
    if top <= 0:
        raise ValueError("no instance was predicted into any class")
    return (n / top) * v_th


@dataclass
class SelectionOutcome:
    y_pred: np.ndarray
    confidence: np.ndarray
    class_counts: np.ndarray
    thresholds: np.ndarray
    selected: np.ndarray  # sorted pool indices
    alpha: float

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.y_pred.shape[0], dtype=bool)
        m[self.selected] = True
        return m


def select_from_probs(p_t: np.ndarray, p_s: np.ndarray, alpha_t: float, v_th: float) -> SelectionOutcome:
    if p_t.shape != p_s.shape:
        raise ValueError(f"prediction shapes differ: {p_t.shape} vs {p_s.shape}")
    if p_t.shape[0] == 0:
        raise ValueError("cannot select from an empty pool")
    if not 0.0 <= alpha_t <= 1.0:
        raise ValueError(f"alpha_t must be in [0, 1], got {alpha_t}")
    labels, conf = K.combine_argmax(np.ascontiguousarray(p_t), np.ascontiguousarray(p_s), float(alpha_t))
    counts = np.bincount(labels, minlength=p_t.shape[1])
    thr = class_thresholds(counts, v_th)
    selected = np.flatnonzero(conf > thr[labels])
    return SelectionOutcome(labels, conf, counts, thr, selected, float(alpha_t))


def select_instances(
    pool: LabeledSet,
    teacher: Network,
    student: Network,
    state: ScheduleState,
    v_th: float,
    alpha_override: float | None = None,
) -> SelectionOutcome:
    """Score the whole pool with both networks and keep ``p > T[y_pred]``.

    ``alpha_override`` pins the mixing weight (teacher-only / student-only selection).
    """
    if len(pool) == 0:
        raise ValueError("cannot select from an empty pool")
    alpha = alpha_schedule(state) if alpha_override is None else alpha_override
    p_t = predict_probs(teacher, pool.x)
    p_s = predict_probs(student, pool.x)
    return select_from_probs(p_t, p_s, alpha, v_th)


@dataclass
class SelectionQuality:
    precision: float
    recall: float
    per_class_counts: dict
    empty_selection: bool


def selection_quality(outcome: SelectionOutcome, pool: LabeledSet) -> SelectionQuality:
    if pool.provenance is None:
        raise ValueError("selection quality needs provenance tags on the pool")
    indist = pool.provenance == Provenance.InDistribution
    chosen = indist[outcome.selected]
    per_class = {int(k): int(np.sum(outcome.y_pred[outcome.selected] == k)) for k in range(outcome.class_counts.size)}
    n_in = int(indist.sum())
    recall = float(chosen.sum() / n_in) if n_in else 0.0
    if outcome.selected.size == 0:
        return SelectionQuality(0.0, 0.0, per_class, True)
    return SelectionQuality(float(chosen.mean()), recall, per_class, False)


def write_outcome_csv(outcome: SelectionOutcome, pool: LabeledSet, path) -> None:
    mask = outcome.mask
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "y_pred", "confidence", "threshold", "selected", "provenance"])
        for i in range(outcome.y_pred.shape[0]):
            prov = "" if pool.provenance is None else Provenance(int(pool.provenance[i])).name
            y = int(outcome.y_pred[i])
            w.writerow([i, y, repr(float(outcome.confidence[i])), repr(float(outcome.thresholds[y])), int(mask[i]), prov])
