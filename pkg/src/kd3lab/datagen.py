"""Synthetic distribution-shift benchmark, IDX ingestion, and the dataset file format."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum
from pathlib import Path

import numpy as np

from .numerics import Rng, softmax

log = logging.getLogger(__name__)

OPEN_LABEL = -1  # ground-truth label of an instance outside the original label space


class Provenance(IntEnum):
    InDistribution = 0
    StyleShifted = 1
    OpenSet = 2


@dataclass
class LabeledSet:
    """Instances as rows of ``x``; labels and provenance optional, one per row."""

    x: np.ndarray
    num_classes: int
    labels: np.ndarray | None = None
    provenance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"instances must be a 2-D array (n, d), got shape {self.x.shape}")
        n = self.x.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"{self.labels.shape[0]} labels for {n} instances")
            bad = (self.labels != OPEN_LABEL) & ((self.labels < 0) | (self.labels >= self.num_classes))
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError(f"label {self.labels[i]} at index {i} outside [0, {self.num_classes})")
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=np.uint8)
            if self.provenance.shape != (n,):
                raise ValueError(f"{self.provenance.shape[0]} provenance tags for {n} instances")
            if self.provenance.size and self.provenance.max() > max(Provenance):
                raise ValueError("unknown provenance tag")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(
            self.x[idx],
            self.num_classes,
            None if self.labels is None else self.labels[idx],
            None if self.provenance is None else self.provenance[idx],
        )

    def provenance_counts(self) -> dict[str, int]:
        if self.provenance is None:
            return {}
        return {p.name: int(np.sum(self.provenance == p)) for p in Provenance}


@dataclass
class ShiftBenchmarkConfig:
    dim: int = 16
    num_classes: int = 4
    separation: float = 4.0
    within_std: float = 1.0
    n_teacher_train: int = 2000
    n_test: int = 1000
    n_pool_in: int = 3000
    n_pool_style: int = 2000
    n_pool_open: int = 2000
    style_lo: float = 0.5
    style_hi: float = 2.0
    style_offset: float = 1.5
    n_open_classes: int = 4
    seed: int = 0

    def validate(self) -> None:
        counts = ("n_teacher_train", "n_test", "n_pool_in", "n_pool_style", "n_pool_open")
        for name in counts:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.style_lo <= self.style_hi or self.style_lo <= 0:
            raise ValueError("need 0 < style_lo <= style_hi")
        if self.within_std <= 0:
            raise ValueError("within_std must be > 0")
        if self.n_pool_open > 0 and self.n_open_classes < 1:
            raise ValueError("open-set draws need n_open_classes >= 1")
        if self.num_classes + self.n_open_classes > self.dim:
            raise ValueError("num_classes + n_open_classes must not exceed dim (one axis per blob)")
        if self.n_pool_in + self.n_pool_style + self.n_pool_open == 0:
            raise ValueError("web pool would be empty")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def class_means(cfg: ShiftBenchmarkConfig, n_classes: int, offset: int = 0) -> np.ndarray:
    means = np.zeros((n_classes, cfg.dim))
    means[np.arange(n_classes), offset + np.arange(n_classes)] = cfg.separation
    return means


def _blobs(rng: Rng, means: np.ndarray, std: float, n: int):
    k = means.shape[0]
    labels = (np.arange(n) % k)[rng.permutation(n)] if n else np.zeros(0, dtype=np.int64)
    noise = rng.normal(0.0, std, size=(n, means.shape[1]))
    return means[labels] + noise, labels


def style_shift(x, a: float, b: float) -> np.ndarray:
    """Affine style change ``a * x + b``: per-instance std scales by a, mean moves to a*mu + b."""
    if not np.all(np.asarray(a) > 0):
        raise ValueError(f"style scale must be > 0, got {a}")
    return a * np.asarray(x, dtype=np.float64) + b


def bayes_posterior(cfg: ShiftBenchmarkConfig, x: np.ndarray) -> np.ndarray:
    means = class_means(cfg, cfg.num_classes)
    d2 = ((x[:, None, :] - means[None]) ** 2).sum(axis=2)
    return softmax(-d2 / (2.0 * cfg.within_std**2), axis=1)


def gen_shift_benchmark(cfg: ShiftBenchmarkConfig):
    """Returns ``(original_train, web_pool, test)``.

    The pool is the concatenation of fresh in-distribution draws, style-shifted
    draws, and draws from extra blobs on axes ``K..K+n_open_classes-1``.  Pool
    labels are ground truth for scoring selection only; open-set rows carry
    ``OPEN_LABEL``.  Each part comes from its own jump-separated RNG stream.
    A Bayes-classifier diagnostics report is stored in ``web_pool.meta``.
    """
    cfg.validate()
    means = class_means(cfg, cfg.num_classes)
    K_ = cfg.num_classes

    x_tr, y_tr = _blobs(Rng(cfg.seed, 0), means, cfg.within_std, cfg.n_teacher_train)
    x_te, y_te = _blobs(Rng(cfg.seed, 1), means, cfg.within_std, cfg.n_test)

    x_in, y_in = _blobs(Rng(cfg.seed, 2), means, cfg.within_std, cfg.n_pool_in)

    rs = Rng(cfg.seed, 3)
    x_st, y_st = _blobs(rs, means, cfg.within_std, cfg.n_pool_style)
    scale = rs.uniform(cfg.style_lo, cfg.style_hi, size=cfg.n_pool_style)
    sign = np.where(rs.uniform(size=cfg.n_pool_style) < 0.5, -1.0, 1.0)
    x_st = style_shift(x_st, scale[:, None], (sign * cfg.style_offset)[:, None])

    open_means = class_means(cfg, max(cfg.n_open_classes, 1), offset=K_)
    x_op, _ = _blobs(Rng(cfg.seed, 4), open_means, cfg.within_std, cfg.n_pool_open)
    y_op = np.full(cfg.n_pool_open, OPEN_LABEL, dtype=np.int64)

    pool = LabeledSet(
        np.concatenate([x_in, x_st, x_op]).reshape(-1, cfg.dim),
        K_,
        np.concatenate([y_in, y_st, y_op]),
        np.repeat(
            [Provenance.InDistribution, Provenance.StyleShifted, Provenance.OpenSet],
            [cfg.n_pool_in, cfg.n_pool_style, cfg.n_pool_open],
        ),
    )
    pool.meta["diagnostics"] = selection_diagnostics(cfg, pool)
    log.info("benchmark diagnostics: %s", pool.meta["diagnostics"])
    train = LabeledSet(x_tr.reshape(-1, cfg.dim), K_, y_tr)
    test = LabeledSet(x_te.reshape(-1, cfg.dim), K_, y_te)
    return train, pool, test


def selection_diagnostics(cfg: ShiftBenchmarkConfig, pool: LabeledSet) -> dict:
    """Mean Bayes max-posterior per provenance stratum (NaN for empty strata)."""
    maxp = bayes_posterior(cfg, pool.x).max(axis=1) if len(pool) else np.zeros(0)
    rep = {}
    for p in Provenance:
        sel = pool.provenance == p
        rep[f"mean_bayes_maxprob_{p.name}"] = float(maxp[sel].mean()) if sel.any() else float("nan")
    m_in = rep["mean_bayes_maxprob_InDistribution"]
    m_open = rep["mean_bayes_maxprob_OpenSet"]
    # vacuously true when either stratum is empty
    rep["indist_above_openset"] = bool(np.isnan(m_in) or np.isnan(m_open) or m_in > m_open)
    return rep


def grayscale_merge(rgb, channel_axis: int = 0) -> np.ndarray:
    """Average the three colour channels (channel-major layout by default)."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 0 or a.shape[channel_axis] != 3:
        raise ValueError(f"expected 3 channels on axis {channel_axis}, got shape {a.shape}")
    return a.mean(axis=channel_axis)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, expect_magic: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: truncated at byte 0: need 4-byte magic, file has {len(buf)} bytes")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header: need {header} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    need = int(np.prod(dims, dtype=np.int64))
    have = len(buf) - header
    if have < need:
        raise IdxFormatError(
            f"{path}: truncated payload at byte {header}: dims {dims} need {need} bytes, found {have}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes: int = 10) -> LabeledSet:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    n, rows, cols = images.shape
    x = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
        if labels.shape[0] != n:
            raise IdxFormatError(
                f"count mismatch: {images_path} holds {n} images but {labels_path} holds {labels.shape[0]} labels"
            )
        labels = labels.astype(np.int64)
    return LabeledSet(x, num_classes, labels)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array of ndim 1 (labels) or 3 (images) in IDX layout."""
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer handles ndim 1 (labels) or 3 (images)")
    a = a.astype(np.uint8)
    magic = IDX_LABELS_MAGIC if a.ndim == 1 else IDX_IMAGES_MAGIC
    payload = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


# ---------------------------------------------------------------------------
# Dataset file: little-endian header + float64 payload + trailing byte arrays
#
#   offset  type      field
#   0       4 bytes   magic b"KD3D"
#   4       uint32    format version (1)
#   8       uint32    n (instances)
#   12      uint32    d (instance length)
#   16      uint32    K (class count)
#   20      uint32    flags: bit0 labels present, bit1 provenance present
#   24      float64   n*d instance values, row-major
#   ...     uint8     n labels (255 = outside label space), if bit0
#   ...     uint8     n provenance tags, if bit1
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"KD3D"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: LabeledSet, path) -> None:
    if ds.num_classes > 255:
        raise ValueError("dataset format stores labels as bytes; num_classes must be <= 255")
    flags = (ds.labels is not None) | ((ds.provenance is not None) << 1)
    n, d = ds.x.shape
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d, ds.num_classes, flags)]
    parts.append(ds.x.astype("<f8").tobytes())
    if ds.labels is not None:
        parts.append(np.where(ds.labels == OPEN_LABEL, 255, ds.labels).astype(np.uint8).tobytes())
    if ds.provenance is not None:
        parts.append(ds.provenance.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> LabeledSet:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(buf)} of {_HEADER.size} bytes)")
    magic, version, n, d, k, flags = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, reader supports {DATASET_VERSION}")
    off = _HEADER.size
    need = off + 8 * n * d + n * (bool(flags & 1) + bool(flags & 2))
    if len(buf) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes for n={n}, d={d}, flags={flags}; found {len(buf)}")
    x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    labels = prov = None
    if flags & 1:
        raw = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)
        labels = np.where(raw == 255, OPEN_LABEL, raw)
        off += n
    if flags & 2:
        prov = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
    return LabeledSet(x, k, labels, prov)
