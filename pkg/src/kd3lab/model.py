"""MLP teacher/student networks: extractor -> shared classifier, plus a projection head.

Arrays use the (out, in) weight convention and batches are rows.  Every
extractor layer is affine followed by ReLU, so features are nonnegative
penultimate activations.  Gradients are written out by hand.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .datagen import LabeledSet
from .numerics import EPS_NORM, Rng, log_softmax, softmax
from .optim import OptimConfig, Optimizer, lr_at

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Role(str, Enum):
    Teacher = "teacher"
    Student = "student"


@dataclass
class ArchConfig:
    input_dim: int = 16
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    num_classes: int = 4
    embed_dim: int = 32

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.feature_dim]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class FeatureExtractor:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("extractor needs at least one layer and one bias per weight")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[1]} != previous output {self.weights[i-1].shape[0]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class SharedClassifier:
    weight: np.ndarray  # (K, d_f)
    bias: np.ndarray
    frozen: bool = False

    def freeze(self) -> None:
        self.frozen = True
        _freeze(self.weight)
        _freeze(self.bias)


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (d_e, d_f)
    bias: np.ndarray


@dataclass
class Network:
    extractor: FeatureExtractor
    classifier: SharedClassifier
    head: ProjectionHead
    role: Role = Role.Student
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d_f = self.extractor.feature_dim
        if self.classifier.weight.shape[1] != d_f:
            raise ValueError(f"classifier expects {self.classifier.weight.shape[1]} features, extractor emits {d_f}")
        if self.head.weight.shape[1] != d_f:
            raise ValueError(f"projection head expects {self.head.weight.shape[1]} features, extractor emits {d_f}")

    @property
    def num_classes(self) -> int:
        return self.classifier.weight.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.head.weight.shape[0]

    def params(self, extractor=True, classifier=True, head=True) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by name; a frozen classifier is never included."""
        out = {}
        if extractor:
            for i, (w, b) in enumerate(zip(self.extractor.weights, self.extractor.biases)):
                out[f"ext.W{i}"] = w
                out[f"ext.b{i}"] = b
        if classifier and not self.classifier.frozen:
            out["cls.W"] = self.classifier.weight
            out["cls.b"] = self.classifier.bias
        if head:
            out["head.W"] = self.head.weight
            out["head.b"] = self.head.bias
        return out

    def copy(self) -> "Network":
        """Deep copy; a frozen classifier stays shared (same object)."""
        cls = self.classifier
        if not cls.frozen:
            cls = SharedClassifier(cls.weight.copy(), cls.bias.copy(), False)
        return Network(
            FeatureExtractor([w.copy() for w in self.extractor.weights], [b.copy() for b in self.extractor.biases]),
            cls,
            ProjectionHead(self.head.weight.copy(), self.head.bias.copy()),
            self.role,
        )


def glorot(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_extractor(dims, rng: Rng) -> FeatureExtractor:
    ws = [glorot(rng, o, i) for i, o in zip(dims[:-1], dims[1:])]
    return FeatureExtractor(ws, [np.zeros(w.shape[0]) for w in ws])


def init_head(feature_dim: int, embed_dim: int, rng: Rng) -> ProjectionHead:
    return ProjectionHead(glorot(rng, embed_dim, feature_dim), np.zeros(embed_dim))


def init_classifier(feature_dim: int, num_classes: int, rng: Rng) -> SharedClassifier:
    return SharedClassifier(glorot(rng, num_classes, feature_dim), np.zeros(num_classes))


def init_network(arch: ArchConfig, rng: Rng, role: Role = Role.Student, classifier: SharedClassifier | None = None) -> Network:
    """Fresh network; pass ``classifier`` to alias an existing (shared) classifier."""
    ext = init_extractor(arch.layer_dims, rng)
    cls = classifier if classifier is not None else init_classifier(arch.feature_dim, arch.num_classes, rng)
    head = init_head(arch.feature_dim, arch.embed_dim, rng)
    return Network(ext, cls, head, role)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    a = a[None] if single else a
    if a.ndim != 2 or a.shape[1] != net.extractor.input_dim:
        raise ValueError(f"input has width {a.shape[-1]}, network expects {net.extractor.input_dim}")
    return a, single


def extractor_forward(ext: FeatureExtractor, x: np.ndarray):
    """Returns features and the cache needed by :func:`extractor_backward`."""
    acts = [x]
    h = x
    for w, b in zip(ext.weights, ext.biases):
        h = np.maximum(h @ w.T + b, 0.0)
        acts.append(h)
    return h, acts


def extractor_backward(ext: FeatureExtractor, acts, dh: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    for i in range(len(ext.weights) - 1, -1, -1):
        dz = dh * (acts[i + 1] > 0)
        grads[f"ext.W{i}"] = dz.T @ acts[i]
        grads[f"ext.b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ ext.weights[i]
    return grads


def forward_features(net: Network, x) -> np.ndarray:
    a, single = _as_batch(net, x)
    h, _ = extractor_forward(net.extractor, a)
    return h[0] if single else h


def logits_from_features(net: Network, h: np.ndarray) -> np.ndarray:
    return h @ net.classifier.weight.T + net.classifier.bias


def predict_probs(net: Network, x) -> np.ndarray:
    a, single = _as_batch(net, x)
    p = softmax(logits_from_features(net, extractor_forward(net.extractor, a)[0]), axis=1)
    return p[0] if single else p


def head_forward(head: ProjectionHead, h: np.ndarray):
    """Affine map then row-wise L2 normalization; returns (z, pre-normalization u)."""
    u = h @ head.weight.T + head.bias
    norm = np.sqrt(np.sum(u * u, axis=1, keepdims=True))
    z = np.where(norm < EPS_NORM, 0.0, u / np.where(norm < EPS_NORM, 1.0, norm))
    return z, u


def head_backward(head: ProjectionHead, h, u, z, dz):
    """Gradients of a loss through normalize(W h + b); returns (grads, dL/dh)."""
    norm = np.sqrt(np.sum(u * u, axis=1, keepdims=True))
    du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / np.where(norm < EPS_NORM, 1.0, norm)
    du = np.where(norm < EPS_NORM, 0.0, du)
    return {"head.W": du.T @ h, "head.b": du.sum(axis=0)}, du @ head.weight


def project(net: Network, feature) -> np.ndarray:
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    f = f[None] if single else f
    if f.shape[1] != net.head.weight.shape[1]:
        raise ValueError(f"feature length {f.shape[1]} != head input {net.head.weight.shape[1]}")
    z, _ = head_forward(net.head, f)
    return z[0] if single else z


def cross_entropy(net: Network, x: np.ndarray, y: np.ndarray, train_classifier: bool = True):
    """Mean cross-entropy and its gradients for extractor (+ classifier unless frozen)."""
    n = x.shape[0]
    h, acts = extractor_forward(net.extractor, x)
    logits = logits_from_features(net, h)
    lp = log_softmax(logits, axis=1)
    loss = -float(np.mean(lp[np.arange(n), y]))
    dlog = np.exp(lp)
    dlog[np.arange(n), y] -= 1.0
    dlog /= n
    grads = extractor_backward(net.extractor, acts, dlog @ net.classifier.weight)
    if train_classifier and not net.classifier.frozen:
        grads["cls.W"] = dlog.T @ h
        grads["cls.b"] = dlog.sum(axis=0)
    return loss, grads


def accuracy(net: Network, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if data.labels is None:
        raise ValueError("evaluation needs labels")
    pred = np.argmax(predict_probs(net, data.x), axis=1)
    return float(np.mean(pred == data.labels))


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(kind="adam", lr=1e-3, weight_decay=1e-2, milestones=()))


def pretrain_teacher(data: LabeledSet, arch: ArchConfig, cfg: PretrainConfig, rng: Rng) -> Network:
    """Cross-entropy training of a teacher; the classifier is frozen on return.

    Training accuracy is stored in ``net.meta["train_accuracy"]``.
    """
    if data.labels is None:
        raise ValueError("teacher pretraining needs labeled data")
    if arch.num_classes != data.num_classes:
        raise ValueError(f"arch has {arch.num_classes} classes, data has {data.num_classes}")
    if arch.input_dim != data.dim:
        raise ValueError(f"arch input {arch.input_dim} != data width {data.dim}")
    net = init_network(arch, rng, Role.Teacher)
    opt = Optimizer(net.params(), cfg.optim)
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.optim, epoch, cfg.epochs)
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = cross_entropy(net, data.x[idx], data.labels[idx])
            opt.step(grads, lr)
            tot += loss * len(idx)
        log.debug("pretrain epoch %d loss %.5f", epoch, tot / max(n, 1))
    net.meta["train_accuracy"] = accuracy(net, data)
    log.info("teacher training accuracy %.4f", net.meta["train_accuracy"])
    net.classifier.freeze()
    return net


# ---------------------------------------------------------------------------
# checkpoints: versioned JSON, shortest round-trip float repr
# ---------------------------------------------------------------------------

_SECTIONS = ("format_version", "role", "dims", "extractor", "classifier", "head")


class CheckpointError(ValueError):
    pass


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _unarr(d: dict, where: str) -> np.ndarray:
    try:
        shape, values = d["shape"], d["values"]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{where}: missing field {e}") from None
    if int(np.prod(shape)) != len(values):
        raise CheckpointError(f"{where}: shape {shape} needs {int(np.prod(shape))} values, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(shape)


def checkpoint_dict(net: Network) -> dict:
    ext = net.extractor
    return {
        "format_version": CHECKPOINT_VERSION,
        "role": net.role.value,
        "dims": {
            "layers": ext.dims,
            "feature_dim": ext.feature_dim,
            "num_classes": net.num_classes,
            "embed_dim": net.embed_dim,
        },
        "extractor": [{"weight": _arr(w), "bias": _arr(b)} for w, b in zip(ext.weights, ext.biases)],
        "classifier": {
            "weight": _arr(net.classifier.weight),
            "bias": _arr(net.classifier.bias),
            "frozen": net.classifier.frozen,
        },
        "head": {"weight": _arr(net.head.weight), "bias": _arr(net.head.bias)},
    }


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(net), indent=1) + "\n")


def _diagnose_truncation(text: str) -> str:
    present = [s for s in _SECTIONS if re.search(rf'^\s*"{s}"\s*:', text, re.M)]
    missing = [s for s in _SECTIONS if s not in present]
    if not present:
        return "no sections found"
    if missing:
        return f"section '{present[-1]}' is incomplete; missing section(s): {', '.join(missing)}"
    return f"section '{present[-1]}' is incomplete"


def load_checkpoint(path) -> Network:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupted or truncated checkpoint at byte {e.pos}: {_diagnose_truncation(text)}") from None
    for s in _SECTIONS:
        if s not in doc:
            raise CheckpointError(f"{path}: missing section '{s}'")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format_version {doc['format_version']} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        role = Role(doc["role"])
    except ValueError:
        raise CheckpointError(f"{path}: role {doc['role']!r} is not one of teacher/student") from None
    layers = doc["extractor"]
    ws = [_unarr(l.get("weight"), f"extractor[{i}].weight") for i, l in enumerate(layers)]
    bs = [_unarr(l.get("bias"), f"extractor[{i}].bias") for i, l in enumerate(layers)]
    c = doc["classifier"]
    if "frozen" not in c:
        raise CheckpointError(f"{path}: classifier.frozen missing")
    cls = SharedClassifier(_unarr(c.get("weight"), "classifier.weight"), _unarr(c.get("bias"), "classifier.bias"))
    if c["frozen"]:
        cls.freeze()
    h = doc["head"]
    head = ProjectionHead(_unarr(h.get("weight"), "head.weight"), _unarr(h.get("bias"), "head.bias"))
    try:
        net = Network(FeatureExtractor(ws, bs), cls, head, role)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from None
    dims = doc["dims"]
    if dims.get("layers") != net.extractor.dims or dims.get("embed_dim") != net.embed_dim:
        raise CheckpointError(f"{path}: dims block {dims} disagrees with parameter shapes")
    return net
