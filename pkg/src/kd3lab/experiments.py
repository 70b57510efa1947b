"""Multi-seed protocol shared by the CLI ablation command and the acceptance suite.

One seed fixes everything: the benchmark draw, teacher init, and the student run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import LabeledSet, Provenance, ShiftBenchmarkConfig, gen_shift_benchmark, load_idx, style_shift
from .model import ArchConfig, PretrainConfig, pretrain_teacher
from .numerics import Rng
from .trainer import TrainConfig, distill, evaluate, run_ablation

# wider than the student so distillation is a compression
TEACHER_HIDDEN = (128, 128)
_TEACHER_STREAM = 10

ABLATIONS = (
    "RandomSelection",
    "NoClassifierSharingOneHot",
    "NoClassifierSharingSoft",
    "NoMDCL",
    "NoMixDistribution",
    "StudentOnlySelection",
)


def teacher_arch(bench: ShiftBenchmarkConfig, hidden=TEACHER_HIDDEN) -> ArchConfig:
    return ArchConfig(input_dim=bench.dim, hidden=tuple(hidden), num_classes=bench.num_classes)


def prepare(seed: int, bench: ShiftBenchmarkConfig | None = None, pre: PretrainConfig | None = None):
    """Benchmark + pretrained (frozen) teacher for one seed."""
    bench = dataclasses.replace(bench or ShiftBenchmarkConfig(), seed=seed)
    train, pool, test = gen_shift_benchmark(bench)
    teacher = pretrain_teacher(train, teacher_arch(bench), pre or PretrainConfig(), Rng(seed, _TEACHER_STREAM))
    return teacher, train, pool, test


def run_variant(variant: str, teacher, pool, test, cfg: TrainConfig, seed: int):
    cfg = dataclasses.replace(cfg, seed=seed, variant=variant)
    if variant == "Full":
        return distill(teacher, pool, test, cfg)
    return run_ablation(variant, teacher, pool, test, cfg)


@dataclass
class AblationTable:
    seeds: list
    variants: list
    acc: dict = field(default_factory=dict)  # variant -> list of final accuracies, seed order
    teacher_acc: list = field(default_factory=list)
    precision: dict = field(default_factory=dict)  # variant -> final-epoch selection precision

    def mean(self, v: str) -> float:
        return float(np.mean(self.acc[v]))

    def std(self, v: str) -> float:
        return float(np.std(self.acc[v]))

    def margin(self, v: str, ref: str = "Full") -> float:
        """ref minus v, in accuracy points (percent)."""
        return 100.0 * (self.mean(ref) - self.mean(v))

    def rows(self):
        for v in self.variants:
            yield {"variant": v, "runs": len(self.acc[v]), "mean_accuracy": self.mean(v), "std_accuracy": self.std(v)}


def ablation_table(seeds, variants=("Full",) + ABLATIONS, cfg: TrainConfig | None = None,
                   bench: ShiftBenchmarkConfig | None = None, on_run=None) -> AblationTable:
    cfg = cfg or TrainConfig()
    table = AblationTable(list(seeds), list(variants))
    for v in variants:
        table.acc[v] = []
        table.precision[v] = []
    for seed in seeds:
        teacher, _, pool, test = prepare(seed, bench)
        table.teacher_acc.append(evaluate(teacher, test))
        for v in variants:
            _, rec = run_variant(v, teacher, pool, test, cfg, seed)
            table.acc[v].append(rec.final_test_accuracy)
            last = rec.epochs[-1] if rec.epochs else None
            table.precision[v].append(float("nan") if last is None else last.precision)
            if on_run is not None:
                on_run(seed, v, rec)
    return table


# -- MNIST-scale run (needs the four standard IDX files) ------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_TEACHER_HIDDEN = (512, 256)
MNIST_STUDENT_HIDDEN = (256, 128)


def _find_idx(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {root}")


def mnist_pool(x: np.ndarray, rng: Rng, scale=(0.4, 1.0), offset=(0.0, 0.4)) -> LabeledSet:
    """Lower-contrast, brighter-background copies: a grayscale stand-in for a digit web pool."""
    a = rng.uniform(*scale, size=len(x))[:, None]
    b = rng.uniform(*offset, size=len(x))[:, None]
    xs = style_shift(x, a, b)
    return LabeledSet(xs, 10, provenance=np.full(len(x), Provenance.StyleShifted, dtype=np.uint8))


@dataclass
class MnistResult:
    kd3_accuracy: float
    direct_accuracy: float
    teacher_accuracy: float

    @property
    def gap_points(self) -> float:
        return 100.0 * (self.direct_accuracy - self.kd3_accuracy)


def mnist_stretch(root, seed: int = 0, epochs: int = 60, pretrain_epochs: int = 20) -> MnistResult:
    """Teacher on half of the MNIST training images, KD3 student on a shifted copy of
    the other half, compared with the same student architecture trained directly
    on the teacher's originals."""
    root = Path(root)
    train = load_idx(*(_find_idx(root, s) for s in MNIST_FILES["train"]))
    test = load_idx(*(_find_idx(root, s) for s in MNIST_FILES["test"]))
    order = Rng(seed, 30).permutation(len(train))
    half = len(train) // 2
    orig = LabeledSet(train.x[order[:half]], 10, train.labels[order[:half]])
    pool = mnist_pool(train.x[order[half:]], Rng(seed, 31))

    pre = dataclasses.replace(PretrainConfig(), epochs=pretrain_epochs)
    arch = ArchConfig(input_dim=784, hidden=MNIST_TEACHER_HIDDEN, feature_dim=64, num_classes=10, embed_dim=64)
    teacher = pretrain_teacher(orig, arch, pre, Rng(seed, _TEACHER_STREAM))
    cfg = TrainConfig(epochs=epochs, student_hidden=MNIST_STUDENT_HIDDEN, embed_dim=64, seed=seed)
    _, rec = distill(teacher, pool, test, cfg)

    s_arch = dataclasses.replace(arch, hidden=MNIST_STUDENT_HIDDEN)
    direct = pretrain_teacher(orig, s_arch, pre, Rng(seed, 32))
    return MnistResult(rec.final_test_accuracy, evaluate(direct, test), evaluate(teacher, test))
