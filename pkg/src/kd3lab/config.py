"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, blank lines ignored.  Every
key is declared in :data:`SCHEMA`; unknown keys and unparsable values are
rejected with the line number and key name.  ``seed`` must always be given
explicitly; path keys are required only by the commands that read them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import ShiftBenchmarkConfig
from .mixdist import MixParams
from .model import PretrainConfig
from .optim import OptimConfig
from .trainer import VARIANTS, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.replace(",", " ").split())


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.replace(",", " ").split())


def _names(s: str) -> tuple:
    return tuple(p for p in s.replace(",", " ").split())


def _variant(s: str) -> str:
    s = s.strip()
    if s not in VARIANTS:
        raise ValueError(f"unknown variant {s!r}")
    return s


def _variants(s: str) -> tuple:
    return tuple(_variant(p) for p in _names(s))


# key -> (parser, default).  Defaults mirror the dataclass defaults.
SCHEMA: dict = {
    # benchmark
    "dim": (int, 16),
    "num_classes": (int, 4),
    "separation": (float, 4.0),
    "within_std": (float, 1.0),
    "n_teacher_train": (int, 2000),
    "n_test": (int, 1000),
    "n_pool_in": (int, 3000),
    "n_pool_style": (int, 2000),
    "n_pool_open": (int, 2000),
    "style_lo": (float, 0.5),
    "style_hi": (float, 2.0),
    "style_offset": (float, 1.5),
    "n_open_classes": (int, 4),
    # distillation
    "epochs": (int, 60),
    "batch_size": (int, 64),
    "optimizer": (str, "sgd"),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "lr_milestones": (_floats, (0.625, 0.75, 0.875)),
    "alpha_tradeoff": (float, 0.01),
    "tau": (float, 0.30),
    "V_th": (float, 0.95),
    "delta": (float, 0.5),
    "epsilon_std": (float, 1e-5),
    "mix_scope": (str, "instance"),
    "include_positive_in_denominator": (_bool, False),
    "student_hidden": (_ints, (64, 64)),
    "embed_dim": (int, 32),
    "kd_lambda": (float, 1.0),
    "kd_temperature": (float, 4.0),
    "variant": (_variant, "Full"),
    "seed": (int, None),
    # teacher pretraining
    "teacher_hidden": (_ints, (128, 128)),
    "pretrain_epochs": (int, 30),
    "pretrain_lr": (float, 1e-3),
    "pretrain_weight_decay": (float, 1e-2),
    # multi-run commands
    "seeds": (_ints, (0, 1, 2, 3, 4)),
    "variants": (_variants, ("Full",) + tuple(v for v in VARIANTS if v not in ("Full", "TeacherOnlySelection", "KDBaselineOnPool"))),
    # paths
    "teacher": (Path, None),
    "train_data": (Path, None),
    "pool_data": (Path, None),
    "test_data": (Path, None),
    "out_dir": (Path, None),
}

ALWAYS_REQUIRED = ("seed",)


@dataclass
class CliConfig:
    values: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def with_overrides(self, **kw) -> "CliConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            if v is not None:
                vals[k] = v
        return CliConfig(vals, self.source)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self[k] is None]
        if missing:
            raise ConfigError(f"{self.source}: missing required key(s): {', '.join(missing)}")

    def bench(self) -> ShiftBenchmarkConfig:
        names = ShiftBenchmarkConfig.field_names()
        cfg = ShiftBenchmarkConfig(**{k: self[k] for k in names if k in SCHEMA})
        return _checked(cfg, self.source)

    def train(self) -> TrainConfig:
        optim = OptimConfig(
            kind=self["optimizer"], lr=self["lr"], momentum=self["momentum"],
            weight_decay=self["weight_decay"], milestones=tuple(self["lr_milestones"]),
        )
        mix = MixParams(delta=self["delta"], epsilon_std=self["epsilon_std"], scope=self["mix_scope"])
        cfg = TrainConfig(
            epochs=self["epochs"], batch_size=self["batch_size"], optim=optim,
            alpha_tradeoff=self["alpha_tradeoff"], tau=self["tau"], v_th=self["V_th"], mix=mix,
            include_positive_in_denominator=self["include_positive_in_denominator"],
            student_hidden=tuple(self["student_hidden"]), embed_dim=self["embed_dim"],
            kd_lambda=self["kd_lambda"], kd_temperature=self["kd_temperature"],
            seed=self["seed"] if self["seed"] is not None else 0, variant=self["variant"],
        )
        return _checked(cfg, self.source)

    def pretrain(self) -> PretrainConfig:
        base = PretrainConfig()
        optim = dataclasses.replace(base.optim, lr=self["pretrain_lr"], weight_decay=self["pretrain_weight_decay"])
        return PretrainConfig(epochs=self["pretrain_epochs"], batch_size=self["batch_size"], optim=optim)

    def dump(self) -> str:
        """Canonical text form of the full (defaults filled) configuration."""
        lines = []
        for k in SCHEMA:
            v = self[k]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(p) for p in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _checked(cfg, source):
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def parse_config(text: str, source: str = "<string>", require_seed: bool = True) -> CliConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = CliConfig(values, source)
    if require_seed:
        cfg.require(*ALWAYS_REQUIRED)
    return cfg


def load_config(path) -> CliConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
