
import numpy as np
import pytest

from kd3lab.datagen import ShiftBenchmarkConfig, gen_shift_benchmark
from kd3lab.experiments import prepare
from kd3lab.numerics import Rng

SMALL_BENCH = ShiftBenchmarkConfig(
    n_teacher_train=400, n_test=200, n_pool_in=300, n_pool_style=200, n_pool_open=200, seed=3,
)


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture(scope="session")
def small_sets():
    return gen_shift_benchmark(SMALL_BENCH)


@pytest.fixture(scope="session")
def small_teacher(small_sets):
    from kd3lab.model import ArchConfig, PretrainConfig, pretrain_teacher

    train, _, _ = small_sets
    arch = ArchConfig(hidden=(32, 32), feature_dim=16, embed_dim=8)
    return pretrain_teacher(train, arch, PretrainConfig(epochs=15), Rng(3, 10))


@pytest.fixture(scope="session")
def default_setup():
    """Seed-0 default benchmark with its pretrained teacher: (teacher, train, pool, test)."""
    return prepare(0)


def unit_rows(rng, n, e):
    z = rng.normal(size=(n, e))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# -- acceptance report: one PASS/FAIL line per criterion in the terminal summary --------

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[0].rstrip("abc")), s)):
        status, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{status:4s}  criterion {name}{': ' + detail if detail else ''}")
