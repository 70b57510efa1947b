import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kd3lab.mixdist import (
    MixParams,
    instance_stats,
    mdcl_combined,
    mdcl_loss_one_side,
    mix_statistics,
    perturb,
    perturb_batch,
)
from kd3lab.numerics import Rng
from kd3lab.trainer import numeric_grad, rel_error

from conftest import unit_rows


def test_instance_stats_examples():
    assert instance_stats([1.0, 1.0, 1.0]) == (1.0, 0.0)
    assert instance_stats([0.0, 2.0]) == (1.0, 1.0)
    x = Rng(1).normal(size=37) * 4 + 2
    mu = sum(x) / len(x)
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / len(x))
    m, s = instance_stats(x)
    assert abs(m - mu) < 1e-12 and abs(s - sd) < 1e-12
    with pytest.raises(ValueError):
        instance_stats([])


def test_mix_statistics_examples():
    x, p = np.array([-1.0, 1.0]), np.array([-1.0, 5.0])  # (mu, sd) = (0, 1) and (2, 3)
    assert mix_statistics(x, p, 1.0) == (1.0, 0.0)
    assert mix_statistics(x, p, 0.0) == (3.0, 2.0)
    assert mix_statistics(x, p, 0.5) == (2.0, 1.0)
    with pytest.raises(ValueError):
        mix_statistics(x, p, 1.5)


def test_perturb_identity_recovery_and_constant_input():
    x = Rng(2).normal(size=50) * 3 + 1
    mu, sd = instance_stats(x)
    eps = 1e-5
    xh = perturb(x, sd, mu, eps)
    assert np.max(np.abs(xh - x)) <= eps * np.max(np.abs(x - mu)) / sd + 1e-12
    c = perturb(np.full(8, 4.0), 2.0, -1.5, eps)
    assert np.all(np.isfinite(c)) and np.all(c == -1.5)


def test_perturb_output_statistics():
    x = Rng(3).normal(size=64) * 2
    mu, sd = instance_stats(x)
    g, b, eps = 1.7, -0.4, 1e-5
    m2, s2 = instance_stats(perturb(x, g, b, eps))
    assert abs(m2 - b) < 1e-9
    assert abs(s2 - g * sd / (sd + eps)) < 1e-9


def test_batch_of_one_pairs_with_itself():
    x = Rng(4).normal(size=(1, 10))
    pb = perturb_batch(x, MixParams(), Rng(5))
    assert pb.partner.tolist() == [0]
    np.testing.assert_allclose(pb.xhat, x, atol=1e-4)


def test_large_delta_concentrates_lambda():
    x = Rng(6).normal(size=(1000, 8)) * Rng(7).uniform(0.5, 3, size=(1000, 1))
    pb = perturb_batch(x, MixParams(delta=1000.0), Rng(8))
    assert abs(pb.lam.mean() - 0.5) < 0.002 and pb.lam.std() < 0.02
    sd = np.array([instance_stats(r)[1] for r in x])
    mid = 0.5 * (sd + sd[pb.partner])
    assert np.max(np.abs(pb.gamma_mix - mid) / mid) < 0.1


def test_perturb_batch_deterministic_and_pairs():
    x = Rng(9).normal(size=(16, 6))
    a = perturb_batch(x, MixParams(), Rng(10))
    b = perturb_batch(x, MixParams(), Rng(10))
    np.testing.assert_array_equal(a.xhat, b.xhat)
    pairs = list(a)
    assert len(pairs) == 16 and pairs[3].partner == a.partner[3]
    assert all(0 <= p.lam <= 1 and p.perturbed.shape == p.original.shape for p in pairs)
    assert sorted(a.partner.tolist()) == list(range(16))


def test_batch_scope_uses_one_lambda():
    x = Rng(11).normal(size=(10, 5))
    pb = perturb_batch(x, MixParams(scope="batch"), Rng(12))
    assert np.all(pb.lam == pb.lam[0])
    assert np.all(pb.gamma_mix == pb.gamma_mix[0])
    with pytest.raises(ValueError):
        perturb_batch(x, MixParams(scope="channel"), Rng(12))


def test_statistics_identity_over_many_instances():
    r = Rng(13)
    x = r.normal(size=(1000, 16)) * r.uniform(0.1, 5, size=(1000, 1)) + r.normal(size=(1000, 1))
    pb = perturb_batch(x, MixParams(), Rng(14))
    for i in range(1000):
        mu, sd = instance_stats(pb.xhat[i])
        assert abs(mu - pb.beta_mix[i]) < 1e-9
        assert abs(sd - pb.gamma_mix[i]) < 1e-3 * pb.gamma_mix[i]


# -- contrastive loss ------------------------------------------------------------


def test_mdcl_orthogonal_example():
    z = np.eye(2)
    loss, _, _ = mdcl_loss_one_side(z, z.copy(), 1.0)
    assert abs(loss - (-2.0)) < 1e-12


@pytest.mark.parametrize("n,tau", [(2, 0.3), (5, 0.3), (8, 0.7)])
def test_mdcl_identical_embeddings_closed_form(n, tau):
    z = np.tile(unit_rows(Rng(1), 1, 4), (n, 1))
    loss, _, _ = mdcl_loss_one_side(z, z.copy(), tau)
    assert loss == pytest.approx(n * math.log(n - 1), abs=1e-12)


def test_mdcl_include_positive_flag():
    z = np.eye(2)
    loss, _, _ = mdcl_loss_one_side(z, z.copy(), 1.0, include_positive=True)
    assert loss == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)


def test_mdcl_errors():
    with pytest.raises(ValueError):
        mdcl_loss_one_side(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        mdcl_loss_one_side(np.eye(2), np.eye(2), tau=0.0)
    with pytest.raises(ValueError):
        mdcl_loss_one_side(np.eye(2), np.eye(3)[:2])


@pytest.mark.parametrize("include_positive", [False, True])
def test_mdcl_gradients_finite_differences(include_positive):
    r = Rng(21)
    zb, zh = unit_rows(r, 4, 3), unit_rows(r, 4, 3)
    _, gb, gh = mdcl_loss_one_side(zb, zh, 0.3, include_positive)
    f = lambda: mdcl_loss_one_side(zb, zh, 0.3, include_positive)[0]  # noqa: E731
    assert rel_error(gb, numeric_grad(f, zb)) < 1e-4
    assert rel_error(gh, numeric_grad(f, zh)) < 1e-4


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_mdcl_depends_only_on_similarity_differences(seed, c):
    # appending a shared coordinate shifts every similarity by the same constant
    r = Rng(seed)
    zb, zh = unit_rows(r, 5, 4), unit_rows(r, 5, 4)
    base, _, _ = mdcl_loss_one_side(zb, zh, 0.5)
    shift = math.sqrt(abs(c))
    zb2 = np.hstack([zb, np.full((5, 1), shift)])
    zh2 = np.hstack([zh, np.full((5, 1), math.copysign(shift, c))])
    moved, _, _ = mdcl_loss_one_side(zb2, zh2, 0.5)
    assert moved == pytest.approx(base, abs=1e-10)


def test_mdcl_gradient_in_span_of_other_view():
    r = Rng(22)
    zb, zh = unit_rows(r, 6, 8), unit_rows(r, 6, 8)
    _, gb, _ = mdcl_loss_one_side(zb, zh, 0.3)
    coef, *_ = np.linalg.lstsq(zh.T, gb.T, rcond=None)
    np.testing.assert_allclose(zh.T @ coef, gb.T, atol=1e-12)


def test_mdcl_combined_additive_and_symmetric():
    r = Rng(23)
    s = (unit_rows(r, 4, 3), unit_rows(r, 4, 3))
    t = (unit_rows(r, 4, 3), unit_rows(r, 4, 3))
    res = mdcl_combined(t, s, 0.3)
    assert res.loss == res.loss_student + res.loss_teacher
    assert res.loss_student == mdcl_loss_one_side(*s, 0.3)[0]
    sym = mdcl_combined(s, s, 0.3)
    assert sym.loss == 2 * sym.loss_student
