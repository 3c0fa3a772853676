import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from xmoda.errors import NonFiniteInput, ShapeMismatch
from xmoda.losses import (
    PatchSet,
    adversarial_loss,
    cycle_loss,
    fd_gradient,
    patchnce_loss,
    rel_error,
)
from xmoda.translators import cycle_l1, lsgan_loss, nce_from_vectors


def _away_from_ties(rng, shape, ref, gap=1e-3):
    """Random array whose entries differ from ``ref`` by at least ``gap``."""
    x = rng.normal(size=shape)
    d = x - ref
    return np.where(np.abs(d) < gap, ref + np.sign(d + 1e-12) * gap * 10, x)


def _random_patchset(rng, d=8, n=5, tau=0.07):
    unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)
    return PatchSet(unit(rng.normal(size=d)), unit(rng.normal(size=d)), unit(rng.normal(size=(n - 1, d))), tau)


# ---------------------------------------------------------------------------
# cycle loss


def test_cycle_fixed_point_is_zero():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert cycle_loss(x, x, x.copy(), x.copy()).value == 0.0


def test_cycle_all_ones_vs_zeros():
    z = np.zeros((5, 7))
    t = np.random.default_rng(1).normal(size=(2, 2))
    assert cycle_loss(z, t, np.ones_like(z), t.copy()).value == 1.0


def test_cycle_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    xs, xt, a, b = (rng.normal(size=(3, 3)) for _ in range(4))
    total_s = sum(abs(a[i, j] - xs[i, j]) for i in range(3) for j in range(3)) / 9
    total_t = sum(abs(b[i, j] - xt[i, j]) for i in range(3) for j in range(3)) / 9
    assert cycle_loss(xs, xt, a, b).value == pytest.approx(total_s + total_t, abs=1e-12)


def test_cycle_gradient_matches_fd():
    rng = np.random.default_rng(3)
    xs, xt = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a, b = _away_from_ties(rng, (3, 3), xs), _away_from_ties(rng, (3, 3), xt)
    lv = cycle_loss(xs, xt, a, b)
    assert rel_error(lv.grads["fg_xs"], fd_gradient(lambda v: cycle_loss(xs, xt, v, b).value, a)) < 1e-4
    assert rel_error(lv.grads["gf_xt"], fd_gradient(lambda v: cycle_loss(xs, xt, a, v).value, b)) < 1e-4


def test_cycle_zero_subgradient_at_tie():
    x = np.zeros((2, 2))
    assert np.all(cycle_loss(x, x, x, x).grads["fg_xs"] == 0)


def test_cycle_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        cycle_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cycle_nonnegative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    xs, xt = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    a = xs.copy()
    a[rng.integers(2), rng.integers(3)] += rng.uniform(1e-6, 1.0)
    assert cycle_loss(xs, xt, a, xt).value > 0
    assert cycle_loss(xs, xt, xs, xt).value == 0


# ---------------------------------------------------------------------------
# PatchNCE


def test_patchnce_uniform_logits_equals_log_n():
    q = np.array([1.0, 0.0])
    keys = np.array([[0.0, 1.0]] * 4)
    ps = PatchSet(q, keys[0], keys[1:], 0.07)
    assert patchnce_loss(ps).value == pytest.approx(math.log(4), abs=1e-9)
    assert patchnce_loss(ps).value == pytest.approx(1.3862944, abs=1e-7)


def test_patchnce_scalar_case():
    ps = PatchSet([1.0], [1.0], [[0.0]], 1.0)
    # -log(e / (e + 1)) = log(1 + e^-1)
    assert patchnce_loss(ps).value == pytest.approx(math.log1p(math.exp(-1)), abs=1e-9)
    assert patchnce_loss(ps).value == pytest.approx(0.3132617, abs=1e-7)


def test_patchnce_gradients_match_fd():
    rng = np.random.default_rng(4)
    for _ in range(10):
        ps = _random_patchset(rng, d=8, n=5)
        lv = patchnce_loss(ps)
        gq = fd_gradient(lambda v: patchnce_loss(PatchSet(v, ps.k_pos, ps.k_negs, ps.tau)).value, ps.q)
        gk = fd_gradient(lambda v: patchnce_loss(PatchSet(ps.q, v, ps.k_negs, ps.tau)).value, ps.k_pos)
        gn = fd_gradient(lambda v: patchnce_loss(PatchSet(ps.q, ps.k_pos, v, ps.tau)).value, ps.k_negs)
        assert rel_error(lv.grads["q"], gq) < 1e-4
        assert rel_error(lv.grads["k_pos"], gk) < 1e-4
        assert rel_error(lv.grads["k_negs"], gn) < 1e-4


def test_patchnce_stable_for_large_logits():
    ps = PatchSet([100.0], [100.0], [[-100.0], [99.0]], 0.01)
    lv = patchnce_loss(ps)
    assert math.isfinite(lv.value) and all(np.all(np.isfinite(g)) for g in lv.grads.values())


def test_patchnce_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        patchnce_loss(PatchSet([np.nan], [1.0], [[0.0]], 1.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_patchnce_shift_invariance(seed, c):
    """Adding c/tau to every logit (via an extra shared coordinate) leaves the loss unchanged."""
    rng = np.random.default_rng(seed)
    ps = _random_patchset(rng, d=6, n=4, tau=0.5)
    shifted = PatchSet(
        np.append(ps.q, 1.0),
        np.append(ps.k_pos, c),
        np.hstack([ps.k_negs, np.full((len(ps.k_negs), 1), c)]),
        ps.tau,
    )
    assert patchnce_loss(shifted).value == pytest.approx(patchnce_loss(ps).value, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_patchnce_positive_and_monotone(seed):
    rng = np.random.default_rng(seed)
    negs = rng.normal(size=(3, 1))
    values = [patchnce_loss(PatchSet([1.0], [s], negs, 0.3)).value for s in np.linspace(-2, 2, 9)]
    assert all(v > 0 for v in values)
    assert all(b < a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# adversarial


def test_adversarial_cases():
    assert adversarial_loss(np.ones(4), True).value == 0.0
    assert adversarial_loss(np.zeros(3), False).value == 0.0
    assert adversarial_loss([0.0, 0.0], True).value == 1.0


def test_adversarial_oracle_and_gradient():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(2, 3, 3))
    for real in (True, False):
        t = 1.0 if real else 0.0
        oracle = sum((v - t) ** 2 for v in d.ravel()) / d.size
        lv = adversarial_loss(d, real)
        assert lv.value == pytest.approx(oracle, abs=1e-12)
        assert rel_error(lv.grads["d_out"], fd_gradient(lambda v: adversarial_loss(v, real).value, d)) < 1e-4


def test_adversarial_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        adversarial_loss([np.inf], True)


# ---------------------------------------------------------------------------
# finite differences


def test_fd_gradient_quadratic():
    g = fd_gradient(lambda v: float(np.sum(v**2)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_gradient_constant():
    assert np.all(fd_gradient(lambda v: 3.0, np.ones(5)) == 0)


# ---------------------------------------------------------------------------
# torch twins used during training agree with the references


def test_torch_twins_match_references():
    rng = np.random.default_rng(6)
    xs, xt, a, b = (rng.normal(size=(1, 1, 4, 4)) for _ in range(4))
    ta = torch.tensor(a, requires_grad=True)
    val = cycle_l1(torch.tensor(xs), ta, torch.tensor(xt), torch.tensor(b))
    val.backward()
    ref = cycle_loss(xs, xt, a, b)
    assert val.item() == pytest.approx(ref.value, abs=1e-12)
    np.testing.assert_allclose(ta.grad.numpy(), ref.grads["fg_xs"], atol=1e-12)

    d = rng.normal(size=(2, 1, 3, 3))
    td = torch.tensor(d, requires_grad=True)
    lv = lsgan_loss(td, False)
    lv.backward()
    np.testing.assert_allclose(td.grad.numpy(), adversarial_loss(d, False).grads["d_out"], atol=1e-12)

    # four anchors; each uses the other three keys as negatives
    unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)
    qn, keys = unit(rng.normal(size=(4, 8))), unit(rng.normal(size=(4, 8)))
    neg_idx = [[j for j in range(4) if j != i] for i in range(4)]
    ps = [PatchSet(qn[i], keys[i], keys[neg_idx[i]], 0.07) for i in range(4)]
    q = torch.tensor(qn, requires_grad=True)
    tq = nce_from_vectors(q, torch.tensor(keys), torch.tensor(neg_idx), 0.07)
    tq.backward()
    assert tq.item() == pytest.approx(np.mean([patchnce_loss(p).value for p in ps]), abs=1e-10)
    np.testing.assert_allclose(q.grad.numpy(), np.stack([patchnce_loss(p).grads["q"] for p in ps]) / 4, atol=1e-10)
