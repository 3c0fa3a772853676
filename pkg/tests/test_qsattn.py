import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from xmoda.errors import KOutOfRange, NonFiniteInput, ShapeMismatch, TooFewNegatives
from xmoda.losses import patchnce_loss
from xmoda.qsattn import (
    FeatureMap,
    build_patch_sets,
    global_attention,
    row_entropy,
    row_softmax,
    sample_negative_indices,
    select_queries,
)
from xmoda.rng import mix
from xmoda.translators import TrainConfig, attention_select, qs_nce_loss


def _stochastic(rng, n):
    a = rng.exponential(size=(n, n)) ** 3
    return a / a.sum(axis=1, keepdims=True)


def test_hand_4x4_softmax_oracle():
    # 1 channel, 2x2 map with values 1..4: logits are products v_i * v_j
    feat = FeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    v = [1.0, 2.0, 3.0, 4.0]
    oracle = [[math.exp(vi * vj) / sum(math.exp(vi * vk) for vk in v) for vj in v] for vi in v]
    np.testing.assert_allclose(global_attention(feat), oracle, atol=1e-9, rtol=0)
    # row 0: softmax of [1, 2, 3, 4]
    assert global_attention(feat)[0, 3] == pytest.approx(0.6439142598879722, abs=1e-12)


def test_identical_positions_give_uniform_rows():
    feat = FeatureMap(np.ones((3, 4, 4)) * 0.7)
    np.testing.assert_allclose(global_attention(feat), 1 / 16, atol=1e-12)


def test_attention_rows_sum_to_one_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = global_attention(FeatureMap(rng.normal(size=(4, 5, 6))))
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_attention_rejects_nonfinite():
    data = np.zeros((1, 2, 2))
    data[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        global_attention(FeatureMap(data))


def test_feature_map_shape_checked():
    with pytest.raises(ShapeMismatch):
        FeatureMap(np.zeros((4, 4)))


def test_entropy_hand_cases():
    h = row_entropy(np.array([[1 / 8] * 8, [1.0] + [0.0] * 7, [0.5, 0.5] + [0.0] * 6]))
    assert h[0] == pytest.approx(2.0794415, abs=1e-7)
    assert h[1] == 0.0
    assert h[2] == pytest.approx(0.6931472, abs=1e-7)


def test_entropy_bounds_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        h = row_entropy(_stochastic(rng, n))
        assert np.all(h >= -1e-9) and np.all(h <= math.log(n) + 1e-9)


def _brute_force_select(a, k):
    h = [-sum(p * math.log(p) for p in row if p > 0) for row in a]
    return [i for _, i in sorted((hi, i) for i, hi in enumerate(h))][:k]


def test_select_queries_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = _stochastic(rng, 16)
        k = int(rng.integers(1, 17))
        sel = select_queries(a, row_entropy(a), k)
        assert list(sel.indices) == _brute_force_select(a, k)
        assert np.array_equal(sel.reduced_attention, a[sel.indices])


def test_select_all_and_ties():
    a = np.full((6, 6), 1 / 6)
    sel = select_queries(a, row_entropy(a), 4)
    assert list(sel.indices) == [0, 1, 2, 3]
    rng = np.random.default_rng(3)
    b = _stochastic(rng, 5)
    h = row_entropy(b)
    assert list(select_queries(b, h, 5).indices) == list(np.argsort(h, kind="stable"))


@pytest.mark.parametrize("k", [0, 7])
def test_select_k_out_of_range(k):
    a = np.full((6, 6), 1 / 6)
    with pytest.raises(KOutOfRange):
        select_queries(a, row_entropy(a), k)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_selection_monotone(seed, k):
    a = _stochastic(np.random.default_rng(seed), 12)
    h = row_entropy(a)
    sel = set(select_queries(a, h, k).indices.tolist())
    rest = [i for i in range(12) if i not in sel]
    if rest:
        assert max(h[list(sel)]) <= min(h[rest])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_row_softmax_shift_invariant(seed, c):
    logits = np.random.default_rng(seed).normal(size=(5, 5))
    np.testing.assert_allclose(row_softmax(logits + c), row_softmax(logits), atol=1e-9)


def test_negative_sampling():
    neg = sample_negative_indices(10, 4, 5)
    assert neg.shape == (10, 4)
    for j, row in enumerate(neg):
        assert j not in row and len(set(row)) == 4 and all(0 <= r < 10 for r in row)
    assert np.array_equal(neg, sample_negative_indices(10, 4, 5))
    with pytest.raises(TooFewNegatives):
        sample_negative_indices(4, 4, 0)
    with pytest.raises(TooFewNegatives):
        sample_negative_indices(4, 0, 0)


def test_patch_sets_identity_and_norms():
    rng = np.random.default_rng(4)
    f = FeatureMap(rng.normal(size=(6, 4, 4)))
    a = global_attention(f)
    sel = select_queries(a, row_entropy(a), 8)
    sets = build_patch_sets(f, FeatureMap(f.data.copy()), sel, n_neg=5, rng_seed=1)
    assert len(sets) == 8
    for ps in sets:
        np.testing.assert_allclose(ps.q, ps.k_pos, atol=1e-12)
        for v in (ps.q, ps.k_pos, *ps.k_negs):
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)


def test_patch_sets_errors():
    f = FeatureMap(np.random.default_rng(5).normal(size=(2, 2, 2)))
    a = global_attention(f)
    sel = select_queries(a, row_entropy(a), 2)
    with pytest.raises(ShapeMismatch):
        build_patch_sets(f, FeatureMap(np.zeros((2, 2, 3))), sel)
    with pytest.raises(TooFewNegatives):
        build_patch_sets(f, f, sel, n_neg=2)


def test_torch_attention_matches_reference():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(8, 6, 6)) * 0.3
    f = FeatureMap(data)
    a = global_attention(f)
    sel = select_queries(a, row_entropy(a), 9)
    idx, rows = attention_select(torch.tensor(f.flat()), 9)
    assert idx.tolist() == sel.indices.tolist()
    np.testing.assert_allclose(rows.numpy(), sel.reduced_attention, atol=1e-12)


def test_training_loss_equals_reference_patch_sets():
    """The trainer's loss (no projection head) equals the mean reference PatchNCE value."""
    rng = np.random.default_rng(7)
    src = rng.normal(size=(8, 6, 6)) * 0.3
    trans = src + 0.5 * rng.normal(size=src.shape)
    cfg = TrainConfig(nce_negatives=5, nce_query_fraction=0.25)
    got = qs_nce_loss([torch.tensor(src[None])], [torch.tensor(trans[None])], None, cfg, seed=11).item()

    fs, ft = FeatureMap(src), FeatureMap(trans)
    a = global_attention(fs)
    sel = select_queries(a, row_entropy(a), 9)
    sets = build_patch_sets(fs, ft, sel, cfg.tau, 5, mix(11, 0, 0))
    assert got == pytest.approx(np.mean([patchnce_loss(p).value for p in sets]), abs=1e-9)


def test_debug_hook_identity():
    """Translated features forced to the source: loss equals the oracle with q == k+."""
    rng = np.random.default_rng(8)
    src = rng.normal(size=(4, 4, 4))
    cfg = TrainConfig(nce_negatives=3)
    got = qs_nce_loss([torch.tensor(src[None])], [torch.tensor(src[None])], None, cfg, seed=2).item()
    f = FeatureMap(src)
    a = global_attention(f)
    sel = select_queries(a, row_entropy(a), 4)
    sets = build_patch_sets(f, f, sel, cfg.tau, 3, mix(2, 0, 0))
    assert all(np.allclose(p.q, p.k_pos) for p in sets)
    assert got == pytest.approx(np.mean([patchnce_loss(p).value for p in sets]), abs=1e-9)
