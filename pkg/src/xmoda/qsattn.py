"""Query-selected global attention over source features.

Feature maps are (C, H, W) and flatten to HW row vectors in row-major
(h, w) order.  The HW x HW attention matrix is the memory hot spot; the
desk-scale limit is HW <= 1024 (32 x 32 maps, 4 MiB per float32 matrix),
enforced by :data:`MAX_HW`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KOutOfRange, NonFiniteInput, ShapeMismatch, TooFewNegatives
from .losses import PatchSet

MAX_HW = 1024


@dataclass
class FeatureMap:
    data: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"feature map must be (C, H, W), got {self.data.shape}")

    @property
    def hw(self) -> int:
        return self.data.shape[1] * self.data.shape[2]

    def flat(self) -> np.ndarray:
        """(HW, C) matrix of per-position feature vectors."""
        c = self.data.shape[0]
        return self.data.reshape(c, -1).T


@dataclass
class QuerySelection:
    indices: np.ndarray
    reduced_attention: np.ndarray


def row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def global_attention(feat: FeatureMap) -> np.ndarray:
    if not np.all(np.isfinite(feat.data)):
        raise NonFiniteInput("feature map contains NaN or infinite values")
    if feat.hw > MAX_HW:
        raise ValueError(f"HW={feat.hw} exceeds the supported maximum {MAX_HW}")
    x = feat.flat()
    return row_softmax(x @ x.T)


def row_entropy(a: np.ndarray) -> np.ndarray:
    """Natural-log Shannon entropy of each row, with 0 * log 0 = 0."""
    a = np.asarray(a, dtype=np.float64)
    safe = np.where(a > 0, a, 1.0)
    return -(np.where(a > 0, a * np.log(safe), 0.0)).sum(axis=1)


def entropy_order(h: np.ndarray) -> np.ndarray:
    """Indices sorted by (entropy ascending, index ascending)."""
    h = np.asarray(h)
    return np.lexsort((np.arange(len(h)), h))


def select_queries(a: np.ndarray, h: np.ndarray, k: int) -> QuerySelection:
    hw = len(h)
    if not 1 <= k <= hw:
        raise KOutOfRange(f"k={k} outside [1, {hw}]")
    idx = entropy_order(h)[:k]
    return QuerySelection(idx, np.asarray(a)[idx])


def sample_negative_indices(k: int, n_neg: int, rng_seed: int) -> np.ndarray:
    """For each of ``k`` anchors, ``n_neg`` distinct other positions in ``[0, k)``.

    Draws come from numpy's PCG64 seeded with ``rng_seed``; row ``j`` never
    contains ``j``.
    """
    if n_neg > k - 1:
        raise TooFewNegatives(f"{n_neg} negatives requested from {k} selected queries")
    if n_neg < 1:
        raise TooFewNegatives("at least one negative is required")
    rng = np.random.default_rng(rng_seed)
    out = np.empty((k, n_neg), dtype=np.int64)
    for j in range(k):
        draw = rng.choice(k - 1, size=n_neg, replace=False)
        out[j] = draw + (draw >= j)
    return out


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def route(sel: QuerySelection, feat: FeatureMap) -> np.ndarray:
    """Attended features: selected attention rows applied to a feature map."""
    return sel.reduced_attention @ feat.flat()


def build_patch_sets(
    feat_src: FeatureMap,
    feat_trans: FeatureMap,
    sel: QuerySelection,
    tau: float = 0.07,
    n_neg: int = 63,
    rng_seed: int = 0,
) -> list[PatchSet]:
    """Contrastive patch sets from source-derived attention applied to both domains."""
    if feat_src.data.shape != feat_trans.data.shape:
        raise ShapeMismatch(f"feature maps differ: {feat_src.data.shape} vs {feat_trans.data.shape}")
    k = len(sel.indices)
    neg = sample_negative_indices(k, n_neg, rng_seed)
    src = _l2_normalize(route(sel, feat_src))
    trans = _l2_normalize(route(sel, feat_trans))
    return [PatchSet(trans[j], src[j], src[neg[j]], tau) for j in range(k)]
