"""Reference loss functions with analytic gradients (float64 numpy).

The torch trainers use autograd twins of these functions; the test-suite
checks both against each other and against :func:`fd_gradient`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


@dataclass
class PatchSet:
    q: np.ndarray
    k_pos: np.ndarray
    k_negs: np.ndarray  # (N - 1, D)
    tau: float = 0.07

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k_pos = np.asarray(self.k_pos, dtype=np.float64)
        self.k_negs = np.atleast_2d(np.asarray(self.k_negs, dtype=np.float64))
        if self.q.ndim != 1 or self.k_pos.shape != self.q.shape or self.k_negs.shape[1] != self.q.shape[0]:
            raise ShapeMismatch(
                f"patch vectors disagree: q {self.q.shape}, k_pos {self.k_pos.shape}, k_negs {self.k_negs.shape}"
            )
        if len(self.k_negs) < 1:
            raise ValueError("a patch set needs at least one negative (N >= 2)")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def n(self) -> int:
        return len(self.k_negs) + 1


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("input contains NaN or infinite values")


def cycle_loss(x_s, x_t, fg_xs, gf_xt) -> LossValue:
    """Mean-reduced L1 reconstruction error of both translation cycles.

    The subgradient of ``|0|`` is taken as 0.
    """
    x_s, x_t, fg_xs, gf_xt = (np.asarray(a, dtype=np.float64) for a in (x_s, x_t, fg_xs, gf_xt))
    if fg_xs.shape != x_s.shape or gf_xt.shape != x_t.shape:
        raise ShapeMismatch(f"reconstruction shapes {fg_xs.shape}, {gf_xt.shape} != inputs {x_s.shape}, {x_t.shape}")
    d_s = fg_xs - x_s
    d_t = gf_xt - x_t
    value = np.abs(d_s).mean() + np.abs(d_t).mean()
    return LossValue(
        float(value),
        {"fg_xs": np.sign(d_s) / d_s.size, "gf_xt": np.sign(d_t) / d_t.size},
    )


def patchnce_loss(ps: PatchSet) -> LossValue:
    """InfoNCE over one positive and ``N - 1`` negatives; the positive is logit 0."""
    _check_finite(ps.q, ps.k_pos, ps.k_negs)
    keys = np.vstack([ps.k_pos[None, :], ps.k_negs])  # (N, D)
    logits = keys @ ps.q / ps.tau
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    value = lse - logits[0]
    p = np.exp(logits - lse)
    dlogits = p.copy()
    dlogits[0] -= 1.0
    grad_q = keys.T @ dlogits / ps.tau
    grad_keys = np.outer(dlogits, ps.q) / ps.tau
    return LossValue(float(value), {"q": grad_q, "k_pos": grad_keys[0], "k_negs": grad_keys[1:]})


def adversarial_loss(d_out, target_real: bool) -> LossValue:
    """Least-squares GAN objective ``mean((d_out - t)^2)``."""
    d = np.asarray(d_out, dtype=np.float64)
    _check_finite(d)
    t = 1.0 if target_real else 0.0
    diff = d - t
    return LossValue(float(np.mean(diff**2)), {"d_out": 2.0 * diff / diff.size})


def fd_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Max-norm relative error, robust to near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
