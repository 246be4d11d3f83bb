"""Budgeted soft top-k masks.

Scores z are normalized with a capped exponential, lam = min(1, exp(z - tau)),
where tau is chosen so that sum(lam) == t. The mask keeps lam on the t largest
entries and zeroes the rest. Gradients treat the selection as constant and
differentiate lam exactly, including the implicit dependence of tau on z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make

BISECT_WIDTH = 1e-12
BISECT_MAX_ITER = 200
TIE_GUARD = 1e-9

# Rows whose t-th and (t+1)-th lam are within TIE_GUARD during backward.
diagnostics = {"boundary_ties": 0}


@dataclass
class Mask:
    """Per-layer soft mask plus the quantities it was built from.

    m, lam: (L, d_ffn); selected: (L, t) ascending indices; tau: (L,).
    """

    m: np.ndarray
    selected: np.ndarray
    lam: np.ndarray
    tau: np.ndarray

    @property
    def t(self) -> int:
        return self.selected.shape[-1]

    @property
    def num_layers(self) -> int:
        return self.m.shape[0]


def _check(z: np.ndarray, t: int) -> None:
    d = z.shape[-1]
    if not isinstance(t, (int, np.integer)) or t <= 0:
        raise ValueError(f"t must be a positive integer, got {t!r}")
    if t > d:
        raise ValueError(f"t={t} exceeds row width {d}")
    if not np.all(np.isfinite(z)):
        raise ValueError("scores must be finite")


def _budget(z: np.ndarray, tau: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, np.exp(np.minimum(z - tau[..., None], 0.0))).sum(axis=-1)


def solve_tau(z, t: int) -> np.ndarray:
    """Threshold tau with sum(min(1, exp(z - tau))) == t, row-wise over the last axis.

    Bisection brackets tau; a closed-form step on the located unsaturated set
    then lands it at machine precision.
    """
    z = np.asarray(z, dtype=np.float64)
    _check(z, t)
    d = z.shape[-1]
    lo = z.min(axis=-1) - np.log(d)
    hi = z.max(axis=-1) + np.log(d)
    if t == d:
        return lo
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        over = _budget(z, mid) > t
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
        if np.all(hi - lo <= BISECT_WIDTH):
            break
    tau = 0.5 * (lo + hi)
    # polish: with the saturated set fixed, tau = log(sum_A exp(z) / (t - |sat|))
    sat = z >= tau[..., None]
    n_sat = sat.sum(axis=-1)
    # reference is the largest unsaturated score, so saturated entries never enter the sum
    free_max = np.where(sat, -np.inf, z).max(axis=-1)
    ref = np.where(np.isfinite(free_max), free_max, 0.0)[..., None]
    free = np.where(sat, 0.0, np.exp(np.minimum(z - ref, 0.0))).sum(axis=-1)
    ok = (n_sat < t) & (free > 0)
    with np.errstate(divide="ignore"):
        exact = ref[..., 0] + np.log(free) - np.log(np.maximum(t - n_sat, 1))
    consistent = ok & (exact <= np.where(sat, z, np.inf).min(axis=-1))
    consistent &= exact >= free_max
    return np.where(consistent, exact, tau)


def _top_indices(lam: np.ndarray, t: int) -> np.ndarray:
    # stable sort on -lam breaks ties by lowest index
    order = np.argsort(-lam, axis=-1, kind="stable")[..., :t]
    return np.sort(order, axis=-1)


def soft_topk(z, t: int):
    """Return (lam, m, selected, tau) for each row of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    tau = solve_tau(z, t)
    lam = np.minimum(1.0, np.exp(np.minimum(z - tau[..., None], 0.0)))
    selected = _top_indices(lam, t)
    keep = np.zeros_like(lam, dtype=bool)
    np.put_along_axis(keep, selected, True, axis=-1)
    m = np.where(keep, lam, 0.0)
    return lam, m, selected, tau


def make_mask(z, t: int) -> Mask:
    lam, m, selected, tau = soft_topk(z, t)
    return Mask(m=m, selected=selected, lam=lam, tau=tau)


def soft_topk_backward(z, t: int, upstream, lam=None, selected=None) -> np.ndarray:
    """Vector-Jacobian product of z -> m, row-wise over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if lam is None or selected is None:
        lam, _, selected, _ = soft_topk(z, t)
    d = z.shape[-1]
    if t < d:
        srt = np.sort(lam, axis=-1)
        gap = srt[..., d - t] - srt[..., d - t - 1]
        diagnostics["boundary_ties"] += int(np.sum(gap < TIE_GUARD))
    keep = np.zeros_like(lam, dtype=bool)
    np.put_along_axis(keep, selected, True, axis=-1)
    free = lam < 1.0
    lam_free = np.where(free, lam, 0.0)
    denom = lam_free.sum(axis=-1, keepdims=True)
    # u_k = upstream_k * lam_k on kept, unsaturated entries
    u = np.where(keep & free, upstream * lam, 0.0)
    dtau = np.divide(lam_free, denom, out=np.zeros_like(lam_free), where=denom > 0)
    return u - dtau * u.sum(axis=-1, keepdims=True)


def soft_topk_op(z: Tensor, t: int) -> tuple[Tensor, Mask]:
    """Differentiable z -> m on a Tensor of shape (..., d); also returns the Mask."""
    lam, m, selected, tau = soft_topk(z.data, t)

    def backward(g):
        return (soft_topk_backward(z.data, t, g, lam=lam, selected=selected),)

    out = _make(m, (z,), backward, "soft_topk")
    return out, Mask(m=m, selected=selected, lam=lam, tau=tau)
