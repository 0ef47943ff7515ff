"""Grouped norms, proximal maps and Euclidean ball projections.

Coefficients live in an (M, p) array; group j is column j (one location
shared across the M tasks).  All functions are pure.
"""

import math
from dataclasses import dataclass

import numpy as np

GROUP_LASSO_Q2 = "group_lasso_q2"
GROUP_BRIDGE = "group_bridge"
LASSO_L1 = "lasso_l1"
PENALTY_KINDS = (GROUP_LASSO_Q2, GROUP_BRIDGE, LASSO_L1)


@dataclass
class PenaltySpec:
    """Penalty kind, strength and feasible-ball radius.

    ``radius`` is the paper-level R: the group-lasso and lasso balls have
    radius R in their own norm, while the group-bridge solver restricts to
    the L1 ball of radius R**2.
    """

    kind: str
    lam: float
    radius: float = math.inf
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input")


def group_lasso_norm(eta, q=2.0):
    """L_{1,q} norm: sum over locations of the q-norm across tasks."""
    if q < 1:
        raise ValueError("q must be >= 1")
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if np.isinf(q):
        per_group = np.abs(eta).max(axis=0)
    else:
        per_group = (np.abs(eta) ** q).sum(axis=0) ** (1.0 / q)
    return float(per_group.sum())


def group_bridge_norm(eta):
    """Sum over locations of sqrt of the L1 norm across tasks."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    return float(np.sqrt(np.abs(eta).sum(axis=0)).sum())


def penalty_norm(eta, kind):
    """The norm that defines the feasible ball for a penalty kind."""
    if kind == GROUP_LASSO_Q2:
        return group_lasso_norm(eta, 2.0)
    if kind == GROUP_BRIDGE:
        return group_bridge_norm(eta)
    return float(np.abs(eta).sum())


def project_l1(v, radius):
    """Euclidean projection onto the L1 ball via sort-and-threshold.

    Returns the input unchanged (as a copy) when it is already feasible.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=float)
    _check_finite(v)
    mags = np.abs(v)
    total = mags.sum()
    if total <= radius:
        return v.copy()
    flat = mags.ravel()
    u = np.sort(flat)[::-1]
    cumsum = np.cumsum(u) - radius
    idx = np.arange(1, flat.size + 1)
    rho = np.nonzero(u > cumsum / idx)[0][-1]
    theta = cumsum[rho] / (rho + 1.0)
    return np.sign(v) * np.maximum(mags - theta, 0.0)


def project_group_l2_ball(eta, radius):
    """Euclidean projection onto {sum_j ||eta_(j)||_2 <= radius}.

    Group norms are projected onto the L1 ball and each column is rescaled;
    zero columns stay zero.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    eta = np.asarray(eta, dtype=float)
    _check_finite(eta)
    two_d = eta.ndim == 2
    mat = np.atleast_2d(eta)
    norms = np.linalg.norm(mat, axis=0)
    if norms.sum() <= radius:
        out = mat.copy()
    else:
        target = project_l1(norms, radius)
        scale = np.divide(target, norms, out=np.zeros_like(norms), where=norms > 0)
        out = mat * scale
    return out if two_d else out[0]


def group_soft_threshold(eta, t, weights=None):
    """Proximal map of t * sum_j w_j ||eta_(j)||_2 (columnwise shrinkage)."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    norms = np.linalg.norm(eta, axis=0)
    thr = t if weights is None else t * np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > 0, np.maximum(0.0, 1.0 - thr / norms), 0.0)
    return eta * scale


def soft_threshold(v, t):
    """Entrywise soft threshold; t may be a scalar or broadcastable array.

    An infinite threshold pins the entry to zero.
    """
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
