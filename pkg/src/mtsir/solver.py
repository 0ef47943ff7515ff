"""Projected spectral gradient solvers for the corrected criterion.

One engine drives every penalty: a gradient step on the quadratic loss,
the penalty's proximal map, then projection onto the feasible ball.  The
step size is the Barzilai-Borwein type-1 estimate guarded by a
non-monotone line search (objective compared against the worst of the
last few accepted values).  The group-bridge penalty is handled by
alternating the augmented form: closed-form updates of the per-group
augmentation variables and a weighted-L1 subproblem on an L1 ball.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import subset_design
from .moments import CorrectedMoments, corrected_moments, loss_gradient, loss_value
from .penalty import (
    GROUP_BRIDGE,
    GROUP_LASSO_Q2,
    LASSO_L1,
    PenaltySpec,
    group_lasso_norm,
    group_soft_threshold,
    penalty_norm,
    project_group_l2_ball,
    project_l1,
    soft_threshold,
)

FIT_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Objective became non-finite; carries the trace seen so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = np.asarray(trace)


@dataclass
class SolverConfig:
    max_iter: int = 5000
    tol_rel_obj: float = 1e-6
    memory: int = 10
    suff_decrease: float = 1e-4
    step_min: float = 1e-10
    step_max: float = 1e10
    init_step: float | None = None  # inverse step length; default: spectral bound
    step_rule: str = "bb"  # "bb" or "fixed"
    outer_max_iter: int = 50
    keep_iterates: bool = False

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("line-search memory must be >= 1")
        if self.step_rule not in ("bb", "fixed"):
            raise ValueError("step_rule must be 'bb' or 'fixed'")
        for name in ("max_iter", "tol_rel_obj", "suff_decrease", "step_min", "step_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitResult:
    eta: np.ndarray
    objective: float
    trace: np.ndarray
    iterations: int
    converged: bool
    lam: float
    radius: float
    active_groups: np.ndarray
    iterates: list | None = None
    meta: dict = field(default_factory=dict)


def _active_groups(eta):
    return np.nonzero(np.abs(eta).sum(axis=0) > 0)[0]


def _spg(mom, pen_value, prox, project, cfg, eta0):
    """Shared engine.  prox(v, alpha) applies the scaled proximal map,
    project enforces the ball, pen_value evaluates the penalty term."""
    eta = project(np.array(eta0, dtype=float))
    g = loss_gradient(eta, mom)
    f = loss_value(eta, mom) + pen_value(eta)
    if not np.isfinite(f):
        raise NumericalError("objective non-finite at the initial point", [f])
    delta0 = cfg.init_step if cfg.init_step is not None else mom.spectral_bound()
    delta = min(max(delta0, cfg.step_min), cfg.step_max)
    window = [f]
    trace = [f]
    best_f, best_eta = f, eta.copy()
    iterates = [eta.copy()] if cfg.keep_iterates else None
    converged = False
    it = 0
    while it < cfg.max_iter:
        it += 1
        if cfg.step_rule == "fixed":
            delta = min(max(delta0, cfg.step_min), cfg.step_max)
        f_ref = max(window)
        accepted = False
        cand = eta
        f_cand = f
        d = delta
        for _ in range(80):
            alpha = 1.0 / d
            cand = project(prox(eta - alpha * g, alpha))
            diff = cand - eta
            dn2 = float(np.vdot(diff, diff))
            f_cand = loss_value(cand, mom) + pen_value(cand)
            if not np.isfinite(f_cand):
                raise NumericalError(
                    f"objective diverged at iteration {it}", trace + [f_cand]
                )
            if dn2 == 0.0:
                converged = True
                break
            if f_cand <= f_ref - cfg.suff_decrease * dn2 / (2.0 * alpha):
                accepted = True
                break
            if d >= cfg.step_max:
                break
            d = min(d * 2.0, cfg.step_max)
        if converged:
            break
        if not accepted:
            # step limit reached without sufficient decrease: stall out
            break
        g_new = loss_gradient(cand, mom)
        if cfg.step_rule == "bb":
            dg = g_new - g
            curv = float(np.vdot(cand - eta, dg))
            if curv > 0.0:
                delta = min(max(curv / dn2, cfg.step_min), cfg.step_max)
            else:
                delta = d  # non-positive curvature: keep the accepted step
        prev_f = f
        eta, g, f = cand, g_new, f_cand
        window.append(f)
        if len(window) > cfg.memory:
            window.pop(0)
        trace.append(f)
        if iterates is not None:
            iterates.append(eta.copy())
        if f < best_f:
            best_f, best_eta = f, eta.copy()
        if abs(f - prev_f) <= cfg.tol_rel_obj * max(1.0, abs(f)):
            converged = True
            break
    return FitResult(
        eta=best_eta,
        objective=best_f,
        trace=np.array(trace),
        iterations=it,
        converged=converged,
        lam=math.nan,
        radius=math.inf,
        active_groups=_active_groups(best_eta),
        iterates=iterates,
    )


def _zeros_like_problem(mom):
    return np.zeros((mom.M, mom.p))


def spg_glasso(mom, pen, cfg=None, eta0=None):
    """Group-lasso (L_{1,2}) penalized corrected fit on the group-L2 ball."""
    if pen.kind != GROUP_LASSO_Q2:
        raise ValueError("penalty kind must be group_lasso_q2")
    cfg = cfg or SolverConfig()
    lam, R = pen.lam, pen.radius

    def pen_value(eta):
        return lam * group_lasso_norm(eta, 2.0) if lam > 0 else 0.0

    def prox(v, alpha):
        return group_soft_threshold(v, alpha * lam) if lam > 0 else v

    if math.isinf(R):
        project = lambda eta: eta
    else:
        project = lambda eta: project_group_l2_ball(eta, R)
    res = _spg(mom, pen_value, prox, project, cfg, eta0 if eta0 is not None else _zeros_like_problem(mom))
    res.lam, res.radius = lam, R
    return res


def spg_lasso(mom, pen, cfg=None, eta0=None):
    """Entrywise-L1 penalized corrected fit on the L1 ball (single-task use)."""
    if pen.kind != LASSO_L1:
        raise ValueError("penalty kind must be lasso_l1")
    cfg = cfg or SolverConfig()
    lam, R = pen.lam, pen.radius

    def pen_value(eta):
        return lam * float(np.abs(eta).sum()) if lam > 0 else 0.0

    def prox(v, alpha):
        return soft_threshold(v, alpha * lam) if lam > 0 else v

    if math.isinf(R):
        project = lambda eta: eta
    else:
        project = lambda eta: project_l1(eta, R)
    res = _spg(mom, pen_value, prox, project, cfg, eta0 if eta0 is not None else _zeros_like_problem(mom))
    res.lam, res.radius = lam, R
    return res


def bridge_theta(eta, tau_n):
    """Closed-form augmentation update: theta_j = sqrt(s_j / tau_n) with
    s_j the group L1 norm; zero groups keep theta_j = 0."""
    s = np.abs(np.atleast_2d(eta)).sum(axis=0)
    if tau_n <= 0:
        raise ValueError("tau_n must be positive")
    return np.sqrt(s / tau_n)


def bridge_objective(eta, theta, mom, tau_n):
    """Augmented group-bridge objective (loss + theta^-1 s + tau_n theta)."""
    s = np.abs(np.atleast_2d(eta)).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s > 0, s / theta, 0.0)
    if np.any((s > 0) & (theta == 0)):
        return math.inf
    return loss_value(eta, mom) + float(terms.sum()) + tau_n * float(theta.sum())


def spg_gbridge(mom, pen, cfg=None, eta0=None):
    """Group-bridge fit via data augmentation on the L1 ball of radius R^2.

    Alternates the closed-form theta update with a weighted-L1 subproblem
    solved by the SPG engine.  After each theta update the augmented
    objective equals the corrected loss plus lambda * group-bridge norm.
    """
    if pen.kind != GROUP_BRIDGE:
        raise ValueError("penalty kind must be group_bridge")
    cfg = cfg or SolverConfig()
    lam = pen.lam
    l1_radius = pen.radius**2 if math.isfinite(pen.radius) else math.inf

    if math.isinf(l1_radius):
        project = lambda eta: eta
    else:
        project = lambda eta: project_l1(eta, l1_radius)

    if lam == 0.0:
        res = _spg(mom, lambda eta: 0.0, lambda v, a: v, project, cfg,
                   eta0 if eta0 is not None else _zeros_like_problem(mom))
        res.lam, res.radius = lam, pen.radius
        return res

    tau_n = lam**2 / 4.0
    eta = np.array(eta0, dtype=float) if eta0 is not None else _zeros_like_problem(mom)
    if eta0 is not None and np.abs(eta).sum() > 0:
        theta = bridge_theta(eta, tau_n)
    else:
        theta = np.full(mom.p, 1.0 / math.sqrt(tau_n))  # neutral start (s_j = 1)

    outer_trace = []
    inner_iters = 0
    traces = []
    converged = False
    result = None
    for outer in range(cfg.outer_max_iter):
        with np.errstate(divide="ignore"):
            weights = np.where(theta > 0, 1.0 / theta, math.inf)

        def pen_value(e, w=weights):
            s = np.abs(np.atleast_2d(e)).sum(axis=0)
            finite = np.isfinite(w)
            if np.any(s[~finite] > 0):
                return math.inf
            return float((w[finite] * s[finite]).sum())

        def prox(v, alpha, w=weights):
            # augmented penalty is sum_j w_j s_j: entrywise threshold alpha w_j
            return soft_threshold(v, alpha * w[None, :])

        sub = _spg(mom, pen_value, prox, project, cfg, eta)
        inner_iters += sub.iterations
        traces.append(sub.trace)
        eta = sub.eta
        theta = bridge_theta(eta, tau_n)
        obj = bridge_objective(eta, theta, mom, tau_n)
        outer_trace.append(obj)
        result = sub
        if len(outer_trace) >= 2:
            if abs(outer_trace[-1] - outer_trace[-2]) <= cfg.tol_rel_obj * max(
                1.0, abs(outer_trace[-1])
            ):
                converged = True
                break
        elif np.abs(eta).sum() == 0.0 and sub.converged:
            converged = True  # lambda large enough to zero everything
            break
    res = FitResult(
        eta=eta,
        objective=outer_trace[-1],
        trace=np.array(outer_trace),
        iterations=inner_iters,
        converged=converged,
        lam=lam,
        radius=pen.radius,
        active_groups=_active_groups(eta),
        iterates=result.iterates if result is not None else None,
        meta={"outer_iterations": len(outer_trace), "theta": theta},
    )
    return res


def fit(mom, pen, cfg=None, eta0=None):
    """Dispatch on the penalty kind."""
    if pen.kind == GROUP_LASSO_Q2:
        return spg_glasso(mom, pen, cfg, eta0)
    if pen.kind == LASSO_L1:
        return spg_lasso(mom, pen, cfg, eta0)
    return spg_gbridge(mom, pen, cfg, eta0)


def fit_uncorrected(design, pen, cfg=None, eta0=None):
    """Same solver paths with the noise covariance forced to zero."""
    mom = corrected_moments(design)
    return fit(mom, pen, cfg, eta0)


def auto_radius(pen_kind, eta_unc, floor=1e-8):
    """Feasible-ball radius from an uncorrected fit: 1.5x its ball norm.

    For the group bridge the ball lives on the L1 scale (radius R^2), so the
    returned R satisfies R^2 = 1.5 ||eta_unc||_1.
    """
    norm = penalty_norm(eta_unc, pen_kind)
    if pen_kind == GROUP_BRIDGE:
        l1 = float(np.abs(eta_unc).sum())
        return math.sqrt(max(1.5 * l1, floor))
    return max(1.5 * norm, floor)


@dataclass
class CVResult:
    best_lambda: float
    table: list  # (fold, lambda, score) rows
    totals: list  # (lambda, summed score) rows
    fit: FitResult
    radius: float


def _fold_indices(n, folds, rng):
    perm = rng.permutation(n)
    return [np.sort(perm[f::folds]) for f in range(folds)]


def cross_validate(
    design, sigma_wav, kind, lambdas, folds=5, cfg=None, seed=0, radius=None
):
    """Per-task-stratified K-fold selection of lambda; ties pick the larger.

    The score is the validation PMSE summed over tasks.  For corrected
    fits with no explicit radius, each fold's radius and warm start come
    from an uncorrected fit at the same lambda on that fold's training
    half.  Refits on the full data at the selected lambda.
    """
    lambdas = sorted(set(float(l) for l in lambdas), reverse=True)
    if not lambdas:
        raise ValueError("lambda grid is empty")
    cfg = cfg or SolverConfig()
    rng = np.random.default_rng(seed)
    corrected = sigma_wav is not None and not sigma_wav.is_zero
    fold_idx = []
    for m, n in enumerate(design.n):
        if n < folds:
            raise ValueError(f"task {design.task_ids[m]} has fewer samples than folds")
        idx = _fold_indices(n, folds, rng)
        if min(len(i) for i in idx) < 2:
            raise ValueError("cross-validation folds must contain at least 2 samples")
        fold_idx.append(idx)

    table = []
    totals = {lam: 0.0 for lam in lambdas}
    for f in range(folds):
        train_idx = [
            np.setdiff1d(np.arange(design.n[m]), fold_idx[m][f])
            for m in range(design.M)
        ]
        val_idx = [fold_idx[m][f] for m in range(design.M)]
        train = subset_design(design, train_idx)
        mom = corrected_moments(design=train, sigma_wav=sigma_wav)
        var_train = [float(np.var(train.y_centered[m], ddof=1)) for m in range(design.M)]
        eta_warm = None
        unc_path = None
        if corrected and radius is None:
            unc_path = _uncorrected_path(train, kind, lambdas, cfg)
        for lam in lambdas:
            if corrected and radius is None:
                eta_unc = unc_path[lam]
                R = auto_radius(kind, eta_unc)
                start = eta_warm if eta_warm is not None else eta_unc
            else:
                R = radius if radius is not None else math.inf
                start = eta_warm
            pen = PenaltySpec(kind, lam, radius=R)
            res = fit(mom, pen, cfg, eta0=start)
            eta_warm = res.eta
            score = 0.0
            for m in range(design.M):
                w_val = design.W[m][val_idx[m]]
                y_val = design.y_centered[m][val_idx[m]] + design.y_means[m]
                pred = train.y_means[m] + w_val @ res.eta[m]
                score += float(np.mean((pred - y_val) ** 2)) / var_train[m]
            table.append((f, lam, score))
            totals[lam] += score

    best_score = min(totals.values())
    best_lambda = max(lam for lam, s in totals.items() if s == best_score)
    full_mom = corrected_moments(design=design, sigma_wav=sigma_wav)
    if corrected and radius is None:
        unc = fit_uncorrected(design, PenaltySpec(kind, best_lambda), cfg)
        R = auto_radius(kind, unc.eta)
        final = fit(full_mom, PenaltySpec(kind, best_lambda, radius=R), cfg, eta0=unc.eta)
    else:
        R = radius if radius is not None else math.inf
        final = fit(full_mom, PenaltySpec(kind, best_lambda, radius=R), cfg)
    return CVResult(
        best_lambda=best_lambda,
        table=table,
        totals=sorted(totals.items(), reverse=True),
        fit=final,
        radius=R,
    )


def _uncorrected_path(design, kind, lambdas, cfg):
    """Uncorrected fits along a descending lambda path with warm starts."""
    mom = corrected_moments(design)
    out = {}
    eta = None
    for lam in lambdas:
        res = fit(mom, PenaltySpec(kind, lam), cfg, eta0=eta)
        eta = res.eta
        out[lam] = eta
    return out


def lambda_grid(mom, kind, num=20, min_ratio=1e-3):
    """Log-spaced grid spanning [min_ratio, 1] x (max group norm of gamma_hat)."""
    g = mom.gammas
    if kind == GROUP_LASSO_Q2:
        base = float(np.linalg.norm(g, axis=0).max())
    elif kind == GROUP_BRIDGE:
        base = float(np.abs(g).sum(axis=0).max())
    else:
        base = float(np.abs(g).max())
    base = max(base, 1e-12)
    return np.geomspace(min_ratio * base, base, num)[::-1]


@dataclass
class TraceReport:
    distances_sq: np.ndarray
    first_hit: int | None
    decay_slope: float
    decay_r2: float
    plateau: float


def convergence_trace_check(result, eta_ref, delta2=None):
    """Distance of stored iterates to a reference optimum.

    Reports the first iterate within delta2, a log-linear fit over the
    first decade of squared-distance decay, and the final plateau level.
    """
    if result.iterates is None:
        raise ValueError("fit was run without keep_iterates")
    ref = np.asarray(eta_ref, dtype=float)
    d2 = np.array([float(np.sum((it - ref) ** 2)) for it in result.iterates])
    tail = max(1, len(d2) // 10)
    plateau = float(d2[-tail:].mean())
    if delta2 is None:
        delta2 = 2.0 * plateau
    hits = np.nonzero(d2 <= delta2)[0]
    first_hit = int(hits[0]) if hits.size else None
    target = d2[0] / 10.0
    below = np.nonzero(d2 <= target)[0]
    end = int(below[0]) + 1 if below.size else len(d2)
    seg = np.maximum(d2[:end], 1e-300)
    t = np.arange(seg.size)
    if seg.size >= 3:
        slope, intercept = np.polyfit(t, np.log(seg), 1)
        fitted = slope * t + intercept
        ss_res = float(np.sum((np.log(seg) - fitted) ** 2))
        ss_tot = float(np.sum((np.log(seg) - np.log(seg).mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        slope, r2 = math.nan, math.nan
    return TraceReport(d2, first_hit, float(slope), float(r2), plateau)


def save_fit(result, path, extra=None):
    """Write fit.json (config echo, trace) and eta.bin (little-endian f64)."""
    os.makedirs(path, exist_ok=True)
    M, p = result.eta.shape
    info = {
        "format_version": FIT_FORMAT_VERSION,
        "kind": "fit",
        "M": M,
        "p": p,
        "lambda": result.lam,
        "radius": None if math.isinf(result.radius) else result.radius,
        "iterations": result.iterations,
        "converged": result.converged,
        "objective": result.objective,
        "objective_trace": [float(x) for x in result.trace],
        "active_groups": [int(i) for i in result.active_groups],
    }
    if extra:
        info.update(extra)
    with open(os.path.join(path, "fit.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "eta.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(result.eta, dtype="<f8").tobytes())


def load_fit(path):
    with open(os.path.join(path, "fit.json")) as fh:
        info = json.load(fh)
    raw = open(os.path.join(path, "eta.bin"), "rb").read()
    M, p = int(info["M"]), int(info["p"])
    if len(raw) != M * p * 8:
        raise ValueError(f"eta.bin truncated at byte {len(raw)}")
    eta = np.frombuffer(raw, dtype="<f8").reshape(M, p).copy()
    return eta, info
