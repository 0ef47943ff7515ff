"""Synthetic-data generator and experiment harness.

A scenario draws, per task, images whose wavelet coefficients are standard
normal, corrupts them with additive noise whose wavelet coefficients have
variance 1/SNR, and produces outcomes from the noiseless images with the
mean-to-residual variance ratio fixed (default 9).  True coefficient
images are constant-height indicators (round, square or triangle) whose
size and placement follow the configured overlap pattern.  The harness
runs seeded replicates, fits the requested methods with five-fold
cross-validation over a lambda grid, and reports PMSE, bias and AUC on
held-out data.
"""

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import DesignMatrices, MultiTaskDataset, TaskData, build_design
from .metrics import coefficient_bias, pmse, reconstruct_beta, support_auc
from .moments import corrected_moments
from .noise import estimate_replicates, scaled_identity, to_wavelet_domain, zero_covariance
from .penalty import GROUP_BRIDGE, GROUP_LASSO_Q2, LASSO_L1
from .solver import NumericalError, SolverConfig, cross_validate, lambda_grid
from .wavelet import WaveletBasisSpec, inverse_transform_rows, transform_images

SHAPES = ("round", "square", "triangle")
OVERLAPS = ("partial", "homogeneous", "minimal")
COV_SCENARIOS = ("known", "unknown_linked")
METHODS = ("glasso", "gbridge", "lasso", "p_glasso", "p_gbridge", "p_lasso")

# Shape sizes target a 10% support fraction at unit scale; tasks get the
# size factors below in order (first task largest), which reproduces the
# reference experiments' hardest-first task ordering.
BASE_SUPPORT = 0.10
TASK_SCALES = (1.2, 1.0, 0.8)
SIGNAL_HEIGHT = 1.0


@dataclass
class ScenarioConfig:
    M: int = 3
    n_train: int = 200
    n_test: int = 200
    p0: int = 64
    family: str = "sym4"
    j0: int = 3
    shape: str = "round"
    overlap: str = "partial"
    snr: float = 3.0
    covariance_scenario: str = "known"
    mean_ratio: float = 9.0
    n_controls: int = 150
    n_lambdas: int = 20
    lambda_min_ratio: float = 1e-3
    cv_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.overlap not in OVERLAPS:
            raise ValueError(f"unknown overlap {self.overlap!r}")
        if self.covariance_scenario not in COV_SCENARIOS:
            raise ValueError(f"unknown covariance scenario {self.covariance_scenario!r}")
        if self.M < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("M, n_train and n_test must be positive")
        if not self.snr > 0:
            raise ValueError("snr must be positive (math.inf for noiseless)")

    @property
    def wavelet_spec(self):
        return WaveletBasisSpec(self.family, self.j0, self.p0)

    def to_dict(self):
        d = asdict(self)
        d["snr"] = None if math.isinf(self.snr) else self.snr
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("snr") in (None, "inf"):
            d["snr"] = math.inf
        return cls(**d)


def load_scenario(path):
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def save_scenario(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _shape_mask(shape, p0, center, scale):
    ci, cj = center
    ii, jj = np.meshgrid(np.arange(p0), np.arange(p0), indexing="ij")
    if shape == "round":
        r = scale * p0 * math.sqrt(BASE_SUPPORT / math.pi)
        extent = r
        mask = (ii - ci) ** 2 + (jj - cj) ** 2 <= r**2
    elif shape == "square":
        a = scale * p0 * math.sqrt(BASE_SUPPORT) / 2.0
        extent = a
        mask = (np.abs(ii - ci) <= a) & (np.abs(jj - cj) <= a)
    else:  # triangle: isoceles, apex up, height = base = t
        t = scale * p0 * math.sqrt(2.0 * BASE_SUPPORT)
        extent = t / 2.0
        di = ii - (ci - t / 2.0)
        mask = (di >= 0) & (di <= t) & (np.abs(jj - cj) <= di / 2.0)
    lo = min(ci, cj)
    hi = min(p0 - 1 - ci, p0 - 1 - cj)
    if extent > min(lo, hi):
        raise ValueError(
            f"{shape} of scale {scale} does not fit in a {p0} x {p0} grid at {center}"
        )
    if not mask.any():
        raise ValueError(f"{shape} of scale {scale} has empty support on a {p0} grid")
    return mask


def generate_true_signal(cfg):
    """Per-task coefficient images and their wavelet coefficients.

    Returns (beta_images, eta0) with shapes (M, p0, p0) and (M, p).
    """
    p0 = cfg.p0
    mid = (p0 // 2, p0 // 2)
    if cfg.overlap == "homogeneous":
        placements = [(mid, 1.0)] * cfg.M
    elif cfg.overlap == "partial":
        placements = [(mid, TASK_SCALES[m % len(TASK_SCALES)]) for m in range(cfg.M)]
    else:  # minimal: disjoint supports at spread-out centers
        anchors = [
            (p0 // 4, p0 // 4),
            (p0 // 4, 3 * p0 // 4),
            (3 * p0 // 4, p0 // 2),
            (3 * p0 // 4, p0 // 4),
            (3 * p0 // 4, 3 * p0 // 4),
        ]
        if cfg.M > len(anchors):
            raise ValueError("minimal overlap supports at most 5 tasks")
        placements = [
            (anchors[m], TASK_SCALES[m % len(TASK_SCALES)]) for m in range(cfg.M)
        ]
    betas = np.zeros((cfg.M, p0, p0))
    for m, (center, scale) in enumerate(placements):
        betas[m] = SIGNAL_HEIGHT * _shape_mask(cfg.shape, p0, center, scale)
    if cfg.overlap == "minimal":
        for a in range(cfg.M):
            for b in range(a + 1, cfg.M):
                if np.any((betas[a] != 0) & (betas[b] != 0)):
                    raise ValueError("minimal-overlap supports intersect; shrink shapes")
    eta0 = transform_images(betas, cfg.wavelet_spec)
    return betas, eta0


def generate_images(cfg, n, rng, linked=None):
    """True images via unit-variance wavelet coefficients.

    Returns (coeffs, images) of shapes (M, n, p) and (M, n, p0, p0).  In the
    linked scenario one image per subject is shared by all tasks.
    """
    spec = cfg.wavelet_spec
    if linked is None:
        linked = cfg.covariance_scenario == "unknown_linked"
    if linked:
        c = rng.normal(size=(n, spec.p))
        coeffs = np.broadcast_to(c, (cfg.M, n, spec.p)).copy()
    else:
        coeffs = rng.normal(size=(cfg.M, n, spec.p))
    images = np.stack([inverse_transform_rows(coeffs[m], spec) for m in range(cfg.M)])
    return coeffs, images


def add_noise(images, cfg, rng):
    """Additive noise with wavelet-domain variance 1/SNR, independent across
    tasks and subjects."""
    if math.isinf(cfg.snr):
        return images.copy()
    spec = cfg.wavelet_spec
    scale = math.sqrt(1.0 / cfg.snr)
    noisy = np.empty_like(images)
    for m in range(images.shape[0]):
        u = rng.normal(scale=scale, size=(images.shape[1], spec.p))
        noisy[m] = images[m] + inverse_transform_rows(u, spec)
    return noisy


def generate_outcome(coeffs, eta0, cfg, rng):
    """Outcomes from the noiseless images: mean plus Gaussian residual with
    Var(mean) / Var(residual) = mean_ratio."""
    M, n, _ = coeffs.shape
    y = np.empty((M, n))
    for m in range(M):
        mean = coeffs[m] @ eta0[m]
        var_mean = float(mean.var())
        if var_mean <= 0:
            raise ValueError("mean term has zero variance (is the signal empty?)")
        sigma = math.sqrt(var_mean / cfg.mean_ratio)
        y[m] = mean + rng.normal(scale=sigma, size=n)
    return y


def known_noise_covariance(cfg):
    """The exact wavelet-domain noise covariance of :func:`add_noise`."""
    p = cfg.wavelet_spec.p
    if math.isinf(cfg.snr):
        cov = zero_covariance(p)
    else:
        cov = scaled_identity(p, 1.0 / cfg.snr)
    cov.domain = "wavelet"
    return cov


def _replicate_rng(cfg, rep, stream):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(rep, stream))
    )


def _single_task_design(design, m):
    return DesignMatrices(
        W=[design.W[m]],
        y_centered=[design.y_centered[m]],
        y_means=design.y_means[m : m + 1],
        task_ids=[design.task_ids[m]],
        spec=design.spec,
        y_raw=[design.y_raw[m]] if design.y_raw else [],
    )


def _fit_method(name, design, sigma_wav, cfg, solver_cfg, seed):
    """CV fit of one method; returns the (M, p) coefficient estimate."""
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}")
    corrected = name.startswith("p_")
    base = name[2:] if corrected else name
    kind = {"glasso": GROUP_LASSO_Q2, "gbridge": GROUP_BRIDGE, "lasso": LASSO_L1}[base]
    sigma = sigma_wav if corrected else None
    eta = np.zeros((design.M, design.p))
    if kind == LASSO_L1:
        for m in range(design.M):
            sub = _single_task_design(design, m)
            grid = lambda_grid(
                corrected_moments(sub, sigma), kind, cfg.n_lambdas, cfg.lambda_min_ratio
            )
            res = cross_validate(
                sub, sigma, kind, grid, folds=cfg.cv_folds, cfg=solver_cfg,
                seed=seed + m,
            )
            eta[m] = res.fit.eta[0]
    else:
        grid = lambda_grid(
            corrected_moments(design, sigma), kind, cfg.n_lambdas, cfg.lambda_min_ratio
        )
        res = cross_validate(
            design, sigma, kind, grid, folds=cfg.cv_folds, cfg=solver_cfg, seed=seed
        )
        eta = res.fit.eta
    return eta


def run_replicate(cfg, methods, rep, solver_cfg=None):
    """One seeded replicate: generate, fit each method, evaluate.

    Returns (rows, beta_hats, errors) where rows are
    (replicate, method, task, pmse, bias, auc) tuples and beta_hats maps
    method -> (M, p0, p0) reconstructed coefficient images.
    """
    solver_cfg = solver_cfg or SolverConfig()
    spec = cfg.wavelet_spec
    betas, eta0 = generate_true_signal(cfg)
    masks = betas != 0

    rng = _replicate_rng(cfg, rep, 0)
    c_train, x_train = generate_images(cfg, cfg.n_train, rng)
    z_train = add_noise(x_train, cfg, rng)
    y_train = generate_outcome(c_train, eta0, cfg, rng)
    c_test, x_test = generate_images(cfg, cfg.n_test, rng)
    z_test = add_noise(x_test, cfg, rng)
    y_test = generate_outcome(c_test, eta0, cfg, rng)

    if cfg.covariance_scenario == "known":
        sigma_wav = known_noise_covariance(cfg)
    else:
        # held-out controls: shared truth, task-specific noise; used only here
        c_ctrl, x_ctrl = generate_images(cfg, cfg.n_controls, rng, linked=True)
        z_ctrl = add_noise(x_ctrl, cfg, rng)
        Z = [z_ctrl[m].reshape(cfg.n_controls, -1) for m in range(cfg.M)]
        sigma_wav = to_wavelet_domain(estimate_replicates(Z), spec)

    ds = MultiTaskDataset(
        [TaskData(m, y_train[m], z_train[m]) for m in range(cfg.M)], spec
    )
    design = build_design(ds)
    W_test = [transform_images(z_test[m], spec) for m in range(cfg.M)]
    var_train = [float(np.var(y_train[m], ddof=1)) for m in range(cfg.M)]

    rows, beta_hats, errors = [], {}, []
    for k, name in enumerate(methods):
        try:
            eta_hat = _fit_method(
                name, design, sigma_wav, cfg, solver_cfg, seed=1000 * rep + 10 * k
            )
        except NumericalError as exc:
            errors.append((rep, name, str(exc)))
            for m in range(cfg.M):
                rows.append((rep, name, m, math.nan, math.nan, math.nan))
            continue
        bh = np.stack([reconstruct_beta(eta_hat[m], spec) for m in range(cfg.M)])
        beta_hats[name] = bh
        for m in range(cfg.M):
            pred = design.y_means[m] + W_test[m] @ eta_hat[m]
            rows.append(
                (
                    rep,
                    name,
                    m,
                    pmse(pred, y_test[m], var_train[m]),
                    coefficient_bias(bh[m], betas[m]),
                    support_auc(bh[m], masks[m]),
                )
            )
    return rows, beta_hats, errors


def run_scenario(cfg, methods, replicates, threads=1, solver_cfg=None):
    """Run seeded replicates (optionally in parallel) and pool the results.

    Returns (rows, mean_betas, errors); rows are ordered by replicate,
    then method, then task, so output files are byte-stable.
    """
    if not methods:
        raise ValueError("methods list is empty")
    for name in methods:
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}")
    reps = list(range(replicates))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(_worker, [(cfg, tuple(methods), r, solver_cfg) for r in reps])
            )
    else:
        results = [run_replicate(cfg, methods, r, solver_cfg) for r in reps]
    rows, errors = [], []
    sums = {name: None for name in methods}
    counts = {name: 0 for name in methods}
    for rep_rows, beta_hats, rep_errors in results:
        rows.extend(rep_rows)
        errors.extend(rep_errors)
        for name, bh in beta_hats.items():
            sums[name] = bh if sums[name] is None else sums[name] + bh
            counts[name] += 1
    mean_betas = {
        name: sums[name] / counts[name] for name in methods if counts[name] > 0
    }
    return rows, mean_betas, errors


def _worker(args):
    cfg, methods, rep, solver_cfg = args
    return run_replicate(cfg, list(methods), rep, solver_cfg)


METRICS_HEADER = ("replicate", "method", "task", "pmse", "bias", "auc")


def write_metrics_csv(rows, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for rep, method, task, v_pmse, v_bias, v_auc in rows:
            writer.writerow([rep, method, task, repr(v_pmse), repr(v_bias), repr(v_auc)])
    os.replace(tmp, path)


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        for rec in reader:
            rows.append(
                (int(rec[0]), rec[1], int(rec[2]), float(rec[3]), float(rec[4]), float(rec[5]))
            )
    return rows


def write_coef_images(mean_betas, out_dir):
    for name, stack in mean_betas.items():
        for m in range(stack.shape[0]):
            path = os.path.join(out_dir, f"coef_{name}_{m}.csv")
            np.savetxt(path, stack[m], delimiter=",", fmt="%.17g")


def aggregate(rows):
    """Mean and sd of each metric per (method, task)."""
    keys = sorted({(r[1], r[2]) for r in rows}, key=lambda k: (k[0], k[1]))
    out = {}
    for method, task in keys:
        sel = [r for r in rows if r[1] == method and r[2] == task]
        vals = np.array([[r[3], r[4], r[5]] for r in sel], dtype=float)
        ok = vals[np.all(np.isfinite(vals), axis=1)]
        if ok.size == 0:
            out[(method, task)] = None
            continue
        out[(method, task)] = {
            "pmse": (float(ok[:, 0].mean()), float(ok[:, 0].std(ddof=1)) if len(ok) > 1 else 0.0),
            "bias": (float(ok[:, 1].mean()), float(ok[:, 1].std(ddof=1)) if len(ok) > 1 else 0.0),
            "auc": (float(ok[:, 2].mean()), float(ok[:, 2].std(ddof=1)) if len(ok) > 1 else 0.0),
            "replicates": int(len(ok)),
        }
    return out
