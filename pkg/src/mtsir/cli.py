"""Command-line entry point.

Subcommands: simulate, fit, predict, evaluate, estimate-noise, cv,
diagnose.  Every run writes a manifest.json into its output directory
with the fully resolved configuration, so any run can be replayed to
identical bytes.  Exit codes: 0 success, 2 usage or configuration error,
3 numerical failure.
"""

import argparse
import datetime
import json
import math
import os
import sys

import numpy as np

from . import __version__, metrics, sim
from .data import DatasetFormatError, build_design, load_dataset
from .moments import check_deviation, corrected_moments, error_bound, re_diagnostic
from .noise import (
    check_sample_size,
    estimate_direct,
    estimate_replicates,
    load_covariance,
    save_covariance,
    to_wavelet_domain,
    zero_covariance,
)
from .penalty import GROUP_BRIDGE, GROUP_LASSO_Q2, LASSO_L1, PenaltySpec
from .solver import (
    NumericalError,
    SolverConfig,
    auto_radius,
    convergence_trace_check,
    cross_validate,
    fit as solve,
    fit_uncorrected,
    lambda_grid,
    load_fit,
    save_fit,
)

MANIFEST_VERSION = 1
PENALTY_NAMES = {"glasso": GROUP_LASSO_Q2, "gbridge": GROUP_BRIDGE, "lasso": LASSO_L1}


class ConfigError(ValueError):
    pass


def _atomic_write(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir, subcommand, resolved, outputs, started):
    manifest = {
        "format_version": MANIFEST_VERSION,
        "tool": "mtsir",
        "version": __version__,
        "subcommand": subcommand,
        "resolved": resolved,
        "outputs": sorted(outputs),
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _atomic_write(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}")


def _load_wavelet_cov(path, spec):
    cov = load_covariance(path)
    if cov.domain == "image":
        cov = to_wavelet_domain(cov, spec)
    elif cov.p != spec.p:
        raise ConfigError(f"covariance dimension {cov.p} does not match dataset p {spec.p}")
    return cov


def cmd_simulate(args):
    started = _now()
    raw = _load_json(args.config)
    if "resolved" in raw and raw.get("subcommand") == "simulate":
        raw = raw["resolved"]  # replaying a manifest
    methods = raw.pop("methods", None) or (args.methods.split(",") if args.methods else None)
    replicates = raw.pop("replicates", None) or args.replicates
    if methods is None:
        raise ConfigError("no methods given (config key 'methods' or --methods)")
    if replicates is None:
        raise ConfigError("no replicate count given (config key 'replicates' or --replicates)")
    for name in methods:
        if name not in sim.METHODS:
            raise ConfigError(f"unknown method {name!r}; choose from {sim.METHODS}")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = sim.ScenarioConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario config: {exc}")
    os.makedirs(args.out, exist_ok=True)
    rows, mean_betas, errors = sim.run_scenario(
        cfg, methods, int(replicates), threads=args.threads
    )
    sim.write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    sim.write_coef_images(mean_betas, args.out)
    betas, _ = sim.generate_true_signal(cfg)
    _write_signals(betas, os.path.join(args.out, "truth"))
    agg = sim.aggregate(rows)
    _write_aggregate_csv(agg, os.path.join(args.out, "aggregate.csv"))
    outputs = sorted(os.listdir(args.out))
    resolved = dict(cfg.to_dict(), methods=list(methods), replicates=int(replicates))
    _write_manifest(args.out, "simulate", resolved, outputs, started)
    for (method, task), stats in agg.items():
        if stats is None:
            print(f"{method} task {task}: all replicates failed")
            continue
        print(
            f"{method} task {task}: pmse {stats['pmse'][0]:.3f}+-{stats['pmse'][1]:.3f} "
            f"bias {stats['bias'][0]:.3f} auc {stats['auc'][0]:.3f}"
        )
    if errors:
        print(f"{len(errors)} replicate fits failed (recorded as NaN)", file=sys.stderr)
    return 0


def _write_signals(betas, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    man = {
        "format_version": 1,
        "kind": "signals",
        "M": int(betas.shape[0]),
        "image_side": int(betas.shape[1]),
        "endianness": "little",
        "dtype": "float64",
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(man, indent=2) + "\n")
    for m in range(betas.shape[0]):
        with open(os.path.join(out_dir, f"beta_{m}.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(betas[m], dtype="<f8").tobytes())


def _read_signals(path):
    man = _load_json(os.path.join(path, "manifest.json"))
    side = int(man["image_side"])
    betas = []
    for m in range(int(man["M"])):
        raw = open(os.path.join(path, f"beta_{m}.bin"), "rb").read()
        betas.append(np.frombuffer(raw, dtype="<f8").reshape(side, side).copy())
    return np.stack(betas)


def _write_aggregate_csv(agg, path):
    lines = ["method,task,pmse_mean,pmse_sd,bias_mean,bias_sd,auc_mean,auc_sd,replicates"]
    for (method, task), stats in agg.items():
        if stats is None:
            lines.append(f"{method},{task},nan,nan,nan,nan,nan,nan,0")
            continue
        lines.append(
            f"{method},{task},{stats['pmse'][0]!r},{stats['pmse'][1]!r},"
            f"{stats['bias'][0]!r},{stats['bias'][1]!r},"
            f"{stats['auc'][0]!r},{stats['auc'][1]!r},{stats['replicates']}"
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def _resolve_penalty(args):
    if args.penalty not in PENALTY_NAMES:
        raise ConfigError(f"unknown penalty {args.penalty!r}")
    return PENALTY_NAMES[args.penalty]


def _fit_common(args, force_cv):
    started = _now()
    ds = load_dataset(args.dataset)
    design = build_design(ds)
    kind = _resolve_penalty(args)
    if args.assume_noiseless:
        sigma = None
    elif args.noise_cov:
        sigma = _load_wavelet_cov(args.noise_cov, ds.spec)
        msg = check_sample_size(sigma, max(design.n))
        if msg:
            print(f"warning: {msg}", file=sys.stderr)
    else:
        raise ConfigError(
            "a noise covariance is required: pass --noise-cov DIR or make the "
            "noiseless assumption explicit with --assume-noiseless"
        )
    cfg = SolverConfig()
    os.makedirs(args.out, exist_ok=True)
    cv_result = None
    if args.lam is not None and not force_cv:
        mom = corrected_moments(design, sigma)
        warm = None
        if args.radius is not None:
            radius = args.radius
        elif sigma is None or sigma.is_zero:
            radius = math.inf
        else:
            unc = fit_uncorrected(design, PenaltySpec(kind, args.lam), cfg)
            radius = auto_radius(kind, unc.eta)
            warm = unc.eta
        result = solve(mom, PenaltySpec(kind, args.lam, radius=radius), cfg, eta0=warm)
        best_lambda = args.lam
    else:
        mom = corrected_moments(design, sigma)
        grid = lambda_grid(mom, kind, args.n_lambdas, args.lambda_min_ratio)
        cv_result = cross_validate(
            design, sigma, kind, grid, folds=args.folds, cfg=cfg,
            seed=args.seed or 0, radius=args.radius,
        )
        result = cv_result.fit
        best_lambda = cv_result.best_lambda
        radius = cv_result.radius
    extra = {
        "penalty": args.penalty,
        "dataset": os.path.abspath(args.dataset),
        "noise_cov": os.path.abspath(args.noise_cov) if args.noise_cov else None,
        "assume_noiseless": bool(args.assume_noiseless),
        "task_ids": design.task_ids,
        "y_means": [float(v) for v in design.y_means],
        "wavelet": {"family": ds.spec.family, "j0": ds.spec.j0, "p0": ds.spec.p0},
        "seed": args.seed,
    }
    save_fit(result, args.out, extra=extra)
    for m in range(design.M):
        beta = metrics.reconstruct_beta(result.eta[m], ds.spec)
        metrics.write_pgm16(beta, os.path.join(args.out, f"beta_{design.task_ids[m]}.pgm"))
    if cv_result is not None:
        lines = ["fold,lambda,score"]
        lines += [f"{f},{lam!r},{score!r}" for f, lam, score in cv_result.table]
        _atomic_write(os.path.join(args.out, "cv_table.csv"), "\n".join(lines) + "\n")
    resolved = {
        "dataset": os.path.abspath(args.dataset),
        "penalty": args.penalty,
        "lambda": best_lambda,
        "radius": None if math.isinf(radius) else radius,
        "folds": args.folds,
        "n_lambdas": args.n_lambdas,
        "lambda_min_ratio": args.lambda_min_ratio,
        "assume_noiseless": bool(args.assume_noiseless),
        "noise_cov": os.path.abspath(args.noise_cov) if args.noise_cov else None,
        "seed": args.seed,
    }
    _write_manifest(args.out, "cv" if force_cv else "fit", resolved, os.listdir(args.out), started)
    print(
        f"penalty {args.penalty}: lambda {best_lambda:.6g}, "
        f"{result.iterations} iterations, converged {result.converged}"
    )
    return 0


def cmd_fit(args):
    return _fit_common(args, force_cv=False)


def cmd_cv(args):
    return _fit_common(args, force_cv=True)


def cmd_predict(args):
    started = _now()
    ds = load_dataset(args.dataset)
    design = build_design(ds)
    eta, info = load_fit(args.fit)
    if eta.shape[1] != design.p:
        raise ConfigError("fit and dataset disagree on the coefficient dimension")
    os.makedirs(args.out, exist_ok=True)
    means = info.get("y_means")
    for m, task_id in enumerate(design.task_ids):
        mu = means[m] if means else design.y_means[m]
        pred = mu + design.W[m] @ eta[m]
        np.savetxt(os.path.join(args.out, f"pred_{task_id}.csv"), pred, fmt="%.17g")
    _write_manifest(
        args.out, "predict",
        {"fit": os.path.abspath(args.fit), "dataset": os.path.abspath(args.dataset)},
        os.listdir(args.out), started,
    )
    return 0


def cmd_evaluate(args):
    started = _now()
    ds = load_dataset(args.dataset)
    design = build_design(ds)
    eta, info = load_fit(args.fit)
    betas = _read_signals(args.signals) if args.signals else None
    os.makedirs(args.out, exist_ok=True)
    lines = ["task,pmse,bias,auc"]
    means = info.get("y_means")
    for m, task_id in enumerate(design.task_ids):
        mu = means[m] if means else design.y_means[m]
        pred = mu + design.W[m] @ eta[m]
        y = design.y_centered[m] + design.y_means[m]
        v_pmse = metrics.pmse(pred, y, float(np.var(y, ddof=1)))
        if betas is not None:
            bh = metrics.reconstruct_beta(eta[m], ds.spec)
            v_bias = metrics.coefficient_bias(bh, betas[m])
            v_auc = metrics.support_auc(bh, betas[m] != 0)
            lines.append(f"{task_id},{v_pmse!r},{v_bias!r},{v_auc!r}")
        else:
            lines.append(f"{task_id},{v_pmse!r},,")
    _atomic_write(os.path.join(args.out, "evaluate.csv"), "\n".join(lines) + "\n")
    _write_manifest(
        args.out, "evaluate",
        {
            "fit": os.path.abspath(args.fit),
            "dataset": os.path.abspath(args.dataset),
            "signals": os.path.abspath(args.signals) if args.signals else None,
        },
        os.listdir(args.out), started,
    )
    print("\n".join(lines))
    return 0


def cmd_estimate_noise(args):
    started = _now()
    ds = load_dataset(args.replicates_dir)
    os.makedirs(args.out, exist_ok=True)
    if args.mode == "replicates":
        if ds.M < 2:
            raise ConfigError("replicate mode needs at least 2 replicate groups (tasks)")
        shapes = {t.images.shape for t in ds.tasks}
        if len(shapes) != 1:
            raise ConfigError("replicate groups must have identical shapes")
        Z = [t.images.reshape(t.n, -1) for t in ds.tasks]
        cov = estimate_replicates(Z)
    else:
        t = ds.tasks[0]
        cov = estimate_direct(t.images.reshape(t.n, -1))
    if args.n_train is not None:
        msg = check_sample_size(cov, args.n_train)
        if msg:
            print(f"warning: {msg}", file=sys.stderr)
    save_covariance(cov, args.out)
    _write_manifest(
        args.out, "estimate-noise",
        {
            "replicates_dir": os.path.abspath(args.replicates_dir),
            "mode": args.mode,
            "n_train": args.n_train,
            "effective_size": cov.denom,
        },
        os.listdir(args.out), started,
    )
    print(f"{cov.mode} covariance, p={cov.p}, effective validation size {cov.denom}")
    return 0


def cmd_diagnose(args):
    started = _now()
    ds = load_dataset(args.dataset)
    design = build_design(ds)
    spec = ds.spec
    if args.assume_noiseless:
        sigma = zero_covariance(spec.p)
    elif args.noise_cov:
        sigma = _load_wavelet_cov(args.noise_cov, spec)
    else:
        raise ConfigError("pass --noise-cov DIR or --assume-noiseless")
    os.makedirs(args.out, exist_ok=True)
    notices = []

    dev_rows, phi_hat = [], math.nan
    if args.dev_replicates > 0:
        snr = 1.0 / sigma.scale if sigma.mode == "scaled_identity" and sigma.scale > 0 else math.inf
        gen = sim.ScenarioConfig(
            M=1, n_train=8, n_test=8, p0=spec.p0, family=spec.family, j0=spec.j0,
            shape="round", overlap="homogeneous", snr=snr, seed=args.seed or 0,
        )
        table = check_deviation(
            [int(x) for x in args.dev_n_grid.split(",")], gen,
            replicates=args.dev_replicates, seed=args.seed or 0,
        )
        dev_rows = table.means()
        phi_hat = table.calibrate_phi(spec.p)
        slope_g, slope_G = table.slopes()
        notices.append(f"deviation slopes: gamma {slope_g:.3f}, Gamma {slope_G:.3f}")
    else:
        notices.append("deviation section skipped (--dev-replicates 0)")

    n_eff = min(design.n)
    tau = phi_hat * math.log(spec.p) / n_eff if math.isfinite(phi_hat) else 0.0
    mom = corrected_moments(design, sigma, dense_threshold=0)
    diag = re_diagnostic(mom, tau=tau, draws=args.re_draws, seed=args.seed or 0)
    diag.phi_hat = phi_hat

    bound_l1 = bound_l2 = ""
    if args.eta_ref:
        eta_ref, _ = load_fit(args.eta_ref)
        from .moments import reference_constants

        ref = reference_constants(eta_ref, R=auto_radius(GROUP_LASSO_Q2, eta_ref))
        diag.k, diag.l, diag.h1, diag.h2 = ref["k"], ref["l"], ref["h1"], ref["h2"]
        if diag.alpha1 > 0 and math.isfinite(phi_hat) and diag.k > 0:
            rate = phi_hat * math.sqrt(math.log(spec.p) / n_eff)
            lam = 2.0 * rate * diag.M ** 0.5
            try:
                l1b, l2b = error_bound(diag, lam, n_eff, spec.p, GROUP_LASSO_Q2)
                bound_l1, bound_l2 = repr(l1b), repr(l2b)
            except ValueError as exc:
                notices.append(f"error-bound section skipped: {exc}")
        else:
            notices.append("error-bound section skipped (needs alpha1 > 0 and calibrated phi)")
    else:
        notices.append("error-bound section skipped (no --eta-ref)")

    lines = ["n,deviation_gamma,deviation_Gamma,alpha1,alpha2,bound_L1,bound_L2"]
    if dev_rows:
        for n, dg, dG in dev_rows:
            lines.append(f"{n},{dg!r},{dG!r},{diag.alpha1!r},{diag.alpha2!r},{bound_l1},{bound_l2}")
    else:
        lines.append(f"{n_eff},,,{diag.alpha1!r},{diag.alpha2!r},{bound_l1},{bound_l2}")
    _atomic_write(os.path.join(args.out, "diagnostics.csv"), "\n".join(lines) + "\n")
    _write_manifest(
        args.out, "diagnose",
        {
            "dataset": os.path.abspath(args.dataset),
            "noise_cov": os.path.abspath(args.noise_cov) if args.noise_cov else None,
            "assume_noiseless": bool(args.assume_noiseless),
            "dev_n_grid": args.dev_n_grid,
            "dev_replicates": args.dev_replicates,
            "re_draws": args.re_draws,
            "seed": args.seed,
            "alpha1": diag.alpha1,
            "alpha2": diag.alpha2,
            "tau": tau,
            "phi_hat": None if math.isnan(phi_hat) else phi_hat,
        },
        os.listdir(args.out), started,
    )
    print(f"alpha1 {diag.alpha1:.6g} (positive: {diag.alpha1 > 0}), alpha2 {diag.alpha2:.6g}")
    for note in notices:
        print(note)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mtsir",
        description="Joint scalar-on-image regression with image-noise correction",
    )
    parser.add_argument("--version", action="version", version=f"mtsir {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="run a simulation scenario")
    p.add_argument("--config", required=True, help="scenario JSON (or a simulate manifest)")
    p.add_argument("--methods", default=None, help="comma-separated method names")
    p.add_argument("--replicates", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_simulate)

    def fit_args(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--penalty", required=True, choices=sorted(PENALTY_NAMES))
        p.add_argument("--noise-cov", default=None)
        p.add_argument("--assume-noiseless", action="store_true")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--radius", type=float, default=None)
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--n-lambdas", type=int, default=20)
        p.add_argument("--lambda-min-ratio", type=float, default=1e-3)
        common(p)

    p = sub.add_parser("fit", help="fit one penalized model (CV unless --lambda)")
    fit_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="cross-validate lambda and refit")
    fit_args(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="predict outcomes for a dataset from a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a fit against a dataset")
    p.add_argument("--fit", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--signals", default=None, help="true-signal dir for bias/AUC")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("estimate-noise", help="estimate the noise covariance")
    p.add_argument("--replicates-dir", required=True, help="dataset dir of replicate groups")
    p.add_argument("--mode", choices=("replicates", "direct"), default="replicates")
    p.add_argument("--n-train", type=int, default=None, help="training size for the validity check")
    common(p)
    p.set_defaults(func=cmd_estimate_noise)

    p = sub.add_parser("diagnose", help="deviation / RE / bound diagnostics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise-cov", default=None)
    p.add_argument("--assume-noiseless", action="store_true")
    p.add_argument("--eta-ref", default=None, help="fit dir used as the reference estimate")
    p.add_argument("--dev-n-grid", default="100,400,1600")
    p.add_argument("--dev-replicates", type=int, default=20)
    p.add_argument("--re-draws", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
