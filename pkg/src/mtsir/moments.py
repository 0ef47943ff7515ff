"""Corrected-moment surrogates, the quadratic loss they define, and
empirical diagnostics for the deviation and restricted-eigenvalue
conditions the error bounds rest on.

Per task m the surrogates are Gamma_m = W_m^T W_m / n_m - Sigma_wav and
gamma_m = W_m^T y_m / n_m, where Sigma_wav is the wavelet-domain noise
covariance.  Gamma_m is kept implicit (two matrix-vector products through
W_m) unless p is small enough that a dense matrix is cheaper.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseCovariance, zero_covariance

DENSE_P_MAX = 512  # build dense Gram matrices only below this dimension


class CorrectedMoments:
    """Per-task surrogate pair (Gamma_m, gamma_m) applied as operators."""

    def __init__(self, W, y, sigma_wav=None, dense_threshold=DENSE_P_MAX):
        self.W = [np.asarray(w, dtype=float) for w in W]
        self.p = self.W[0].shape[1]
        if any(w.shape[1] != self.p for w in self.W):
            raise ValueError("design matrices must share the coefficient dimension")
        self.n = [w.shape[0] for w in self.W]
        self.M = len(self.W)
        if sigma_wav is None:
            sigma_wav = zero_covariance(self.p)
        if sigma_wav.p != self.p:
            raise ValueError(
                f"noise covariance dimension {sigma_wav.p} does not match p = {self.p}"
            )
        self.sigma = sigma_wav
        self.gammas = np.empty((self.M, self.p))
        for m, (w, ym) in enumerate(zip(self.W, y)):
            ym = np.asarray(ym, dtype=float)
            if ym.shape != (self.n[m],):
                raise ValueError(f"task {m}: outcome length does not match design rows")
            self.gammas[m] = w.T @ ym / self.n[m]
        self._dense = None
        if self.p <= dense_threshold:
            sig = self.sigma.to_dense()
            self._dense = [w.T @ w / n - sig for w, n in zip(self.W, self.n)]
        self._spectral = None

    @classmethod
    def from_design(cls, design, sigma_wav=None, dense_threshold=DENSE_P_MAX):
        return cls(design.W, design.y_centered, sigma_wav, dense_threshold)

    @classmethod
    def from_dense(cls, gamma_mats, gammas):
        """Build directly from explicit dense surrogates (tests, diagnostics)."""
        obj = cls.__new__(cls)
        obj._dense = [np.asarray(g, dtype=float) for g in gamma_mats]
        obj.gammas = np.asarray(gammas, dtype=float)
        obj.M = len(obj._dense)
        obj.p = obj._dense[0].shape[0]
        obj.n = [obj.p] * obj.M
        obj.W = None
        obj.sigma = zero_covariance(obj.p)
        obj._spectral = None
        return obj

    def matvec(self, m, v):
        """Gamma_m v."""
        if self._dense is not None:
            return self._dense[m] @ v
        w = self.W[m]
        return w.T @ (w @ v) / self.n[m] - self.sigma.matvec(v)

    def quad(self, m, v):
        """v^T Gamma_m v."""
        if self._dense is not None:
            return float(v @ (self._dense[m] @ v))
        z = self.W[m] @ v
        return float(z @ z) / self.n[m] - self.sigma.quad(v)

    def dense(self, m):
        if self._dense is not None:
            return self._dense[m].copy()
        w = self.W[m]
        return w.T @ w / self.n[m] - self.sigma.to_dense()

    def spectral_bound(self):
        """Estimate of max_m ||Gamma_m||_2 by power iteration (cached)."""
        if self._spectral is None:
            best = 0.0
            for m in range(self.M):
                v = np.ones(self.p) / math.sqrt(self.p)
                lam = 1.0
                for _ in range(25):
                    z = self.matvec(m, v)
                    lam = np.linalg.norm(z)
                    if lam <= 1e-300:
                        break
                    v = z / lam
                best = max(best, lam)
            self._spectral = max(best, 1e-12)
        return self._spectral


def corrected_moments(design, sigma_wav=None, dense_threshold=DENSE_P_MAX):
    """Surrogates Gamma_m = W_m^T W_m / n - Sigma_wav, gamma_m = W_m^T y_m / n."""
    return CorrectedMoments.from_design(design, sigma_wav, dense_threshold)


def loss_value(eta, mom):
    """Corrected quadratic loss, summed over tasks."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if eta.shape != (mom.M, mom.p):
        raise ValueError(f"expected coefficients of shape ({mom.M}, {mom.p})")
    total = 0.0
    for m in range(mom.M):
        total += 0.5 * mom.quad(m, eta[m]) - float(mom.gammas[m] @ eta[m])
    return total


def loss_gradient(eta, mom):
    """Row m of the gradient is Gamma_m eta_m - gamma_m."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if eta.shape != (mom.M, mom.p):
        raise ValueError(f"expected coefficients of shape ({mom.M}, {mom.p})")
    g = np.empty_like(eta)
    for m in range(mom.M):
        g[m] = mom.matvec(m, eta[m]) - mom.gammas[m]
    return g


@dataclass
class TheoryDiagnostics:
    """Empirical curvature constants and the reference quantities entering
    the statistical error bounds.

    alpha1 <= alpha2 is guaranteed only at tau = 0; with tau > 0 the two
    empirical estimates carry opposite-signed slack terms and may cross.
    """

    alpha1: float
    alpha2: float
    tau: float
    M: int
    k: int = 0
    l: float = math.nan
    h1: float = math.nan
    h2: float = math.nan
    phi_hat: float = math.nan

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.tau == 0 and self.alpha1 > self.alpha2 + 1e-12:
            raise ValueError("alpha1 cannot exceed alpha2 at tau = 0")


def reference_constants(eta0, R, q=2.0):
    """Group sparsity k, smallest active group scale l, and the bound
    multipliers h1 = 1 + 3 R / l and h2 = 1 + 3 M^((q-1)/q)."""
    eta0 = np.atleast_2d(np.asarray(eta0, dtype=float))
    M = eta0.shape[0]
    group_l1 = np.abs(eta0).sum(axis=0)
    active = group_l1 > 0
    k = int(active.sum())
    l = float(np.sqrt(group_l1[active].min())) if k else math.nan
    h1 = 1.0 + 3.0 * R / l if k else math.nan
    h2 = 1.0 + 3.0 * M ** ((q - 1.0) / q)
    return {"k": k, "l": l, "h1": h1, "h2": h2, "M": M}


def re_diagnostic(
    mom, tau, sparsity_levels=(1, 4, 16), draws=200, seed=0, eta0=None, R=None, q=2.0
):
    """Empirical lower/upper restricted-eigenvalue curvatures.

    Random unit vectors theta at each tested sparsity probe
    theta' Gamma theta; alpha1 is the minimum of the quadratic form plus
    tau ||theta||_1^2, alpha2 the maximum minus the same slack, across all
    tasks.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = np.random.default_rng(seed)
    alpha1 = math.inf
    alpha2 = -math.inf
    for s in sparsity_levels:
        s = int(min(s, mom.p))
        for _ in range(draws):
            theta = np.zeros(mom.p)
            support = rng.choice(mom.p, size=s, replace=False)
            vals = rng.normal(size=s)
            theta[support] = vals / np.linalg.norm(vals)
            l1sq = float(np.abs(theta).sum()) ** 2
            for m in range(mom.M):
                form = mom.quad(m, theta)
                alpha1 = min(alpha1, form + tau * l1sq)
                alpha2 = max(alpha2, form - tau * l1sq)
    extras = {}
    if eta0 is not None:
        if R is None:
            raise ValueError("R is required alongside eta0")
        extras = reference_constants(eta0, R, q)
        extras.pop("M")
    return TheoryDiagnostics(alpha1=alpha1, alpha2=alpha2, tau=tau, M=mom.M, **extras)


def error_bound(diag, lam, n, p, kind, q=2.0, phi=None):
    """Evaluate the L1/L2 statistical error bounds for diagnostics.

    ``kind`` is "group_bridge" or "group_lasso_q2".  The returned values
    use the empirically calibrated deviation constant and are indicative
    only: the theory's universal constants are unknown.
    """
    if diag.alpha1 <= 0:
        raise ValueError("degenerate curvature: empirical alpha1 <= 0")
    phi = diag.phi_hat if phi is None else phi
    if not math.isfinite(phi):
        raise ValueError("deviation constant phi is not calibrated")
    rate = phi * math.sqrt(math.log(p) / n)
    Mk = diag.M * diag.k
    if kind == "group_bridge":
        R = (diag.h1 - 1.0) * diag.l / 3.0
        floor = 2.0 * rate * max(diag.l, R)
        if lam < floor:
            raise ValueError(f"lambda {lam} below theorem floor {floor}")
        factor = max(rate, lam / diag.l)
        l2 = 8.0 * diag.h1 * math.sqrt(Mk) / diag.alpha1 * factor
        l1 = 8.0 * diag.h1**2 * Mk / diag.alpha1 * factor
    elif kind == "group_lasso_q2":
        floor = 2.0 * rate * diag.M ** ((q - 1.0) / q)
        if lam < floor:
            raise ValueError(f"lambda {lam} below theorem floor {floor}")
        factor = max(rate, lam)
        l2 = 8.0 * diag.h2 * math.sqrt(Mk) / diag.alpha1 * factor
        l1 = 8.0 * diag.h2**2 * Mk / diag.alpha1 * factor
    else:
        raise ValueError(f"no error bound for penalty kind {kind!r}")
    return l1, l2


@dataclass
class DeviationTable:
    """Monte-Carlo sup-norm deviations of the surrogates from their targets."""

    rows: list = field(default_factory=list)  # (n, replicate, dev_gamma, dev_Gamma)

    def means(self):
        ns = sorted({r[0] for r in self.rows})
        out = []
        for n in ns:
            sel = [r for r in self.rows if r[0] == n]
            out.append(
                (n, float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel])))
            )
        return out

    def slopes(self):
        """Fitted slopes of log mean deviation against log n."""
        means = self.means()
        logn = np.log([m[0] for m in means])
        sg = np.polyfit(logn, np.log([m[1] for m in means]), 1)[0]
        sG = np.polyfit(logn, np.log([m[2] for m in means]), 1)[0]
        return float(sg), float(sG)

    def calibrate_phi(self, p):
        """Largest observed deviation rescaled by sqrt(n / log p)."""
        return max(
            max(r[2], r[3]) * math.sqrt(r[0] / math.log(p)) for r in self.rows
        )


def check_deviation(n_grid, gen, replicates=50, seed=0, eta_scale=1.0):
    """Monte-Carlo check of the deviation condition.

    For each n, synthetic single-task data are drawn from the scenario
    generator ``gen`` (wavelet coefficients with unit variance, so the
    population target of gamma_hat is eta0 itself) and the sup norms
    ||gamma_hat - eta0|| and ||(Gamma_hat - I) eta0|| are recorded.
    """
    from . import sim  # deferred: sim depends on this module for fitting

    table = DeviationTable()
    eta0 = sim.generate_true_signal(gen)[1][0] * eta_scale
    sigma_wav = sim.known_noise_covariance(gen)
    snr = gen.snr
    base = np.random.SeedSequence(seed)
    for n in n_grid:
        for rep in range(replicates):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=base.entropy, spawn_key=(int(n), rep))
            )
            c = rng.normal(size=(int(n), eta0.size))
            w = c.copy()
            if math.isfinite(snr):
                w += rng.normal(scale=math.sqrt(1.0 / snr), size=c.shape)
            mean = c @ eta0
            var_mean = float(mean.var())
            y = mean + rng.normal(
                scale=math.sqrt(var_mean / gen.mean_ratio), size=mean.shape
            )
            gamma_hat = w.T @ y / n
            gram_eta = w.T @ (w @ eta0) / n
            dev_gamma = float(np.abs(gamma_hat - eta0).max())
            dev_Gamma = float(
                np.abs(gram_eta - sigma_wav.matvec(eta0) - eta0).max()
            )
            table.rows.append((int(n), rep, dev_gamma, dev_Gamma))
    return table
