"""Corrected-moments tests: algebraic loss identities, finite-difference
gradient oracle, operator symmetry, and the RE/bound diagnostics."""

import math

import numpy as np
import pytest

from mtsir.moments import (
    CorrectedMoments,
    TheoryDiagnostics,
    corrected_moments,
    error_bound,
    loss_gradient,
    loss_value,
    re_diagnostic,
    reference_constants,
)
from mtsir.data import MultiTaskDataset, TaskData, build_design
from mtsir.noise import scaled_identity, zero_covariance
from mtsir.wavelet import WaveletBasisSpec


def random_design(rng, M=2, n=12, p=10):
    W = [rng.normal(size=(n, p)) for _ in range(M)]
    y = [rng.normal(size=n) for _ in range(M)]
    return W, y


class TestConstruction:
    def test_zero_covariance_gram_is_psd(self):
        rng = np.random.default_rng(0)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y)
        for m in range(2):
            evals = np.linalg.eigvalsh(mom.dense(m))
            assert evals.min() > -1e-10

    def test_gamma_zero_outcome(self):
        rng = np.random.default_rng(1)
        W, _ = random_design(rng)
        mom = CorrectedMoments(W, [np.zeros(12), np.zeros(12)])
        assert np.all(mom.gammas == 0.0)

    def test_large_noise_creates_negative_eigenvalue(self):
        # n < p with a large subtracted covariance: smallest eigenvalue
        # found by power iteration on -Gamma (shifted), as an oracle.
        rng = np.random.default_rng(2)
        p0 = 8
        spec = WaveletBasisSpec("haar", j0=1, p0=p0)
        p = spec.p
        n = 10
        images = rng.normal(size=(n, p0, p0))
        ds = MultiTaskDataset([TaskData(0, rng.normal(size=n), images)], spec)
        design = build_design(ds)
        mom = corrected_moments(design, scaled_identity(p, 2.0, "known"))
        G = mom.dense(0)
        shift = np.abs(G).sum(axis=1).max()  # Gershgorin bound
        A = shift * np.eye(p) - G
        v = np.ones(p) / math.sqrt(p)
        for _ in range(500):
            z = A @ v
            v = z / np.linalg.norm(z)
        smallest = float(v @ (G @ v))
        assert smallest < -0.5
        assert np.linalg.eigvalsh(G).min() == pytest.approx(smallest, abs=1e-6)

    def test_implicit_and_dense_agree(self):
        rng = np.random.default_rng(3)
        W, y = random_design(rng, n=8, p=6)
        sig = scaled_identity(6, 0.3)
        dense = CorrectedMoments(W, y, sig, dense_threshold=512)
        implicit = CorrectedMoments(W, y, sig, dense_threshold=0)
        v = rng.normal(size=6)
        for m in range(2):
            assert np.allclose(dense.matvec(m, v), implicit.matvec(m, v), atol=1e-12)
            assert dense.quad(m, v) == pytest.approx(implicit.quad(m, v), abs=1e-12)

    def test_operator_symmetry_probes(self):
        rng = np.random.default_rng(4)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y, scaled_identity(10, 0.5), dense_threshold=0)
        for _ in range(10):
            u, v = rng.normal(size=(2, 10))
            assert float(u @ mom.matvec(0, v)) == pytest.approx(
                float(v @ mom.matvec(0, u)), abs=1e-8
            )


class TestLoss:
    def test_zero_coefficients(self):
        rng = np.random.default_rng(5)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y)
        assert loss_value(np.zeros((2, 10)), mom) == 0.0

    def test_identity_quadratic(self):
        p = 4
        gam = np.zeros((2, p))
        gam[:, 0] = 1.0
        mom = CorrectedMoments.from_dense([np.eye(p), np.eye(p)], gam)
        eta = np.zeros((2, p))
        eta[:, 0] = 1.0
        assert loss_value(eta, mom) == pytest.approx(-1.0)  # -0.5 per task

    def test_matches_residual_expansion_when_noiseless(self):
        rng = np.random.default_rng(6)
        W, y = random_design(rng, M=3, n=15, p=8)
        mom = CorrectedMoments(W, y)
        eta = rng.normal(size=(3, 8))
        direct = loss_value(eta, mom)
        expansion = sum(
            0.5 / 15 * float((ym - wm @ em) @ (ym - wm @ em))
            - 0.5 / 15 * float(ym @ ym)
            for wm, ym, em in zip(W, y, eta)
        )
        assert direct == pytest.approx(expansion, abs=1e-10)

    def test_corrected_loss_shifts_by_noise_quadratic(self):
        rng = np.random.default_rng(7)
        W, y = random_design(rng)
        sig = scaled_identity(10, 0.4)
        mom0 = CorrectedMoments(W, y)
        mom = CorrectedMoments(W, y, sig)
        eta = rng.normal(size=(2, 10))
        want = loss_value(eta, mom0) - 0.5 * 0.4 * (eta**2).sum()
        assert loss_value(eta, mom) == pytest.approx(want, abs=1e-10)


class TestGradient:
    def test_zero_point(self):
        rng = np.random.default_rng(8)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y)
        assert np.allclose(loss_gradient(np.zeros((2, 10)), mom), -mom.gammas)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(9)
        W, y = random_design(rng, M=2, n=9, p=7)
        mom = CorrectedMoments(W, y, scaled_identity(7, 0.6))
        for _ in range(5):
            eta = rng.normal(size=(2, 7))
            g = loss_gradient(eta, mom)
            scale = max(1.0, np.abs(eta).max())
            h = 1e-5 * scale
            fd = np.empty_like(g)
            for m in range(2):
                for j in range(7):
                    ep = eta.copy()
                    ep[m, j] += h
                    em = eta.copy()
                    em[m, j] -= h
                    fd[m, j] = (loss_value(ep, mom) - loss_value(em, mom)) / (2 * h)
            assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-6

    def test_task_separability(self):
        rng = np.random.default_rng(10)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y)
        eta = rng.normal(size=(2, 10))
        g0 = loss_gradient(eta, mom)[0]
        eta2 = eta.copy()
        eta2[1] = rng.normal(size=10)
        assert np.allclose(loss_gradient(eta2, mom)[0], g0)

    def test_descent_direction(self):
        rng = np.random.default_rng(11)
        W, y = random_design(rng)
        mom = CorrectedMoments(W, y, scaled_identity(10, 0.2))
        eta = rng.normal(size=(2, 10))
        g = loss_gradient(eta, mom)
        f0 = loss_value(eta, mom)
        assert loss_value(eta - 1e-6 * g, mom) < f0


class TestREDiagnostic:
    def test_identity_gamma(self):
        p = 6
        mom = CorrectedMoments.from_dense([np.eye(p)], np.zeros((1, p)))
        diag = re_diagnostic(mom, tau=0.0, sparsity_levels=(1, 3, 6), draws=50)
        assert diag.alpha1 == pytest.approx(1.0, abs=1e-10)
        assert diag.alpha2 == pytest.approx(1.0, abs=1e-10)

    def test_diagonal_rayleigh_range(self):
        G = np.diag([2.0, 0.5])
        mom = CorrectedMoments.from_dense([G], np.zeros((1, 2)))
        diag = re_diagnostic(mom, tau=0.0, sparsity_levels=(2,), draws=300, seed=1)
        assert 0.5 - 1e-9 <= diag.alpha1 <= 2.0 + 1e-9
        assert 0.5 - 1e-9 <= diag.alpha2 <= 2.0 + 1e-9
        assert diag.alpha1 <= diag.alpha2

    def test_reference_constants(self):
        eta0 = np.array([[1.0, 0.0, 0.5], [0.0, 0.0, 0.5]])
        ref = reference_constants(eta0, R=2.0, q=2.0)
        assert ref["k"] == 2
        assert ref["l"] == pytest.approx(1.0)  # min group L1 is 1.0
        assert ref["h1"] == pytest.approx(1.0 + 6.0)
        assert ref["h2"] == pytest.approx(1.0 + 3.0 * math.sqrt(2.0))


class TestCheckDeviation:
    def gen(self, snr=3.0):
        from mtsir.sim import ScenarioConfig

        return ScenarioConfig(
            M=1, n_train=8, n_test=8, p0=16, j0=2, family="sym4", shape="round",
            overlap="homogeneous", snr=snr, seed=0,
        )

    def test_slope_near_root_n(self):
        from mtsir.moments import check_deviation

        table = check_deviation([100, 400, 1600], self.gen(), replicates=20, seed=0)
        sg, sG = table.slopes()
        assert -0.65 < sg < -0.35
        assert -0.65 < sG < -0.35

    def test_gamma_deviation_linear_in_signal(self):
        from mtsir.moments import check_deviation

        a = check_deviation([200], self.gen(), replicates=10, seed=1)
        b = check_deviation([200], self.gen(), replicates=10, seed=1, eta_scale=2.0)
        ratios = [y[3] / x[3] for x, y in zip(a.rows, b.rows)]
        assert np.allclose(ratios, 2.0, rtol=1e-8)

    def test_deviation_shrinks_without_noise(self):
        from mtsir.moments import check_deviation

        noisy = check_deviation([400], self.gen(3.0), replicates=10, seed=2)
        clean = check_deviation([400], self.gen(math.inf), replicates=10, seed=2)
        assert np.mean([r[2] for r in clean.rows]) < np.mean([r[2] for r in noisy.rows])


class TestErrorBound:
    def make_diag(self, **kw):
        base = dict(
            alpha1=0.5, alpha2=2.0, tau=0.01, M=3, k=4, l=1.0, h1=4.0,
            h2=1.0 + 3.0 * 3 ** 0.5, phi_hat=1.0,
        )
        base.update(kw)
        return TheoryDiagnostics(**base)

    def test_scaling_in_mk(self):
        diag1 = self.make_diag()
        diag2 = self.make_diag(k=8)
        lam = 2.0
        l1_a, _ = error_bound(diag1, lam, n=100, p=64, kind="group_lasso_q2")
        l1_b, _ = error_bound(diag2, lam, n=100, p=64, kind="group_lasso_q2")
        assert l1_b / l1_a == pytest.approx(2.0)

    def test_lambda_floor_rejected(self):
        diag = self.make_diag()
        rate = 1.0 * math.sqrt(math.log(64) / 100)
        floor = 2 * rate * 3 ** 0.5
        with pytest.raises(ValueError, match="floor"):
            error_bound(diag, 0.5 * floor, n=100, p=64, kind="group_lasso_q2")

    def test_degenerate_curvature_rejected(self):
        diag = self.make_diag(alpha1=-0.1)
        with pytest.raises(ValueError, match="curvature"):
            error_bound(diag, 5.0, n=100, p=64, kind="group_lasso_q2")

    def test_bridge_uses_l_scaling(self):
        diag = self.make_diag()
        lam = 5.0
        l1, l2 = error_bound(diag, lam, n=100, p=64, kind="group_bridge")
        Mk = diag.M * diag.k
        factor = max(1.0 * math.sqrt(math.log(64) / 100), lam / diag.l)
        assert l2 == pytest.approx(8 * diag.h1 * math.sqrt(Mk) / diag.alpha1 * factor)
        assert l1 == pytest.approx(8 * diag.h1**2 * Mk / diag.alpha1 * factor)
