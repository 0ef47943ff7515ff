"""Wavelet transform tests: explicit small-matrix oracles plus the
orthonormality, reconstruction and admissibility properties the solvers
rely on."""

import numpy as np
import pytest

from mtsir.wavelet import (
    FILTERS,
    PaddedImage,
    WaveletBasisSpec,
    basis_matrix,
    coeff_layout,
    conjugate_dense,
    dwt2,
    idwt2,
    inverse_transform_rows,
    pad_to_pow2,
    quadrature_mirror,
    transform_factor_rows,
    transform_images,
    _analysis_matrix,
)


def haar_2x2_oracle():
    # Explicit orthonormal basis for 2x2 Haar, j0 = 0, row-major pixel order
    # (x00, x01, x10, x11).  Rows: approx, q1 (rows highpass), q2, q3.
    h = 0.5
    return np.array(
        [
            [h, h, h, h],
            [h, h, -h, -h],
            [h, -h, h, -h],
            [h, -h, -h, h],
        ]
    )


class TestSmallOracles:
    def test_haar_2x2_constant_image(self):
        spec = WaveletBasisSpec("haar", j0=0, p0=2)
        c = dwt2(np.ones((2, 2)), spec)
        assert c[0] == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(c[1:], 0.0, atol=1e-12)

    def test_haar_2x2_matches_explicit_matrix(self):
        spec = WaveletBasisSpec("haar", j0=0, p0=2)
        Q = haar_2x2_oracle()
        rng = np.random.default_rng(0)
        for _ in range(20):
            img = rng.normal(size=(2, 2))
            got = dwt2(img, spec)
            want = Q @ img.ravel()
            # q1 sign convention may differ from the oracle only by a fixed
            # orthogonal relabeling; require exact agreement up to sign per row.
            assert np.allclose(np.abs(got), np.abs(want), atol=1e-12)

    def test_basis_matrix_is_orthonormal_and_matches_dwt2(self):
        for family in FILTERS:
            spec = WaveletBasisSpec(family, j0=1, p0=4)
            Q = basis_matrix(spec)
            assert np.allclose(Q @ Q.T, np.eye(spec.p), atol=1e-10)
            rng = np.random.default_rng(1)
            img = rng.normal(size=(4, 4))
            assert np.allclose(Q @ img.ravel(), dwt2(img, spec), atol=1e-12)


class TestFilters:
    @pytest.mark.parametrize("family", sorted(FILTERS))
    def test_admissibility(self, family):
        lo = FILTERS[family]
        assert lo.sum() == pytest.approx(np.sqrt(2.0), abs=1e-12)
        assert (lo**2).sum() == pytest.approx(1.0, abs=1e-12)

    def test_sym4_discrete_vanishing_moments(self):
        hi = quadrature_mirror(FILTERS["sym4"])
        k = np.arange(hi.size, dtype=float)
        for deg in range(4):
            assert abs((hi * k**deg).sum()) < 1e-8

    @pytest.mark.parametrize("family", sorted(FILTERS))
    @pytest.mark.parametrize("side", [2, 4, 8, 64])
    def test_analysis_matrix_orthogonal(self, family, side):
        T = _analysis_matrix(side, family)
        assert np.abs(T @ T.T - np.eye(side)).max() < 1e-12


class TestRoundTrip:
    @pytest.mark.parametrize("family", sorted(FILTERS))
    @pytest.mark.parametrize("p0,j0", [(4, 0), (8, 2), (16, 3), (64, 3)])
    def test_round_trip_and_parseval(self, family, p0, j0):
        spec = WaveletBasisSpec(family, j0=j0, p0=p0)
        rng = np.random.default_rng(42)
        imgs = rng.normal(size=(20, p0, p0))
        C = transform_images(imgs, spec)
        back = inverse_transform_rows(C, spec)
        assert np.abs(back - imgs).max() < 1e-10
        assert np.allclose(
            np.linalg.norm(C, axis=1),
            np.linalg.norm(imgs.reshape(20, -1), axis=1),
            atol=1e-10,
        )

    def test_zero_image(self):
        spec = WaveletBasisSpec("sym4", j0=2, p0=8)
        assert np.all(dwt2(np.zeros((8, 8)), spec) == 0.0)

    def test_constant_image_haar_details_vanish(self):
        spec = WaveletBasisSpec("haar", j0=1, p0=8)
        c = dwt2(np.full((8, 8), 3.7), spec)
        approx_len = 4 ** spec.j0
        assert np.abs(c[approx_len:]).max() < 1e-12

    def test_linearity(self):
        spec = WaveletBasisSpec("sym4", j0=1, p0=16)
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=(2, 16, 16))
        a, b = 2.5, -1.25
        lhs = dwt2(a * x + b * y, spec)
        rhs = a * dwt2(x, spec) + b * dwt2(y, spec)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_unit_coefficient_gives_unit_norm_basis_image(self):
        spec = WaveletBasisSpec("sym4", j0=2, p0=8)
        rng = np.random.default_rng(3)
        for j in rng.integers(0, spec.p, size=8):
            e = np.zeros(spec.p)
            e[j] = 1.0
            img = idwt2(e, spec)
            assert np.linalg.norm(img) == pytest.approx(1.0, abs=1e-10)


def unwrapped_detail_mask(spec):
    """Boolean mask of coefficients whose effective filter support does not
    wrap around the periodic boundary (approximation block excluded)."""
    L = FILTERS[spec.family].size
    mask = np.zeros(spec.p, dtype=bool)
    for name, j, off, s in coeff_layout(spec):
        if name == "approx":
            continue
        depth = spec.J + 1 - j
        reach = (L - 1) * (2**depth - 1)  # support = [2^d k, 2^d k + reach]
        k = np.arange(s)
        ok_1d = (2**depth) * k + reach <= spec.p0 - 1
        ok = np.outer(ok_1d, ok_1d).ravel()
        mask[off : off + s * s] = ok
    return mask


class TestCubicAnnihilation:
    def test_sym4_annihilates_sampled_cubics_away_from_wrap(self):
        spec = WaveletBasisSpec("sym4", j0=3, p0=32)
        u = np.arange(32, dtype=float) / 32.0
        v1, v2 = np.meshgrid(u, u, indexing="ij")
        cubic = 1.0 + 2 * v1 - v2 + 3 * v1**2 * v2 - 0.5 * v2**3 + v1**3
        c = dwt2(cubic, spec)
        mask = unwrapped_detail_mask(spec)
        assert mask.sum() > 0
        assert np.abs(c[mask]).max() < 1e-8

    def test_haar_annihilates_constants_everywhere(self):
        spec = WaveletBasisSpec("haar", j0=0, p0=16)
        c = dwt2(np.full((16, 16), 2.0), spec)
        assert np.abs(c[1:]).max() < 1e-12


class TestPadding:
    def test_already_power_of_two_unchanged(self):
        img = np.arange(16.0).reshape(4, 4)
        padded = pad_to_pow2(img)
        assert padded.values.shape == (4, 4)
        assert np.array_equal(padded.values, img)

    def test_3x5_centered_in_8x8(self):
        img = np.ones((3, 5))
        padded = pad_to_pow2(img)
        assert padded.values.shape == (8, 8)
        assert padded.values.sum() == pytest.approx(15.0)
        assert np.array_equal(padded.crop(), img)

    def test_energy_preserved(self):
        rng = np.random.default_rng(11)
        img = rng.normal(size=(5, 7))
        padded = pad_to_pow2(img)
        assert (padded.values**2).sum() == pytest.approx((img**2).sum(), rel=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pad_to_pow2(np.empty((0, 3)))


class TestCovarianceConjugation:
    def test_scaled_identity_passthrough(self):
        spec = WaveletBasisSpec("sym4", j0=1, p0=4)
        out = conjugate_dense(2.5 * np.eye(spec.p), spec)
        assert np.abs(out - 2.5 * np.eye(spec.p)).max() < 1e-10

    def test_zero(self):
        spec = WaveletBasisSpec("haar", j0=1, p0=4)
        assert np.abs(conjugate_dense(np.zeros((16, 16)), spec)).max() == 0.0

    def test_asymmetric_rejected(self):
        spec = WaveletBasisSpec("haar", j0=1, p0=4)
        sigma = np.eye(16)
        sigma[0, 1] = 1.0
        with pytest.raises(ValueError):
            conjugate_dense(sigma, spec)

    @pytest.mark.parametrize("family", sorted(FILTERS))
    def test_matches_explicit_basis_conjugation(self, family):
        spec = WaveletBasisSpec(family, j0=1, p0=8)
        rng = np.random.default_rng(5)
        A = rng.normal(size=(10, spec.p))
        sigma = A.T @ A / 10
        Q = basis_matrix(spec)
        want = Q @ sigma @ Q.T
        got = conjugate_dense(sigma, spec)
        assert np.abs(got - want).max() < 1e-10

    def test_factored_rows_agree_with_dense(self):
        spec = WaveletBasisSpec("sym4", j0=2, p0=8)
        rng = np.random.default_rng(9)
        A = rng.normal(size=(7, spec.p))
        At = transform_factor_rows(A, spec)
        dense = conjugate_dense(A.T @ A / 7, spec)
        v = rng.normal(size=spec.p)
        assert np.abs(At.T @ (At @ v) / 7 - dense @ v).max() < 1e-10


class TestValidation:
    def test_dwt2_size_mismatch(self):
        spec = WaveletBasisSpec("haar", j0=1, p0=8)
        with pytest.raises(ValueError):
            dwt2(np.zeros((4, 4)), spec)

    def test_idwt2_length_mismatch(self):
        spec = WaveletBasisSpec("haar", j0=1, p0=8)
        with pytest.raises(ValueError):
            idwt2(np.zeros(10), spec)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            WaveletBasisSpec("haar", j0=9, p0=8)
        with pytest.raises(ValueError):
            WaveletBasisSpec("haar", j0=1, p0=12)
        with pytest.raises(ValueError):
            WaveletBasisSpec("db97", j0=1, p0=8)

    def test_layout_covers_vector(self):
        spec = WaveletBasisSpec("sym4", j0=2, p0=16)
        layout = coeff_layout(spec)
        total = sum(s * s for _, _, _, s in layout)
        assert total == spec.p
