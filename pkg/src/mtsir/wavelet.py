"""Orthonormal 2-D discrete wavelet transforms with periodic boundary handling.

Images of side ``p0`` (a power of two) are decomposed down to a primary
level ``j0``, giving ``p = p0**2`` coefficients: one approximation block of
side ``2**j0`` followed by detail blocks for levels ``j0 .. J`` with
``J = log2(p0) - 1``.  Each level carries three orientations, in order

* ``q = 1``: highpass along axis 0, lowpass along axis 1,
* ``q = 2``: lowpass along axis 0, highpass along axis 1,
* ``q = 3``: highpass along both axes.

Blocks are flattened row-major and concatenated as
``[approx(j0), detail(j0, q=1..3), detail(j0+1, q=1..3), ..., detail(J, q=1..3)]``.
Periodic extension keeps the transform exactly orthonormal, so round trips
and Parseval identities hold to floating-point accuracy.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Orthonormal scaling (lowpass analysis) filters.  "sym4" is the Daubechies
# least-asymmetric filter with 4 vanishing moments (8 taps).
FILTERS = {
    "haar": np.array([0.7071067811865476, 0.7071067811865476]),
    "sym4": np.array(
        [
            -0.07576571478927333,
            -0.02963552764599851,
            0.49761866763201545,
            0.8037387518059161,
            0.29785779560527736,
            -0.09921954357684722,
            -0.012603967262037833,
            0.0322231006040427,
        ]
    ),
}


def quadrature_mirror(lo):
    """Highpass filter paired with lowpass ``lo``: g[k] = (-1)^k lo[L-1-k]."""
    lo = np.asarray(lo, dtype=float)
    signs = np.where(np.arange(lo.size) % 2 == 0, 1.0, -1.0)
    return signs * lo[::-1]


@dataclass(frozen=True)
class WaveletBasisSpec:
    """Wavelet family, primary level and padded side length.

    The induced p x p transform matrix (p = p0**2) is orthonormal; it is
    never materialized except through :func:`basis_matrix` for small sizes.
    """

    family: str = "sym4"
    j0: int = 3
    p0: int = 64

    def __post_init__(self):
        if self.family not in FILTERS:
            raise ValueError(f"unknown wavelet family {self.family!r}")
        if self.p0 < 2 or (self.p0 & (self.p0 - 1)) != 0:
            raise ValueError(f"p0 must be a power of 2 >= 2, got {self.p0}")
        if not 0 <= self.j0 <= self.J:
            raise ValueError(f"j0 must be in [0, {self.J}], got {self.j0}")

    @property
    def J(self):
        """Maximum decomposition level, log2(p0) - 1."""
        return int(np.log2(self.p0)) - 1

    @property
    def p(self):
        """Total number of coefficients, p0**2."""
        return self.p0 * self.p0


@dataclass
class PaddedImage:
    """Zero-padded image with the offset needed to crop back."""

    values: np.ndarray
    offset: tuple
    original_shape: tuple

    def crop(self):
        r, c = self.offset
        h, w = self.original_shape
        return self.values[r : r + h, c : c + w]


def pad_to_pow2(raw):
    """Center ``raw`` in the smallest power-of-2 square and zero-pad around it."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError("input image must be a non-empty 2-D array")
    if not np.all(np.isfinite(raw)):
        raise ValueError("input image contains non-finite values")
    side = 1 << max(int(np.ceil(np.log2(max(raw.shape)))), 1)
    out = np.zeros((side, side))
    r = (side - raw.shape[0]) // 2
    c = (side - raw.shape[1]) // 2
    out[r : r + raw.shape[0], c : c + raw.shape[1]] = raw
    return PaddedImage(out, (r, c), raw.shape)


@lru_cache(maxsize=None)
def _analysis_matrix(side, family):
    """One-level periodized analysis matrix (orthogonal, side x side).

    Row k < side/2 holds the lowpass filter at shift 2k (mod side); rows
    side/2 + k hold the highpass filter.  Wrapped taps accumulate, which
    preserves orthonormality for every even side.
    """
    lo = FILTERS[family]
    hi = quadrature_mirror(lo)
    half = side // 2
    T = np.zeros((side, side))
    for k in range(half):
        for tap in range(lo.size):
            col = (2 * k + tap) % side
            T[k, col] += lo[tap]
            T[half + k, col] += hi[tap]
    T.setflags(write=False)
    return T


def coeff_layout(spec):
    """Ordered (name, level, offset, block_side) segments of the coefficient vector."""
    segments = []
    offset = 0
    s0 = 1 << spec.j0
    segments.append(("approx", spec.j0, offset, s0))
    offset += s0 * s0
    for j in range(spec.j0, spec.J + 1):
        s = 1 << j
        for q in (1, 2, 3):
            segments.append((f"detail_q{q}", j, offset, s))
            offset += s * s
    assert offset == spec.p
    return segments


def transform_images(images, spec):
    """Forward transform of a stack of images, shape (n, p0, p0) -> (n, p)."""
    images = np.asarray(images, dtype=float)
    if images.ndim != 3 or images.shape[1] != spec.p0 or images.shape[2] != spec.p0:
        raise ValueError(
            f"expected image stack of shape (n, {spec.p0}, {spec.p0}), got {images.shape}"
        )
    n = images.shape[0]
    cur = images
    side = spec.p0
    details = []  # collected coarsest-last, reassembled ascending below
    while side > (1 << spec.j0):
        T = _analysis_matrix(side, spec.family)
        Y = np.matmul(np.matmul(T, cur), T.T)
        h = side // 2
        details.append((Y[:, h:, :h], Y[:, :h, h:], Y[:, h:, h:]))
        cur = np.ascontiguousarray(Y[:, :h, :h])
        side = h
    parts = [cur.reshape(n, -1)]
    for q1, q2, q3 in reversed(details):
        parts.extend(b.reshape(n, -1) for b in (q1, q2, q3))
    return np.concatenate(parts, axis=1)


def inverse_transform_rows(coeffs, spec):
    """Inverse transform of coefficient rows, shape (n, p) -> (n, p0, p0)."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 2 or coeffs.shape[1] != spec.p:
        raise ValueError(f"expected coefficient rows of length {spec.p}, got {coeffs.shape}")
    n = coeffs.shape[0]
    layout = coeff_layout(spec)
    _, _, off, s0 = layout[0]
    cur = coeffs[:, off : off + s0 * s0].reshape(n, s0, s0)
    blocks = {(lev, name): (o, s) for name, lev, o, s in layout[1:]}
    for j in range(spec.j0, spec.J + 1):
        s = 1 << j
        Y = np.empty((n, 2 * s, 2 * s))
        Y[:, :s, :s] = cur
        for q, (rs, cs) in ((1, (s, 0)), (2, (0, s)), (3, (s, s))):
            o, _ = blocks[(j, f"detail_q{q}")]
            Y[:, rs : rs + s, cs : cs + s] = coeffs[:, o : o + s * s].reshape(n, s, s)
        T = _analysis_matrix(2 * s, spec.family)
        cur = np.matmul(np.matmul(T.T, Y), T)
    return cur


def dwt2(image, spec):
    """All p wavelet coefficients of a single p0 x p0 image, canonical order."""
    image = np.asarray(image, dtype=float)
    if image.shape != (spec.p0, spec.p0):
        raise ValueError(f"expected image of shape ({spec.p0}, {spec.p0}), got {image.shape}")
    return transform_images(image[None], spec)[0]


def idwt2(coeffs, spec):
    """Exact inverse of :func:`dwt2`."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (spec.p,):
        raise ValueError(f"expected coefficient vector of length {spec.p}, got {coeffs.shape}")
    return inverse_transform_rows(coeffs[None], spec)[0]


def transform_factor_rows(A, spec):
    """Apply the forward transform to each row of A (rows are vectorized images)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != spec.p:
        raise ValueError(f"expected factor with {spec.p} columns, got {A.shape}")
    return transform_images(A.reshape(-1, spec.p0, spec.p0), spec)


def conjugate_dense(sigma, spec, sym_tol=1e-8):
    """Conjugate a dense pixel-domain covariance into the wavelet domain.

    Returns B^T Sigma B for the orthonormal basis B, computed by transforming
    columns then rows, without materializing B.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (spec.p, spec.p):
        raise ValueError(f"expected {spec.p} x {spec.p} covariance, got {sigma.shape}")
    scale = max(np.abs(sigma).max(), 1.0)
    if np.abs(sigma - sigma.T).max() > sym_tol * scale:
        raise ValueError("dense covariance is not symmetric")
    cols = transform_factor_rows(sigma.T, spec).T  # = Q @ sigma
    return transform_factor_rows(cols, spec)  # rows of (Q sigma) transformed -> Q sigma Q^T


def basis_matrix(spec):
    """Materialize the orthonormal transform matrix Q with Q v = dwt2(v).

    Quadratic storage; intended for small p0 (tests and oracles).
    """
    eye = np.eye(spec.p).reshape(spec.p, spec.p0, spec.p0)
    return transform_images(eye, spec).T  # column i = dwt2(e_i); Q[j, i]
