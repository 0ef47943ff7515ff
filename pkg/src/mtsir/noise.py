"""Measurement-noise covariance: operator representation, estimation from
validation data, and conjugation into the wavelet domain.

Covariances estimated from data are kept in factored (Gram) form
Sigma = A^T A / denom so that only matrix-vector products are ever needed;
this also makes them positive semi-definite by construction.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import wavelet

MODES = ("zero", "scaled_identity", "dense", "factored")
FORMAT_VERSION = 1


@dataclass
class NoiseCovariance:
    """A p x p symmetric PSD operator in one of four storage modes."""

    mode: str
    p: int
    scale: float = 0.0
    dense: np.ndarray | None = None
    factor: np.ndarray | None = None
    denom: int = 1
    provenance: str = "known"
    domain: str = "image"  # "image" or "wavelet"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.mode == "dense":
            d = np.asarray(self.dense, dtype=float)
            if d.shape != (self.p, self.p):
                raise ValueError("dense covariance has wrong shape")
            if np.abs(d - d.T).max() > 1e-8 * max(1.0, np.abs(d).max()):
                raise ValueError("dense covariance is not symmetric")
            self.dense = d
        if self.mode == "factored":
            f = np.asarray(self.factor, dtype=float)
            if f.ndim != 2 or f.shape[1] != self.p:
                raise ValueError("factor must have p columns")
            if not np.all(np.isfinite(f)):
                raise ValueError("factor contains non-finite rows")
            self.factor = f
        if self.mode == "scaled_identity" and self.scale < 0:
            raise ValueError("scale must be nonnegative")

    @property
    def is_zero(self):
        return self.mode == "zero" or (self.mode == "scaled_identity" and self.scale == 0.0)

    def matvec(self, v):
        if self.mode == "zero":
            return np.zeros_like(v)
        if self.mode == "scaled_identity":
            return self.scale * v
        if self.mode == "dense":
            return self.dense @ v
        return self.factor.T @ (self.factor @ v) / self.denom

    def matmat(self, V):
        """Apply to the rows of an (M, p) array."""
        if self.mode == "zero":
            return np.zeros_like(V)
        if self.mode == "scaled_identity":
            return self.scale * V
        if self.mode == "dense":
            return V @ self.dense  # symmetric
        return (self.factor @ V.T).T @ self.factor / self.denom

    def quad(self, v):
        """Quadratic form v^T Sigma v (nonnegative up to rounding)."""
        if self.mode == "factored":
            z = self.factor @ v
            return float(z @ z) / self.denom
        return float(v @ self.matvec(v))

    def to_dense(self):
        if self.mode == "zero":
            return np.zeros((self.p, self.p))
        if self.mode == "scaled_identity":
            return self.scale * np.eye(self.p)
        if self.mode == "dense":
            return self.dense.copy()
        return self.factor.T @ self.factor / self.denom


def zero_covariance(p):
    return NoiseCovariance("zero", p)


def scaled_identity(p, scale, provenance="known"):
    return NoiseCovariance("scaled_identity", p, scale=scale, provenance=provenance)


def estimate_direct(U0):
    """Covariance from n0 directly observed noise vectors: U0^T U0 / n0.

    The rows are noise by assumption, so no centering is applied.
    """
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    if U0.shape[0] < 1:
        raise ValueError("need at least one noise vector")
    if not np.all(np.isfinite(U0)):
        raise ValueError("noise vectors contain non-finite values")
    return NoiseCovariance(
        "factored", U0.shape[1], factor=U0, denom=U0.shape[0], provenance="estimated_direct"
    )


def estimate_replicates(Z):
    """Covariance from M replicate groups sharing an unobserved truth.

    Z is a list of M arrays of identical shape (n_star, p) with
    z_mi = x_i + u_mi; the estimator averages the within-subject scatter,
    (1 / (n_star (M-1))) sum_i sum_m (z_mi - zbar_i)(z_mi - zbar_i)^T.
    """
    if len(Z) < 2:
        raise ValueError("replicate estimator requires M >= 2 groups")
    Z = [np.atleast_2d(np.asarray(z, dtype=float)) for z in Z]
    shape = Z[0].shape
    if any(z.shape != shape for z in Z):
        raise ValueError("replicate groups must share one shape")
    stack = np.stack(Z)  # (M, n_star, p)
    if not np.all(np.isfinite(stack)):
        raise ValueError("replicates contain non-finite values")
    centered = stack - stack.mean(axis=0, keepdims=True)
    M, n_star, p = stack.shape
    factor = centered.reshape(M * n_star, p)
    return NoiseCovariance(
        "factored", p, factor=factor, denom=n_star * (M - 1), provenance="estimated_replicates"
    )


def to_wavelet_domain(cov, spec):
    """Conjugate an image-domain covariance by the wavelet basis."""
    if cov.domain == "wavelet":
        return cov
    if cov.p != spec.p:
        raise ValueError(f"covariance dimension {cov.p} does not match spec p {spec.p}")
    if cov.mode in ("zero", "scaled_identity"):
        out = NoiseCovariance(
            cov.mode, cov.p, scale=cov.scale, provenance=cov.provenance, domain="wavelet"
        )
    elif cov.mode == "dense":
        out = NoiseCovariance(
            "dense",
            cov.p,
            dense=wavelet.conjugate_dense(cov.dense, spec),
            provenance=cov.provenance,
            domain="wavelet",
        )
    else:
        out = NoiseCovariance(
            "factored",
            cov.p,
            factor=wavelet.transform_factor_rows(cov.factor, spec),
            denom=cov.denom,
            provenance=cov.provenance,
            domain="wavelet",
        )
    return out


def check_sample_size(cov, n_train):
    """Warn when the validation sample is no larger than the training sample.

    The estimators keep their guarantees only when the effective validation
    size (n0, or n_star (M-1)) exceeds n; smaller runs are allowed but flagged.
    """
    if cov.provenance not in ("estimated_direct", "estimated_replicates"):
        return None
    effective = cov.denom
    if effective <= n_train:
        msg = (
            f"noise-covariance validation size {effective} is <= training size "
            f"{n_train}; estimates may be too noisy to preserve error guarantees"
        )
        warnings.warn(msg)
        return msg
    return None


def save_covariance(cov, path):
    """Persist as a JSON header plus (when present) a binary factor/dense blob."""
    os.makedirs(path, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "noise_covariance",
        "mode": cov.mode,
        "p": cov.p,
        "denom": cov.denom,
        "scale": cov.scale,
        "provenance": cov.provenance,
        "domain": cov.domain,
        "endianness": "little",
        "dtype": "float64",
    }
    if cov.mode == "factored":
        header["factor_rows"] = int(cov.factor.shape[0])
        with open(os.path.join(path, "factor.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(cov.factor, dtype="<f8").tobytes())
    elif cov.mode == "dense":
        with open(os.path.join(path, "dense.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(cov.dense, dtype="<f8").tobytes())
    with open(os.path.join(path, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_covariance(path):
    header_path = os.path.join(path, "header.json")
    with open(header_path) as fh:
        header = json.load(fh)
    mode, p = header["mode"], int(header["p"])
    if mode == "factored":
        rows = int(header["factor_rows"])
        raw = open(os.path.join(path, "factor.bin"), "rb").read()
        if len(raw) != rows * p * 8:
            raise ValueError(f"factor.bin truncated at byte {len(raw)}")
        factor = np.frombuffer(raw, dtype="<f8").reshape(rows, p).copy()
        return NoiseCovariance(
            "factored", p, factor=factor, denom=int(header["denom"]),
            provenance=header["provenance"], domain=header["domain"],
        )
    if mode == "dense":
        raw = open(os.path.join(path, "dense.bin"), "rb").read()
        dense = np.frombuffer(raw, dtype="<f8").reshape(p, p).copy()
        return NoiseCovariance(
            "dense", p, dense=dense, provenance=header["provenance"], domain=header["domain"]
        )
    return NoiseCovariance(
        mode, p, scale=float(header["scale"]),
        provenance=header["provenance"], domain=header["domain"],
    )
