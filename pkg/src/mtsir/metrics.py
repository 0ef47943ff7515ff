"""Evaluation metrics: standardized prediction error, coefficient bias as
pixelwise mean absolute error, support-recovery AUC, and reconstruction of
coefficient images from wavelet coefficients."""

import json
import os

import numpy as np
from scipy.stats import rankdata

from .wavelet import idwt2


def pmse(y_pred, y_test, var_train):
    """Mean squared prediction error standardized by the training variance."""
    y_pred = np.asarray(y_pred, dtype=float)
    y_test = np.asarray(y_test, dtype=float)
    if y_pred.shape != y_test.shape:
        raise ValueError("prediction and test outcome lengths differ")
    if not var_train > 0:
        raise ValueError("training variance must be positive")
    return float(np.mean((y_pred - y_test) ** 2)) / float(var_train)


def coefficient_bias(beta_hat, beta_true):
    """Mean over pixels of |beta_hat - beta_true|."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise ValueError("coefficient images have different shapes")
    return float(np.mean(np.abs(beta_hat - beta_true)))


def support_auc(beta_hat, support_mask):
    """Rank-based AUC of |beta_hat| against the true support (midrank ties)."""
    scores = np.abs(np.asarray(beta_hat, dtype=float)).ravel()
    mask = np.asarray(support_mask, dtype=bool).ravel()
    if scores.shape != mask.shape:
        raise ValueError("scores and mask have different sizes")
    n_pos = int(mask.sum())
    n_neg = mask.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("support mask must contain both activated and null pixels")
    ranks = rankdata(scores)
    return float((ranks[mask].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def reconstruct_beta(eta_row, spec):
    """Coefficient image synthesized from one task's wavelet coefficients."""
    return idwt2(np.asarray(eta_row, dtype=float), spec)


def write_pgm16(image, path):
    """16-bit PGM dump with a JSON sidecar recording the linear rescale."""
    image = np.asarray(image, dtype=float)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((image - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode())
        fh.write(scaled.tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"min": lo, "max": hi}, fh)
        fh.write("\n")
