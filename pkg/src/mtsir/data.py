"""Multi-task dataset model, design-matrix construction and disk format.

A dataset on disk is a directory holding ``manifest.json`` plus, per task m,
``y_<m>.csv`` (one float per line) and ``images_<m>.bin`` (little-endian
float64, images concatenated row-major).  See docs/file_formats.md.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .wavelet import WaveletBasisSpec, transform_images

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset is malformed."""


@dataclass
class TaskData:
    task_id: int
    y: np.ndarray
    images: np.ndarray  # (n_m, side, side)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.images = np.asarray(self.images, dtype=float)
        if self.y.ndim != 1 or self.y.size < 1:
            raise ValueError(f"task {self.task_id}: y must be a nonempty vector")
        if not np.all(np.isfinite(self.y)):
            raise ValueError(f"task {self.task_id}: outcome contains non-finite values")
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"task {self.task_id}: images must be (n, side, side)")
        if self.images.shape[0] != self.y.size:
            raise ValueError(
                f"task {self.task_id}: {self.images.shape[0]} images for {self.y.size} outcomes"
            )

    @property
    def n(self):
        return self.y.size

    @property
    def side(self):
        return self.images.shape[1]


@dataclass
class MultiTaskDataset:
    tasks: list
    spec: WaveletBasisSpec

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("dataset must contain at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be distinct")
        sides = {t.side for t in self.tasks}
        if len(sides) != 1:
            raise ValueError(f"tasks have inconsistent image sides: {sorted(sides)}")
        if sides.pop() != self.spec.p0:
            raise ValueError("image side does not match wavelet spec p0")

    @property
    def M(self):
        return len(self.tasks)


@dataclass
class DesignMatrices:
    """Per-task wavelet designs with centered outcomes.

    Row i of W[m] is the coefficient vector of image i; group j of any
    coefficient array is column j.
    """

    W: list
    y_centered: list
    y_means: np.ndarray
    task_ids: list
    spec: WaveletBasisSpec
    y_raw: list = field(default_factory=list)

    @property
    def M(self):
        return len(self.W)

    @property
    def p(self):
        return self.W[0].shape[1]

    @property
    def n(self):
        return [w.shape[0] for w in self.W]


def build_design(ds):
    """Wavelet design matrices and per-task mean-centered outcomes."""
    W, yc, means, ids, yr = [], [], [], [], []
    for task in ds.tasks:
        W.append(transform_images(task.images, ds.spec))
        mu = float(task.y.mean())
        means.append(mu)
        yc.append(task.y - mu)
        yr.append(task.y.copy())
        ids.append(task.task_id)
    return DesignMatrices(W, yc, np.array(means), ids, ds.spec, yr)


def subset_design(design, indices):
    """Design restricted to per-task row indices, outcomes re-centered."""
    W, yc, means, yr = [], [], [], []
    for m in range(design.M):
        idx = np.asarray(indices[m], dtype=int)
        if idx.size < 1:
            raise ValueError(f"task {design.task_ids[m]}: empty subset")
        w = design.W[m][idx]
        y = design.y_centered[m][idx] + design.y_means[m]
        mu = float(y.mean())
        W.append(w)
        yc.append(y - mu)
        means.append(mu)
        yr.append(y)
    return DesignMatrices(W, yc, np.array(means), list(design.task_ids), design.spec, yr)


def predict(eta, design, task_id):
    """Fitted means for one task: stored training mean plus W_m eta_m."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if task_id not in design.task_ids:
        raise ValueError(f"unknown task id {task_id}")
    m = design.task_ids.index(task_id)
    if eta.shape != (design.M, design.p):
        raise ValueError(f"expected coefficients of shape ({design.M}, {design.p})")
    return design.y_means[m] + design.W[m] @ eta[m]


def save_dataset(ds, path):
    """Write a dataset directory (manifest + per-task CSV/binary files)."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "M": ds.M,
        "task_ids": [t.task_id for t in ds.tasks],
        "n_per_task": [t.n for t in ds.tasks],
        "image_side": ds.spec.p0,
        "wavelet": {"family": ds.spec.family, "j0": ds.spec.j0, "p0": ds.spec.p0},
        "endianness": "little",
        "dtype": "float64",
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for task in ds.tasks:
        np.savetxt(
            os.path.join(path, f"y_{task.task_id}.csv"), task.y, fmt="%.17g"
        )
        with open(os.path.join(path, f"images_{task.task_id}.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(task.images, dtype="<f8").tobytes())


def load_dataset(path):
    """Read a dataset directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed manifest {manifest_path}: {exc}")
    for key in ("M", "task_ids", "n_per_task", "image_side", "wavelet"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing field {key!r}")
    side = int(manifest["image_side"])
    wav = manifest["wavelet"]
    spec = WaveletBasisSpec(wav["family"], int(wav["j0"]), int(wav["p0"]))
    tasks = []
    for task_id, n in zip(manifest["task_ids"], manifest["n_per_task"]):
        y_path = os.path.join(path, f"y_{task_id}.csv")
        try:
            y = np.loadtxt(y_path, ndmin=1)
        except OSError:
            raise DatasetFormatError(f"task {task_id}: missing outcome file {y_path}")
        except ValueError as exc:
            raise DatasetFormatError(f"task {task_id}: malformed outcome file: {exc}")
        if y.size != n:
            raise DatasetFormatError(
                f"task {task_id}: expected {n} outcomes, found {y.size}"
            )
        img_path = os.path.join(path, f"images_{task_id}.bin")
        expected = n * side * side * 8
        try:
            raw = open(img_path, "rb").read()
        except OSError:
            raise DatasetFormatError(f"task {task_id}: missing image file {img_path}")
        if len(raw) != expected:
            raise DatasetFormatError(
                f"task {task_id}: {img_path} truncated at byte {len(raw)}"
                f" (expected {expected} bytes)"
            )
        images = np.frombuffer(raw, dtype="<f8").reshape(n, side, side).copy()
        if not np.all(np.isfinite(images)):
            bad = int(np.nonzero(~np.isfinite(images.reshape(n, -1)).all(axis=1))[0][0])
            raise DatasetFormatError(f"task {task_id}: non-finite values in image {bad}")
        if not np.all(np.isfinite(y)):
            bad = int(np.nonzero(~np.isfinite(y))[0][0])
            raise DatasetFormatError(f"task {task_id}: non-finite outcome at record {bad}")
        tasks.append(TaskData(task_id, y, images))
    return MultiTaskDataset(tasks, spec)
