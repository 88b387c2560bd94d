"""Principal-component reduction of deep activations."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PCAM"


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_out, n_in), orthonormal rows
    explained_variance_ratio: np.ndarray
    rank_deficient: bool = False

    @property
    def n_in(self):
        return self.mean.shape[0]

    @property
    def n_out(self):
        return self.components.shape[0]


def _fix_signs(vt):
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), pivot])
    signs[signs == 0] = 1.0
    return vt * signs[:, None]


def fit_pca(data, n_components):
    """Top right-singular vectors of the column-centered data.

    When the data rank is below ``n_components`` the trailing components
    get a zero variance ratio and the model is flagged ``rank_deficient``.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("PCA input must be a 2-D matrix")
    n, p = X.shape
    if n_components < 1 or n_components > p:
        raise DataError(f"n_components must be in [1, {p}]")
    if n < n_components:
        raise DataError(f"need at least {n_components} rows, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    energy = s ** 2
    total = energy.sum()
    ratios = energy[:n_components] / total if total > 0 else np.zeros(n_components)
    tol = s[0] * max(n, p) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    rank = int(np.sum(s > tol))
    components = _fix_signs(vt[:n_components])
    rank_deficient = rank < n_components
    if rank_deficient:
        ratios[rank:] = 0.0
    return PcaModel(mean, components, ratios, rank_deficient)


def transform(model, activations):
    """Project one vector (or rows of a matrix) onto the components."""
    x = np.asarray(activations, dtype=np.float64)
    if x.shape[-1] != model.n_in:
        raise DataError(f"expected {model.n_in} activations, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def inverse_transform(model, reduced):
    return np.asarray(reduced, dtype=np.float64) @ model.components + model.mean


def save_pca(model, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", model.n_in, model.n_out))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(model.components).astype("<f8").tobytes())
        fh.write(model.explained_variance_ratio.astype("<f8").tobytes())


def load_pca(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a PCA model file")
    n_in, n_out = struct.unpack_from("<II", buf, 4)
    expected = 12 + 8 * (n_in + n_out * n_in + n_out)
    if len(buf) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f8", offset=12).astype(np.float64)
    mean = arr[:n_in]
    comps = arr[n_in:n_in + n_out * n_in].reshape(n_out, n_in)
    ratios = arr[n_in + n_out * n_in:]
    return PcaModel(mean, comps, ratios)
