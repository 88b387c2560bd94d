"""Hand-crafted ROI features: intensity statistics and co-occurrence texture.

Texture features follow Haralick's definitions on a symmetric GLCM with
gray levels numbered from 1. Counts from the four directions are pooled
before normalization, and a pixel pair is counted only when both ends lie
inside the ROI.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyRoiError, NoPairsError

ROI_STAT_NAMES = ("area", "min", "max", "mean", "std", "skewness", "kurtosis",
                  "p25", "median", "p75")
HARALICK_NAMES = ("asm", "contrast", "correlation", "variance", "idm", "sum_average",
                  "sum_variance", "sum_entropy", "entropy", "difference_variance",
                  "difference_entropy", "max_probability")
DEFAULT_DISTANCES = (1, 5, 10)
UNIT_DIRECTIONS = ((1, 0), (1, 1), (0, 1), (-1, 1))  # (dx, dy): column, row step

FEATURE_NAMES = ROI_STAT_NAMES + tuple(
    f"{name}_d{d}" for d in DEFAULT_DISTANCES for name in HARALICK_NAMES)
N_HANDCRAFTED = len(FEATURE_NAMES)


@dataclass(frozen=True)
class GlcmConfig:
    distance: int = 1
    levels: int = 64
    symmetric: bool = True
    directions: tuple = UNIT_DIRECTIONS

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.distance < 1:
            raise ValueError("distance must be >= 1")
        object.__setattr__(self, "directions", tuple(tuple(d) for d in self.directions))

    @property
    def offsets(self):
        return tuple((dx * self.distance, dy * self.distance) for dx, dy in self.directions)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_configs(levels=64, distances=DEFAULT_DISTANCES):
    return tuple(GlcmConfig(distance=d, levels=levels) for d in distances)


@dataclass(frozen=True, eq=False)
class GlcmMatrix:
    probs: np.ndarray
    pair_count: int


@dataclass(frozen=True, eq=False)
class HandcraftedVector:
    values: np.ndarray
    flags: tuple = field(default=())

    def as_dict(self):
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def _roi_values(slice_):
    if not slice_.roi.any():
        raise EmptyRoiError(f"slice {slice_.slice_id}: empty ROI")
    return slice_.intensities[slice_.roi].astype(np.float64)


def roi_statistics(slice_):
    """The ten ROI intensity statistics, plus a flag for zero-spread ROIs.

    Standard deviation is the population value; skewness and kurtosis are
    the plain third and fourth standardized moments, reported as 0 when
    the ROI has no spread.
    """
    v = _roi_values(slice_)
    n = v.size
    mean = v.mean()
    d = v - mean
    m2 = np.dot(d, d) / n
    degenerate = bool(v.max() == v.min())
    if degenerate:
        std = skew = kurt = 0.0
    else:
        std = np.sqrt(m2)
        d2 = d * d
        skew = np.dot(d2, d) / n / m2 ** 1.5
        kurt = np.dot(d2, d2) / n / (m2 * m2)
    p25, med, p75 = np.percentile(v, (25, 50, 75))
    stats = np.array([n, v.min(), v.max(), mean, std, skew, kurt, p25, med, p75], dtype=float)
    return stats, degenerate


def quantize(slice_, levels):
    """ROI-relative min-max binning into 0..levels-1; -1 outside the ROI."""
    img = slice_.intensities.astype(np.int64)
    roi = slice_.roi
    vals = img[roi]
    if vals.size == 0:
        raise EmptyRoiError(f"slice {slice_.slice_id}: empty ROI")
    lo, hi = int(vals.min()), int(vals.max())
    q = np.full(img.shape, -1, dtype=np.int64)
    if hi == lo:
        q[roi] = 0
    else:
        # integer arithmetic keeps bin edges exact
        q[roi] = np.minimum((img[roi] - lo) * levels // (hi - lo), levels - 1)
    return q


def _crop_to_roi(q):
    rows = np.flatnonzero((q >= 0).any(axis=1))
    cols = np.flatnonzero((q >= 0).any(axis=0))
    return q[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def glcm_counts(q, offsets, levels, symmetric=True):
    """Integer co-occurrence counts for a quantized image (-1 = outside ROI)."""
    h, w = q.shape
    counts = np.zeros(levels * levels, dtype=np.int64)
    for dx, dy in offsets:
        if abs(dx) >= w or abs(dy) >= h:
            continue
        a = q[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
        b = q[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
        ok = (a >= 0) & (b >= 0)
        counts += np.bincount(a[ok] * levels + b[ok], minlength=levels * levels)
    counts = counts.reshape(levels, levels)
    if symmetric:
        counts = counts + counts.T
    return counts


def compute_glcm(slice_, config):
    q = _crop_to_roi(quantize(slice_, config.levels))
    counts = glcm_counts(q, config.offsets, config.levels, config.symmetric)
    total = int(counts.sum())
    if total == 0:
        raise NoPairsError(
            f"slice {slice_.slice_id}: no co-occurring pairs at distance {config.distance}")
    return GlcmMatrix(counts / total, total)


_INDEX_CACHE = {}


def _indices(levels):
    if levels not in _INDEX_CACHE:
        i, j = np.indices((levels, levels))
        i = i + 1
        j = j + 1
        _INDEX_CACHE[levels] = (i, j, (i + j - 2).ravel(), np.abs(i - j).ravel())
    return _INDEX_CACHE[levels]


def _entropy(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def haralick_features(glcm):
    """Twelve texture descriptors from a normalized GLCM, in HARALICK_NAMES order."""
    p = np.asarray(glcm.probs if isinstance(glcm, GlcmMatrix) else glcm, dtype=np.float64)
    levels = p.shape[0]
    i, j, sum_idx, diff_idx = _indices(levels)
    g = np.arange(1, levels + 1, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mux = g @ px
    muy = g @ py
    sx = np.sqrt(((g - mux) ** 2) @ px)
    sy = np.sqrt(((g - muy) ** 2) @ py)
    pflat = p.ravel()

    asm = float(pflat @ pflat)
    contrast = float(np.sum((i - j) ** 2 * p))
    if sx * sy < 1e-12:
        correlation = 0.0
    else:
        correlation = float((np.sum(i * j * p) - mux * muy) / (sx * sy))
    variance = float(((g - mux) ** 2) @ px)
    idm = float(np.sum(p / (1.0 + (i - j) ** 2)))

    p_sum = np.bincount(sum_idx, weights=pflat, minlength=2 * levels - 1)
    k_sum = np.arange(2, 2 * levels + 1, dtype=np.float64)
    sum_average = float(k_sum @ p_sum)
    sum_variance = float(((k_sum - sum_average) ** 2) @ p_sum)
    sum_entropy = _entropy(p_sum)
    entropy = _entropy(pflat)

    p_diff = np.bincount(diff_idx, weights=pflat, minlength=levels)
    k_diff = np.arange(levels, dtype=np.float64)
    mu_diff = k_diff @ p_diff
    difference_variance = float(((k_diff - mu_diff) ** 2) @ p_diff)
    difference_entropy = _entropy(p_diff)
    max_probability = float(pflat.max())

    return np.array([asm, contrast, correlation, variance, idm, sum_average, sum_variance,
                     sum_entropy, entropy, difference_variance, difference_entropy,
                     max_probability])


def extract_handcrafted(slice_, configs=None):
    """All 46 features for one slice.

    A distance at which the ROI has no valid pixel pair contributes zeros
    and a ``no_pairs_d<d>`` flag instead of failing the slice.
    """
    if configs is None:
        configs = default_configs()
    stats, degenerate = roi_statistics(slice_)
    blocks = [stats]
    flags = ["degenerate_moments"] if degenerate else []
    q = _crop_to_roi(quantize(slice_, configs[0].levels))
    for cfg in configs:
        if cfg.levels != configs[0].levels:
            q = _crop_to_roi(quantize(slice_, cfg.levels))
        counts = glcm_counts(q, cfg.offsets, cfg.levels, cfg.symmetric)
        total = int(counts.sum())
        if total == 0:
            blocks.append(np.zeros(len(HARALICK_NAMES)))
            flags.append(f"no_pairs_d{cfg.distance}")
        else:
            blocks.append(haralick_features(counts / total))
    values = np.concatenate(blocks)
    if not np.all(np.isfinite(values)):
        raise DataError(f"slice {slice_.slice_id}: non-finite feature")
    values.setflags(write=False)
    return HandcraftedVector(values, tuple(flags))


def feature_names(configs):
    return ROI_STAT_NAMES + tuple(
        f"{name}_d{cfg.distance}" for cfg in configs for name in HARALICK_NAMES)


def write_feature_csv(path, rows, names=FEATURE_NAMES, stamp=None):
    """Write ``(slice_id, values)`` rows; floats use repr so they round-trip."""
    with open(path, "w", newline="") as fh:
        if stamp:
            fh.write(f"# {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("slice_id",) + tuple(names))
        for sid, values in rows:
            w.writerow([sid] + [repr(float(v)) for v in values])


def read_feature_csv(path):
    """Return (stamp or None, names, {slice_id: ndarray})."""
    stamp = None
    out = {}
    with open(Path(path), newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            stamp = first[1:].strip()
            header = next(csv.reader([fh.readline()]))
        else:
            header = next(csv.reader([first]))
        names = tuple(header[1:])
        for rec in csv.reader(fh):
            if rec:
                out[rec[0]] = np.array([float(v) for v in rec[1:]])
    return stamp, names, out
