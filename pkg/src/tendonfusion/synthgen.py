"""Deterministic phantom cohorts with a planted healing trajectory.

Each patient gets a latent severity s(t) that decays monotonically from
about 7 toward 1 over the ten timepoints. Every label is an affine map of
s, the tendon's size, brightness and texture roughness grow with s, and
the deep activations carry s along six planted directions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_model import (DEEP_RAW_DIM, DEEP_REDUCED_DIM, MANIFEST_COLUMNS, PARAMETERS,
                         TIMEPOINTS)
from .errors import ConfigError, DataError
from .pgm import write_pgm

# label = 1 + slope * (s - 1) keeps every label inside [1, 7]
LABEL_SLOPES = {"sct": 1.0, "tt": 0.8, "ste": 0.6, "te": 0.9, "tu": 0.85, "tise": 0.7}

N_PLANTED = 6
# standard deviations of the planted deep components; distinct values keep
# them identifiable as separate principal directions
DEEP_SCALES = (6.0, 5.0, 4.0, 3.2, 2.5, 2.0)
SEVERITY_CENTER = 3.25
SEVERITY_SPREAD = 1.86
# per-slice image jitter, in units of the noise level
SIZE_JITTER = 2.5
GAIN_JITTER = 3.0
ROUGHNESS_JITTER = 5.0
# latent noise on the planted deep components, in units of the noise level
LATENT_NOISE = 0.5
LEDGER_COLUMNS = ("patient_id", "timepoint", "latent_severity") + PARAMETERS


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 48
    studies_per_patient: int = 10
    slices_min: int = 30
    slices_max: int = 50
    image_size: int = 64
    noise: float = 0.1
    deep_noise: float = 0.01
    deep_dim: int = DEEP_RAW_DIM
    seed: int = 0

    def __post_init__(self):
        if min(self.n_patients, self.studies_per_patient, self.slices_min, self.image_size) < 1:
            raise ConfigError("synthetic cohort counts must be positive")
        if self.studies_per_patient > len(TIMEPOINTS):
            raise ConfigError(f"at most {len(TIMEPOINTS)} studies per patient")
        if self.slices_max < self.slices_min:
            raise ConfigError("slices_max < slices_min")
        if self.noise < 0 or self.deep_noise < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.deep_dim not in (DEEP_RAW_DIM, DEEP_REDUCED_DIM):
            raise ConfigError(f"deep_dim must be {DEEP_RAW_DIM} or {DEEP_REDUCED_DIM}")
        if self.image_size < 48:
            raise ConfigError("image_size must be at least 48 to hold the phantom tendon")


def label_for(parameter, severity):
    return 1.0 + LABEL_SLOPES[parameter] * (severity - 1.0)


def severity_trajectory(rng, weeks):
    start = rng.uniform(5.5, 7.0)
    tau = rng.uniform(6.0, 16.0)
    return 1.0 + (start - 1.0) * np.exp(-np.asarray(weeks, float) / tau)


def planted_basis(dim, seed):
    """Fixed orthonormal directions and mean offset of the deep block."""
    rng = np.random.default_rng([seed, 0xDEE9])
    q, _ = np.linalg.qr(rng.normal(size=(dim, N_PLANTED)))
    offset = 0.05 * rng.normal(size=dim)
    return q, offset


def mixing_matrix():
    """Orthonormal 6x6 matrix whose first column is constant (a DCT-II basis,
    transposed). Column 0 carries severity, the rest carry nuisance, so every
    planted component holds the same share of the severity signal."""
    n = N_PLANTED
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c.T


def planted_latents(severity, positions, phases, rng, noise):
    """(n, 6) latent coordinates, each linear in severity.

    Severity (standardized) and five slice-position harmonics, which average
    to zero over a study, are rotated by :func:`mixing_matrix`; severity is
    recoverable only by combining all six components.
    """
    s = (np.asarray(severity, float) - SEVERITY_CENTER) / SEVERITY_SPREAD
    u = np.asarray(positions, float)[:, None]
    k = np.arange(1, N_PLANTED)[None, :]
    nuisance = np.sqrt(2.0) * np.cos(2 * np.pi * k * u + np.asarray(phases)[..., :N_PLANTED - 1])
    p = np.column_stack([s, nuisance]) @ mixing_matrix().T
    if noise > 0:
        p = p + noise * rng.normal(size=p.shape)
    return p * np.asarray(DEEP_SCALES)[None, :]


def planted_activations(latents, basis, offset, rng, deep_noise):
    X = offset + latents @ basis.T
    if deep_noise > 0:
        X = X + deep_noise * rng.normal(size=X.shape)
    return X


def _smooth_field(rng, size, width):
    """Gaussian-filtered white noise, unit variance."""
    white = rng.normal(size=(size, size))
    f = np.fft.fftfreq(size)
    f2 = f[:, None] ** 2 + f[None, :] ** 2
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * np.exp(-2 * np.pi ** 2 * width ** 2 * f2)))
    sd = field.std()
    return field / sd if sd > 0 else field


def _uniform_ranks(field):
    """Rank-transform to a uniform marginal on [-0.5, 0.5]; keeps the ROI's
    intensity range stable so co-occurrence contrast tracks roughness."""
    r = np.empty(field.size)
    r[np.argsort(field, axis=None, kind="stable")] = np.arange(field.size)
    return r.reshape(field.shape) / (field.size - 1) - 0.5


def texture_width(severity):
    """Filter width giving lag-1 decorrelation rising linearly from 0.03 to 0.6."""
    v = 0.03 + (severity - 1.0) / 6.0 * 0.57
    return np.sqrt(-1.0 / (4.0 * np.log(1.0 - v)))


def render_slice(severity, position, phase, rng, size=64, noise=0.1):
    """A 16-bit phantom axial slice and its tendon mask.

    The tendon is an ellipse that thickens with severity; its interior is a
    uniform-marginal texture that gets both rougher (shorter correlation
    length) and stronger as severity rises. ``noise`` scales the additive
    pixel noise and also per-slice jitter of size, gain and roughness, so at
    ``noise=0`` every image statistic is a deterministic function of severity
    and slice position.
    """
    s = severity
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cy = size / 2 + rng.normal(0, 1.0)
    cx = size / 2 + rng.normal(0, 1.0)
    thick = 1.0 + 0.12 * np.sin(2 * np.pi * position + phase)
    jitter = rng.normal(size=4)
    ax = (9.0 + 1.2 * s) * thick * np.exp(SIZE_JITTER * noise * jitter[0])
    by = (6.0 + 0.6 * s) * thick * np.exp(SIZE_JITTER * noise * jitter[1])
    mask = ((xx - cx) / ax) ** 2 + ((yy - cy) / by) ** 2 <= 1.0
    gain = np.exp(GAIN_JITTER * noise * jitter[2])
    background = 300.0 + 40.0 * _smooth_field(rng, size, 6.0)
    width = texture_width(s) * np.exp(ROUGHNESS_JITTER * noise * jitter[3])
    texture = _uniform_ranks(_smooth_field(rng, size, width))
    tendon = 600.0 + 90.0 * (s - 1.0) + (60.0 + 80.0 * (s - 1.0)) * texture
    img = gain * np.where(mask, tendon, background)
    if noise > 0:
        img = img + 40.0 * noise * rng.normal(size=img.shape)
    img = np.clip(np.rint(img), 0, 65535).astype(np.uint16)
    return img, mask


def _format_deep(row):
    return ",".join(map("{:.6g}".format, row)) + "\n"


@dataclass(frozen=True)
class SynthResult:
    root: Path
    manifest_path: Path
    ledger_path: Path
    planted_path: Path
    n_patients: int
    n_studies: int
    n_slices: int


def generate(config, outdir, header_comment=None):
    """Write a cohort tree: manifest.csv, ledger.csv, planted.json and the
    per-slice images, masks and deep blocks."""
    root = Path(outdir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory not writable: {exc}") from None

    if config.deep_dim == DEEP_REDUCED_DIM:
        # already "reduced": planted coordinates are the leading entries
        basis, offset = np.eye(DEEP_REDUCED_DIM)[:, :N_PLANTED], np.zeros(DEEP_REDUCED_DIM)
    else:
        basis, offset = planted_basis(DEEP_RAW_DIM, config.seed)
    timepoints = TIMEPOINTS[:config.studies_per_patient]
    weeks = [tp.weeks for tp in timepoints]
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_patients)

    manifest_rows = []
    ledger_rows = []
    n_slices = 0
    for pidx, ss in enumerate(seeds):
        pid = f"p{pidx:03d}"
        rng = np.random.default_rng(ss)
        traj = severity_trajectory(rng, weeks)
        for tp, s in zip(timepoints, traj):
            s = float(s)
            labels = [label_for(p, s) for p in PARAMETERS]
            ledger_rows.append([pid, tp.value, repr(s)] + [repr(v) for v in labels])
            n = int(rng.integers(config.slices_min, config.slices_max + 1))
            positions = (np.arange(n) + 0.5) / n
            study_phase = rng.uniform(0, 2 * np.pi)
            deep_phases = rng.uniform(0, 2 * np.pi, size=N_PLANTED)
            z = planted_latents(np.full(n, s), positions, deep_phases, rng,
                                LATENT_NOISE * config.noise)
            acts = planted_activations(z, basis, offset, rng, config.deep_noise)
            rel = Path(pid) / tp.value
            for sub in ("images", "masks", "deep"):
                (root / sub / rel).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                sid = f"{pid}_{tp.value}_{i:02d}"
                img, mask = render_slice(s, positions[i], study_phase, rng,
                                         config.image_size, config.noise)
                img_rel = (Path("images") / rel / f"{sid}.pgm").as_posix()
                mask_rel = (Path("masks") / rel / f"{sid}.pgm").as_posix()
                deep_rel = (Path("deep") / rel / f"{sid}.csv").as_posix()
                write_pgm(root / img_rel, img, 65535)
                write_pgm(root / mask_rel, mask.astype(np.uint8) * 255, 255)
                (root / deep_rel).write_text(_format_deep(acts[i]))
                manifest_rows.append([pid, tp.value, sid, img_rel, mask_rel, deep_rel]
                                     + [repr(v) for v in labels])
                n_slices += 1

    manifest_path = root / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(manifest_rows)
    ledger_path = root / "ledger.csv"
    with open(ledger_path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        w.writerows(ledger_rows)
    planted_path = root / "planted.json"
    planted = {
        "config": asdict(config),
        "label_slopes": LABEL_SLOPES,
        "deep_scales": DEEP_SCALES,
        "severity_center": SEVERITY_CENTER,
        "severity_spread": SEVERITY_SPREAD,
        "n_planted_deep": N_PLANTED,
        # the planted components dominate the deep variance with distinct
        # scales, so after PCA they are the leading components in order
        "informative_fused_indices": list(range(N_PLANTED)),
    }
    if header_comment:
        planted["stamp"] = header_comment
    planted_path.write_text(json.dumps(planted, indent=2, sort_keys=True) + "\n")
    return SynthResult(root, manifest_path, ledger_path, planted_path, config.n_patients,
                       len(ledger_rows), n_slices)


def read_ledger(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.append({"patient_id": r["patient_id"], "timepoint": r["timepoint"],
                     "latent_severity": float(r["latent_severity"]),
                     **{p: float(r[p]) for p in PARAMETERS}})
    return rows
