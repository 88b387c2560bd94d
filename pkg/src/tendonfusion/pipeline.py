"""Late fusion, per-parameter training, study scoring and evaluation."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import regressors
from .data_model import PARAMETER_LABELS, PARAMETERS, CohortManifest, Timepoint
from .errors import DataError, EmptySupportError, LeakageError
from .features import N_HANDCRAFTED
from .lasso import N_DEEP, LassoConfig, fit_lasso

N_FUSED = N_DEEP + N_HANDCRAFTED
DEFAULT_TRIM = 0.025
FISHER_CLIP = 1 - 1e-7


def fuse(deep, hand):
    """Deep block first (0-199), hand-crafted block after (200-245)."""
    deep = np.asarray(deep, dtype=np.float64).ravel()
    hand = np.asarray(getattr(hand, "values", hand), dtype=np.float64).ravel()
    if deep.size != N_DEEP or hand.size != N_HANDCRAFTED:
        raise DataError(f"fusion needs {N_DEEP} + {N_HANDCRAFTED} values, got {deep.size} + {hand.size}")
    return np.concatenate([deep, hand])


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Fused feature rows keyed by slice id."""

    slice_ids: tuple
    X: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "slice_ids", tuple(self.slice_ids))
        X = np.asarray(self.X, dtype=np.float64)
        if X.shape != (len(self.slice_ids), N_FUSED):
            raise DataError(f"feature table must be {len(self.slice_ids)} x {N_FUSED}")
        if not np.all(np.isfinite(X)):
            raise DataError("feature table contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.slice_ids)})
        if len(self.index) != len(self.slice_ids):
            raise DataError("duplicate slice ids in feature table")

    @classmethod
    def from_blocks(cls, deep: Mapping[str, np.ndarray], hand: Mapping[str, np.ndarray], slice_ids):
        missing = [s for s in slice_ids if s not in deep or s not in hand]
        if missing:
            raise DataError(f"{len(missing)} slices lack features, e.g. {missing[0]}")
        X = np.vstack([fuse(deep[s], hand[s]) for s in slice_ids]) if slice_ids else np.zeros((0, N_FUSED))
        return cls(tuple(slice_ids), X)

    def rows(self, slice_ids):
        try:
            return self.X[[self.index[s] for s in slice_ids]]
        except KeyError as exc:
            raise DataError(f"no features for slice {exc.args[0]}") from None


def trim_count_for(n, trim=DEFAULT_TRIM, count=None):
    """Items removed from each end of n sorted scores."""
    if count is not None:
        if count < 0:
            raise ValueError("trim count must be nonnegative")
        return min(count, (n - 1) // 2)
    if not 0 <= trim < 0.5:
        raise ValueError("trim fraction must be in [0, 0.5)")
    # guard against 0.025 * 80 landing a hair under 2
    return int(math.floor(trim * n + 1e-9))


def trimmed_mean(scores, trim=DEFAULT_TRIM, count=None):
    """Mean after dropping the k lowest and k highest scores."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise DataError("trimmed mean of an empty list")
    k = trim_count_for(s.size, trim, count)
    kept = s[k:s.size - k]
    return math.fsum(kept) / kept.size


@dataclass(frozen=True, eq=False)
class ParameterModel:
    parameter: str
    lasso: object
    regressor: object
    trim: float = DEFAULT_TRIM
    trim_count: int | None = None
    clamp: bool = False

    def __post_init__(self):
        if self.parameter not in PARAMETERS:
            raise DataError(f"unknown parameter {self.parameter!r}")
        if self.regressor.n_inputs != len(self.support):
            raise DataError("regressor input size does not match the LASSO support")

    @property
    def support(self):
        return self.lasso.support

    def score_slices(self, slice_ids, X):
        X = np.asarray(X, dtype=np.float64)
        return np.atleast_1d(self.regressor.predict(X[:, list(self.support)], clamp=self.clamp))


@dataclass(frozen=True)
class StudyAssessment:
    patient_id: str
    timepoint: Timepoint
    h: dict
    slice_scores: dict = field(repr=False, default_factory=dict)

    @property
    def study_id(self):
        return f"{self.patient_id}/{self.timepoint.value}"


def assess_study(models: Mapping[str, object], study, table: FeatureTable):
    """Score every slice of a study and aggregate each parameter by trimmed mean."""
    if not study.slices:
        raise DataError(f"study {study.study_id} has no slices")
    X = table.rows(study.slices)
    h = {}
    raw = {}
    for param, model in models.items():
        scores = model.score_slices(study.slices, X)
        raw[param] = scores
        h[param] = trimmed_mean(scores, model.trim, model.trim_count)
    return StudyAssessment(study.patient_id, study.timepoint, h, raw)


def design_matrix(manifest: CohortManifest, table: FeatureTable, parameter):
    """Slice rows with the study label replicated onto every slice."""
    ids, y = [], []
    for st in manifest.studies:
        if st.labels is None:
            raise DataError(f"study {st.study_id} has no labels")
        ids.extend(st.slices)
        y.extend([st.labels[parameter]] * len(st.slices))
    return ids, table.rows(ids), np.asarray(y, dtype=np.float64)


def train_parameter_model(manifest, table, parameter, lasso_config=None, spec=None, seed=0,
                          trim=DEFAULT_TRIM, trim_count=None, clamp=False, lasso_model=None):
    """LASSO selection on all training slices, then the regressor on the support."""
    lasso_config = lasso_config or LassoConfig()
    spec = spec or regressors.RegressorSpec()
    _, X, y = design_matrix(manifest, table, parameter)
    lasso = lasso_model if lasso_model is not None else fit_lasso(X, y, lasso_config)
    support = list(lasso.support)
    if not support:
        raise EmptySupportError(
            f"alpha too large for this parameter ({PARAMETER_LABELS[parameter]}, alpha={lasso.alpha})")
    reg = regressors.fit(spec, X[:, support], y, seed=seed)
    return ParameterModel(parameter, lasso, reg, trim, trim_count, clamp)


def train_all(manifest, table, lasso_config=None, spec=None, seed=0, trim=DEFAULT_TRIM,
              trim_count=None, clamp=False, parameters=PARAMETERS):
    return {p: train_parameter_model(manifest, table, p, lasso_config, spec, seed, trim,
                                     trim_count, clamp) for p in parameters}


def assess_manifest(models, manifest, table):
    return [assess_study(models, st, table) for st in manifest.studies]


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSummary:
    mae: float
    mae_sem: float
    max_ae: float
    corr: float
    n_studies: int
    n_patients_corr: int
    n_excluded: int = 0


def fisher_mean(rs):
    """tanh of the mean Fisher z, with |r| clipped just below 1."""
    z = [math.atanh(min(max(r, -FISHER_CLIP), FISHER_CLIP)) for r in rs]
    return math.tanh(math.fsum(z) / len(z))


def evaluate(predicted, truth, patient_ids):
    """MAE (with standard error), max absolute error, and per-patient Pearson
    correlation aggregated in Fisher z space.

    Patients with fewer than two studies, or with a constant sequence on
    either side, do not enter the correlation and are counted as excluded.
    """
    h = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    pids = list(patient_ids)
    if h.shape != gt.shape or h.ndim != 1 or len(pids) != h.size:
        raise DataError("predictions, ground truth and patient ids must align")
    if h.size == 0:
        raise DataError("nothing to evaluate")
    err = np.abs(h - gt)
    mae = math.fsum(err) / err.size
    sem = float(np.std(err, ddof=1) / math.sqrt(err.size)) if err.size > 1 else 0.0
    rs = []
    excluded = 0
    for pid in sorted(set(pids)):
        m = np.array([p == pid for p in pids])
        a, b = h[m], gt[m]
        if a.size < 2:
            excluded += 1
            continue
        da, db = a - a.mean(), b - b.mean()
        denom = math.sqrt(float(da @ da) * float(db @ db))
        if denom == 0.0:
            excluded += 1
            continue
        rs.append(float(da @ db) / denom)
    corr = fisher_mean(rs) if rs else float("nan")
    return MetricSummary(mae, sem, float(err.max()), corr, int(h.size), len(rs), excluded)


def evaluate_assessments(assessments: Sequence[StudyAssessment], manifest, parameter):
    labels = {st.study_id: st.labels for st in manifest.studies}
    h = [a.h[parameter] for a in assessments]
    gt = [labels[a.study_id][parameter] for a in assessments]
    return evaluate(h, gt, [a.patient_id for a in assessments])


@dataclass
class EvalReport:
    """Metric summaries keyed by (parameter, model name)."""

    cells: dict = field(default_factory=dict)

    def add(self, parameter, model_name, summary):
        self.cells[(parameter, model_name)] = summary

    @property
    def models(self):
        seen = []
        for _, m in self.cells:
            if m not in seen:
                seen.append(m)
        return seen

    def render_text(self, parameters=PARAMETERS):
        width = 12
        head = f"{'Model':<10}{'':<8}" + "".join(f"{PARAMETER_LABELS[p]:>{width}}" for p in parameters)
        lines = [head, "-" * len(head)]
        for m in self.models:
            rows = {"MAE": [], "MAX-AE": [], "Corr": []}
            for p in parameters:
                s = self.cells.get((p, m))
                if s is None:
                    for r in rows.values():
                        r.append("-")
                    continue
                rows["MAE"].append(f"{s.mae:.2f}±{s.mae_sem:.2f}")
                rows["MAX-AE"].append(f"{s.max_ae:.2f}")
                rows["Corr"].append(f"{s.corr:.2f}")
            for k, (metric, vals) in enumerate(rows.items()):
                lines.append(f"{m if k == 0 else '':<10}{metric:<8}" + "".join(f"{v:>{width}}" for v in vals))
            lines.append("-" * len(head))
        lines.append("MAE shown as mean ± standard error of the mean; Corr is the Fisher-z mean "
                     "of per-patient Pearson r.")
        return "\n".join(lines) + "\n"

    def write_csv(self, path, stamp=None, parameters=PARAMETERS):
        with open(path, "w", newline="") as fh:
            if stamp:
                fh.write(f"# {stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("model", "metric") + tuple(PARAMETER_LABELS[p] for p in parameters))
            for m in self.models:
                cells = [self.cells.get((p, m)) for p in parameters]
                w.writerow((m, "MAE") + tuple("" if c is None else f"{c.mae:.6f}" for c in cells))
                w.writerow((m, "MAE_SEM") + tuple("" if c is None else f"{c.mae_sem:.6f}" for c in cells))
                w.writerow((m, "MAX-AE") + tuple("" if c is None else f"{c.max_ae:.6f}" for c in cells))
                w.writerow((m, "Corr") + tuple("" if c is None else f"{c.corr:.6f}" for c in cells))


# -- cross-validation ----------------------------------------------------------------

def fold_seed(seed, patients):
    """Seed derived from fold content so results do not depend on fold order."""
    blob = f"{seed}:{','.join(sorted(patients))}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


def check_no_leakage(train_manifest, eval_manifest):
    shared = set(train_manifest.patients) & set(eval_manifest.patients)
    if shared:
        raise LeakageError(f"patients on both sides of a fold: {', '.join(sorted(shared))}")
    shared_slices = set(train_manifest.slice_ids) & set(eval_manifest.slice_ids)
    if shared_slices:
        raise LeakageError(f"{len(shared_slices)} slices on both sides of a fold")


@dataclass(frozen=True)
class CvCell:
    alpha: float
    kind: str
    parameter: str
    summary: MetricSummary
    fold_summaries: tuple
    support_sizes: tuple


@dataclass
class CvResult:
    cells: list
    folds: list
    studies_evaluated: dict

    def report(self):
        rep = EvalReport()
        for c in self.cells:
            rep.add(c.parameter, f"{c.kind} a={c.alpha:g}", c.summary)
        return rep

    def write_csv(self, path, stamp=None):
        with open(path, "w", newline="") as fh:
            if stamp:
                fh.write(f"# {stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("alpha", "kind", "parameter", "mae", "mae_sem", "max_ae", "corr", "mean_support"))
            for c in self.cells:
                s = c.summary
                w.writerow((f"{c.alpha:g}", c.kind, PARAMETER_LABELS[c.parameter], f"{s.mae:.6f}",
                            f"{s.mae_sem:.6f}", f"{s.max_ae:.6f}", f"{s.corr:.6f}",
                            f"{np.mean(c.support_sizes):.2f}"))


def _mean(values):
    return math.fsum(values) / len(values)


def _default_trainer(train_manifest, table, parameter, lasso_config, spec, seed, cache):
    key = (frozenset(train_manifest.patients), parameter, lasso_config)
    lasso_model = cache.get(key)
    if lasso_model is None:
        _, X, y = design_matrix(train_manifest, table, parameter)
        lasso_model = cache[key] = fit_lasso(X, y, lasso_config)
    return train_parameter_model(train_manifest, table, parameter, lasso_config, spec, seed,
                                 lasso_model=lasso_model)


def cross_validate(manifest, table, grid, k=4, seed=0, folds=None, parameters=PARAMETERS,
                   lasso_base=None, trainer: Callable | None = None, trim=DEFAULT_TRIM,
                   trim_count=None, clamp=False):
    """Grid cross-validation over (alpha, RegressorSpec) pairs with patient-grouped folds.

    Each fold trains on the union of the other folds and scores every study
    of its own patients; the metrics of a cell are plain means over folds.
    """
    if folds is None:
        from .data_model import make_folds
        folds = make_folds(manifest, k, seed)
    folds = [frozenset(f) for f in folds]
    known = set(manifest.patients)
    for f in folds:
        if not f <= known:
            raise DataError(f"fold references unknown patients: {sorted(f - known)}")
    lasso_base = lasso_base or LassoConfig()
    cache = {}
    per_cell = {}
    studies_evaluated = {}
    for i, f in enumerate(folds):
        train_patients = set().union(*(g for j, g in enumerate(folds) if j != i))
        train_m = manifest.subset(train_patients)
        eval_m = manifest.subset(f)
        check_no_leakage(train_m, eval_m)
        fseed = fold_seed(seed, f)
        for alpha, spec in grid:
            cfg = LassoConfig(alpha, lasso_base.tol, lasso_base.max_sweeps, lasso_base.standardize)
            for param in parameters:
                if trainer is None:
                    model = _default_trainer(train_m, table, param, cfg, spec, fseed, cache)
                else:
                    model = trainer(train_m, table, param, cfg, spec, fseed)
                if trim_count is not None or trim != DEFAULT_TRIM or clamp:
                    model = _with_scoring(model, trim, trim_count, clamp)
                assessments = [assess_study({param: model}, st, table) for st in eval_m.studies]
                for a in assessments:
                    key = (alpha, _kind_name(spec), param, a.study_id)
                    studies_evaluated[key] = studies_evaluated.get(key, 0) + 1
                summary = evaluate_assessments(assessments, eval_m, param)
                support = len(getattr(model, "support", ()))
                per_cell.setdefault((alpha, _kind_name(spec), param), []).append((summary, support))
    cells = []
    for (alpha, kind, param), items in per_cell.items():
        sums = [s for s, _ in items]
        corr_vals = [s.corr for s in sums if not math.isnan(s.corr)]
        mean = MetricSummary(
            _mean([s.mae for s in sums]), _mean([s.mae_sem for s in sums]),
            _mean([s.max_ae for s in sums]),
            _mean(corr_vals) if corr_vals else float("nan"),
            sum(s.n_studies for s in sums), sum(s.n_patients_corr for s in sums),
            sum(s.n_excluded for s in sums))
        cells.append(CvCell(alpha, kind, param, mean, tuple(sums), tuple(n for _, n in items)))
    return CvResult(cells, folds, studies_evaluated)


def _kind_name(spec):
    return getattr(getattr(spec, "kind", spec), "value", str(spec))


def _with_scoring(model, trim, trim_count, clamp):
    if isinstance(model, ParameterModel):
        return replace(model, trim=trim, trim_count=trim_count, clamp=clamp)
    model.trim, model.trim_count, model.clamp = trim, trim_count, clamp
    return model


# -- assessment files ---------------------------------------------------------------

ASSESSMENT_COLUMNS = ("patient_id", "timepoint", "parameter", "H", "ground_truth")


def write_assessments(path, assessments, manifest=None, stamp=None, parameters=PARAMETERS):
    labels = {st.study_id: st.labels for st in manifest.studies} if manifest is not None else {}
    with open(path, "w", newline="") as fh:
        if stamp:
            fh.write(f"# {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSESSMENT_COLUMNS)
        for a in assessments:
            lab = labels.get(a.study_id)
            for p in parameters:
                if p in a.h:
                    gt = "" if lab is None else repr(float(lab[p]))
                    w.writerow((a.patient_id, a.timepoint.value, PARAMETER_LABELS[p], repr(float(a.h[p])), gt))


def read_assessments(path):
    """Return (stamp or None, list of row dicts)."""
    stamp = None
    with open(path, newline="") as fh:
        first = fh.readline()
        lines = [] if first.startswith("#") else [first]
        if first.startswith("#"):
            stamp = first[1:].strip()
        lines.extend(fh)
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != ASSESSMENT_COLUMNS:
        raise DataError(f"{path}: bad assessment header")
    by_label = {v: k for k, v in PARAMETER_LABELS.items()}
    rows = []
    for r in reader:
        rows.append({"patient_id": r["patient_id"], "timepoint": r["timepoint"],
                     "parameter": by_label[r["parameter"]], "H": float(r["H"]),
                     "ground_truth": float(r["ground_truth"]) if r["ground_truth"] else None})
    return stamp, rows


def report_from_assessments(named_rows: Mapping[str, list]):
    rep = EvalReport()
    for name, rows in named_rows.items():
        for p in PARAMETERS:
            sel = [r for r in rows if r["parameter"] == p and r["ground_truth"] is not None]
            if sel:
                rep.add(p, name, evaluate([r["H"] for r in sel], [r["ground_truth"] for r in sel],
                                          [r["patient_id"] for r in sel]))
    return rep
