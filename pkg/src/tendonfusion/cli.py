"""Command-line front end.

    tendonfusion [--config run.json] [--threads N] [--clamp-17] [--trim-count K] <subcommand>

Subcommands: synth, extract, pca, train, cv, assess, report. Everything except
paths lives in the JSON config; every artifact carries a
``config_hash=<hex> seed=<n>`` stamp and downstream steps refuse inputs whose
stamp differs from the current run.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import batch
from .bundle import load_bundle, save_bundle
from .data_model import (DEEP_REDUCED_DIM, PARAMETER_LABELS, PARAMETERS, choose_holdout,
                         load_manifest, split_test_holdout)
from .errors import ConfigError, DataError, StampMismatchError, TendonFusionError
from .features import GlcmConfig, feature_names, read_feature_csv, write_feature_csv
from .lasso import LassoConfig, selected_features, write_selection_report
from .pca import load_pca, save_pca
from .pipeline import (DEFAULT_TRIM, EvalReport, FeatureTable, assess_manifest, cross_validate,
                       evaluate, read_assessments, train_parameter_model, write_assessments)
from .regressors import RegressorSpec
from .synthgen import SynthConfig, generate

log = logging.getLogger("tendonfusion")

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {"n_patients": 48, "studies_per_patient": 10, "slices_min": 30, "slices_max": 50,
              "image_size": 64, "noise": 0.1, "deep_noise": 0.01, "deep_dim": 4096},
    "glcm": {"levels": 64, "distances": [1, 5, 10], "symmetric": True},
    "pca": {"n_components": DEEP_REDUCED_DIM, "max_rows": 2000},
    "lasso": {"alpha": 0.1, "tol": 1e-6, "max_sweeps": 10000, "standardize": True,
              "per_parameter": {}},
    "regressor": RegressorSpec(kind="SVR").to_dict(),
    "trim": DEFAULT_TRIM,
    "holdout": {"count": 4},
    "cv": {"alphas": [0.05, 0.1, 0.2], "kinds": ["LR", "Poly2", "SVR", "MLP4"], "k": 4},
    "paths": {"cohort": "cohort", "manifest": None, "features": "features", "models": "models",
              "reports": "reports"},
}


def _merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r}")
        # holdout and per-parameter overrides are replaced wholesale, not merged
        if isinstance(base[key], dict) and key not in ("per_parameter", "holdout"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    base_dir: Path
    clamp: bool = False
    trim_count: int | None = None

    # -- parsed views ------------------------------------------------------------

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def synth(self):
        return SynthConfig(**self.raw["synth"], seed=self.seed)

    @property
    def glcm(self):
        g = self.raw["glcm"]
        return tuple(GlcmConfig(distance=int(d), levels=int(g["levels"]), symmetric=bool(g["symmetric"]))
                     for d in g["distances"])

    def lasso_for(self, parameter, alpha=None):
        las = self.raw["lasso"]
        if alpha is None:
            alpha = las["per_parameter"].get(parameter, las["alpha"])
        return LassoConfig(float(alpha), float(las["tol"]), int(las["max_sweeps"]),
                           bool(las["standardize"]))

    def regressor(self, kind=None):
        d = dict(self.raw["regressor"])
        if kind is not None:
            d["kind"] = kind
        return RegressorSpec(**d)

    @property
    def cv_grid(self):
        cv = self.raw["cv"]
        return [(float(a), self.regressor(k)) for a in cv["alphas"] for k in cv["kinds"]]

    def path(self, key):
        value = self.raw["paths"][key]
        if value is None and key == "manifest":
            return self.path("cohort") / "manifest.csv"
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def glcm_digest(self):
        blob = "|".join(c.digest() for c in self.glcm)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- provenance --------------------------------------------------------------

    @property
    def config_hash(self):
        body = {k: v for k, v in self.raw.items() if k != "paths"}
        body["clamp_17"] = self.clamp
        body["trim_count"] = self.trim_count
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def stamp(self):
        return f"config_hash={self.config_hash} seed={self.seed}"

    def check_stamp(self, found, what):
        if found != self.stamp:
            raise StampMismatchError(
                f"{what} was produced under '{found or 'no stamp'}', current run is '{self.stamp}'")

    def validate(self):
        try:
            self.synth
            self.glcm
            for p in PARAMETERS:
                self.lasso_for(p)
            self.cv_grid
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        unknown = set(self.raw["lasso"]["per_parameter"]) - set(PARAMETERS)
        if unknown:
            raise ConfigError(f"lasso.per_parameter: unknown parameter(s) {sorted(unknown)}")
        if not 0 <= float(self.raw["trim"]) < 0.5:
            raise ConfigError("trim must be in [0, 0.5)")
        if self.trim_count is not None and self.trim_count < 0:
            raise ConfigError("--trim-count must be nonnegative")
        hold = self.raw["holdout"]
        if not isinstance(hold, dict) or set(hold) - {"count", "patients", "seed"}:
            raise ConfigError("holdout must be {\"count\": n} or {\"patients\": [...]}")
        if int(self.raw["cv"]["k"]) < 2:
            raise ConfigError("cv.k must be at least 2")
        return self


def load_run_config(path=None, workdir=None, clamp=False, trim_count=None, manifest=None):
    raw = {}
    base = Path(workdir) if workdir else Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if workdir is None:
            base = path.resolve().parent
    merged = _merge(DEFAULT_CONFIG, raw)
    if manifest is not None:
        merged["paths"]["manifest"] = str(Path(manifest).resolve())
    return RunConfig(merged, base.resolve(), clamp, trim_count).validate()


# -- shared helpers -----------------------------------------------------------------

def _manifest(run, labels=True):
    return load_manifest(run.path("manifest"), require_labels=labels, read_labels=labels)


def _holdout_ids(run, manifest):
    hold = run.raw["holdout"]
    if "patients" in hold:
        return sorted(hold["patients"])
    return choose_holdout(manifest, int(hold.get("count", 0)), int(hold.get("seed", run.seed)))


def _split(run, manifest):
    return split_test_holdout(manifest, _holdout_ids(run, manifest))


def _feature_cache_path(run):
    return run.path("features") / f"handcrafted-{run.glcm_digest}.csv"


def _deep_path(run):
    return run.path("features") / "deep-pca.csv"


def _read_stamped_csv(run, path, what):
    if not path.is_file():
        raise DataError(f"{what} not found at {path}; run the earlier step first")
    stamp, names, rows = read_feature_csv(path)
    run.check_stamp(stamp, what)
    return names, rows


def _write_text(path, text, run):
    Path(path).write_text(f"# {run.stamp}\n{text}")


def _feature_table(run, manifest, compute_missing=False, threads=1):
    """Fused table for the manifest's slices from the stamped caches.

    With ``compute_missing`` slices absent from the caches (for example a
    manifest that was never run through ``extract``) are computed on the fly.
    """
    sids = manifest.slice_ids
    _, hand = _read_stamped_csv(run, _feature_cache_path(run), "hand-crafted feature cache")
    _, deep = _read_stamped_csv(run, _deep_path(run), "reduced deep features")
    missing_hand = [s for s in sids if s not in hand]
    missing_deep = [s for s in sids if s not in deep]
    if (missing_hand or missing_deep) and not compute_missing:
        raise DataError(f"{len(set(missing_hand) | set(missing_deep))} slices have no cached features; "
                        "run extract and pca")
    if missing_hand:
        values, _ = batch.extract_all(manifest, run.glcm, threads, missing_hand)
        hand.update(values)
    if missing_deep:
        ids, X, kind = batch.load_deep_matrix(manifest, missing_deep)
        model = None
        if kind == "fc6":
            model = _load_stamped_pca(run)
        deep.update(zip(ids, batch.reduce_deep(X, kind, model)))
    return FeatureTable.from_blocks(deep, hand, sids)


def _load_stamped_pca(run):
    meta_path = run.path("models") / "pca.json"
    if not meta_path.is_file():
        raise DataError("no PCA model; run the pca step first")
    run.check_stamp(json.loads(meta_path.read_text()).get("stamp"), "PCA model")
    return load_pca(run.path("models") / "pca.model")


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(run, args):
    res = generate(run.synth, run.path("cohort"), header_comment=run.stamp)
    log.info("wrote %d patients, %d studies, %d slices to %s", res.n_patients, res.n_studies,
             res.n_slices, res.root)
    print(f"synth: {res.n_patients} patients, {res.n_studies} studies, {res.n_slices} slices -> {res.root}")


def cmd_extract(run, args):
    manifest = _manifest(run, labels=False)
    out = _feature_cache_path(run)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = feature_names(run.glcm)
    cached = {}
    if out.is_file():
        # the file name already pins the co-occurrence settings, so rows stay valid
        _, cached_names, cached = read_feature_csv(out)
        if cached_names != names:
            cached = {}
    todo = [s for s in manifest.slice_ids if s not in cached]
    values, flags = batch.extract_all(manifest, run.glcm, args.threads, todo)
    cached.update(values)
    order = sorted(cached)
    write_feature_csv(out, [(s, cached[s]) for s in order], names, stamp=run.stamp)
    if flags:
        with open(out.with_suffix(".flags.csv"), "w", newline="") as fh:
            fh.write(f"# {run.stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("slice_id", "flags"))
            for sid in sorted(flags):
                w.writerow((sid, ";".join(flags[sid])))
    print(f"extract: {len(todo)} computed, {len(manifest.slice_ids) - len(todo)} cached -> {out}")


def cmd_pca(run, args):
    manifest = _manifest(run, labels=False)
    train, _ = _split(run, manifest)
    sids, X, kind = batch.load_deep_matrix(manifest)
    model_dir = run.path("models")
    model_dir.mkdir(parents=True, exist_ok=True)
    if kind == "fc6":
        rows = np.isin(sids, list(train.slice_ids))
        cfg = run.raw["pca"]
        model = batch.fit_pca_subsample(X[rows], int(cfg["n_components"]), int(cfg["max_rows"]),
                                        run.seed)
        save_pca(model, model_dir / "pca.model")
        meta = {"stamp": run.stamp, "n_in": model.n_in, "n_out": model.n_out,
                "explained_variance_ratio_top10": [float(v) for v in model.explained_variance_ratio[:10]],
                "rank_deficient": bool(model.rank_deficient)}
        (model_dir / "pca.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        reduced = batch.reduce_deep(X, kind, model)
        note = f"fitted on {int(rows.sum())} training slices"
    else:
        reduced = X
        note = "blocks already reduced, passed through"
    out = _deep_path(run)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = tuple(f"pc{i:03d}" for i in range(reduced.shape[1]))
    write_feature_csv(out, zip(sids, reduced), names, stamp=run.stamp)
    print(f"pca: {note} -> {out}")


def cmd_train(run, args):
    manifest = _manifest(run)
    train, _ = _split(run, manifest)
    table = _feature_table(run, train)
    spec = run.regressor()
    model_dir = run.path("models")
    model_dir.mkdir(parents=True, exist_ok=True)
    trim = float(run.raw["trim"])
    selections = {}
    for p in PARAMETERS:
        model = train_parameter_model(train, table, p, run.lasso_for(p), spec, run.seed, trim,
                                      run.trim_count, run.clamp)
        save_bundle(model, model_dir / f"{p}.tfus", stamp={"stamp": run.stamp})
        selections[p] = selected_features(model.lasso)
        log.info("%s: %s", p, selections[p].summary())
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    write_selection_report(selections, reports / "selection.txt", reports / "selection.csv",
                           PARAMETER_LABELS, stamp=run.stamp)
    print(f"train: {len(PARAMETERS)} {spec.kind.value} bundles on {len(train.patients)} patients -> {model_dir}")


def cmd_cv(run, args):
    manifest = _manifest(run)
    train, _ = _split(run, manifest)
    table = _feature_table(run, train)
    result = cross_validate(train, table, run.cv_grid, k=int(run.raw["cv"]["k"]), seed=run.seed,
                            lasso_base=run.lasso_for(PARAMETERS[0]), trim=float(run.raw["trim"]),
                            trim_count=run.trim_count, clamp=run.clamp)
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    result.write_csv(reports / "cv.csv", stamp=run.stamp)
    _write_text(reports / "cv.txt", result.report().render_text(), run)
    n_cells = len({(c.alpha, c.kind) for c in result.cells})
    print(f"cv: {n_cells} grid cells x {len(PARAMETERS)} parameters -> {reports / 'cv.csv'}")


def cmd_assess(run, args):
    # labels are never parsed here, so H cannot depend on them
    manifest = _manifest(run, labels=False)
    if args.split != "all":
        train, test = _split(run, manifest)
        manifest = test if args.split == "test" else train
    if not manifest.studies:
        raise DataError(f"the {args.split} split is empty")
    models = {}
    for p in PARAMETERS:
        model, meta = load_bundle(run.path("models") / f"{p}.tfus")
        run.check_stamp(meta.get("stamp"), f"model bundle {p}")
        models[p] = model
    table = _feature_table(run, manifest, compute_missing=True, threads=args.threads)
    assessments = assess_manifest(models, manifest, table)
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / "assessments.csv"
    write_assessments(out, assessments, stamp=run.stamp)
    print(f"assess: {len(assessments)} studies -> {out}")


def cmd_report(run, args):
    reports = run.path("reports")
    path = reports / "assessments.csv"
    if not path.is_file():
        raise DataError(f"no assessments at {path}; run assess first")
    stamp, rows = read_assessments(path)
    run.check_stamp(stamp, "assessments")
    manifest = _manifest(run)
    labels = {(st.patient_id, st.timepoint.value): st.labels for st in manifest.studies}
    name = run.regressor().kind.value
    report = EvalReport()
    for p in PARAMETERS:
        sel = [r for r in rows if r["parameter"] == p]
        if not sel:
            continue
        missing = [r for r in sel if labels.get((r["patient_id"], r["timepoint"])) is None]
        if missing:
            raise DataError(f"no ground truth for study {missing[0]['patient_id']}/{missing[0]['timepoint']}")
        truth = [labels[(r["patient_id"], r["timepoint"])][p] for r in sel]
        report.add(p, name, evaluate([r["H"] for r in sel], truth, [r["patient_id"] for r in sel]))
    report.write_csv(reports / "report.csv", stamp=run.stamp)
    _write_text(reports / "report.txt", report.render_text(), run)
    print(f"report: {len(rows) // max(1, len(PARAMETERS))} studies -> {reports / 'report.txt'}")


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "pca": cmd_pca, "train": cmd_train,
            "cv": cmd_cv, "assess": cmd_assess, "report": cmd_report}


def _global_flags(suppress):
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="JSON run configuration")
    p.add_argument("--workdir", default=default,
                   help="base directory for relative paths (default: the config file's directory)")
    p.add_argument("--manifest", default=default, help="override the cohort manifest path")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1)
    p.add_argument("--clamp-17", dest="clamp", action="store_true",
                   default=argparse.SUPPRESS if suppress else False,
                   help="clamp per-slice predictions to [1, 7]")
    p.add_argument("--trim-count", type=int, default=default,
                   help="drop K scores per tail instead of a fraction")
    p.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="tendonfusion", parents=[_global_flags(False)],
                                     description="Late-fusion tendon healing assessment pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[flags])
        if name == "assess":
            sp.add_argument("--split", choices=("test", "train", "all"), default="test")
    return parser


def _error_line(exc, code):
    return json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)},
                      sort_keys=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; map bad flags to the config exit code
        return 0 if exc.code == 0 else ConfigError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        run = load_run_config(args.config, args.workdir, args.clamp, args.trim_count, args.manifest)
        COMMANDS[args.command](run, args)
    except TendonFusionError as exc:
        print(_error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_line(exc, DataError.exit_code), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
