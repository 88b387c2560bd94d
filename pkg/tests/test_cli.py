import csv
import json
import shutil
import subprocess
import sys

import pytest

from tendonfusion.cli import main
from tendonfusion.data_model import MANIFEST_COLUMNS, PARAMETERS

SMALL = {
    "seed": 3,
    "synth": {"n_patients": 8, "studies_per_patient": 4, "slices_min": 9, "slices_max": 11,
              "image_size": 48},
    "holdout": {"count": 2},
    "cv": {"k": 2},
    "regressor": {"epochs": 200},
}
STEPS = ("synth", "extract", "pca", "train", "cv", "assess", "report")


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    (wd / "run.json").write_text(json.dumps(SMALL))
    for step in STEPS:
        assert main(["--config", str(wd / "run.json"), step]) == 0, step
    return wd


def test_pipeline_artifacts(workdir):
    manifest = (workdir / "cohort" / "manifest.csv").read_text().splitlines()
    assert len(manifest) - 2 >= 200  # stamp line and header
    for name in ("selection.txt", "cv.csv", "cv.txt", "assessments.csv", "report.txt", "report.csv"):
        assert (workdir / "reports" / name).is_file(), name
    for p in PARAMETERS:
        assert (workdir / "models" / f"{p}.tfus").is_file()
    stamp = manifest[0]
    assert stamp.startswith("# config_hash=") and stamp.endswith(" seed=3")
    for path in [workdir / "reports" / "cv.csv", workdir / "reports" / "report.txt",
                 workdir / "reports" / "assessments.csv", workdir / "features" / "deep-pca.csv"]:
        assert path.read_text().splitlines()[0] == stamp


def test_cv_table_has_twelve_cells(workdir):
    lines = (workdir / "reports" / "cv.csv").read_text().splitlines()[1:]
    rows = list(csv.DictReader(lines))
    cells = {(r["alpha"], r["kind"]) for r in rows}
    assert len(cells) == 12
    assert len(rows) == 12 * 6
    assert all(r["mae"] and r["max_ae"] and r["corr"] for r in rows)


def test_assessments_cover_test_split_without_labels(workdir):
    lines = (workdir / "reports" / "assessments.csv").read_text().splitlines()[1:]
    rows = list(csv.DictReader(lines))
    assert len({r["patient_id"] for r in rows}) == 2
    assert len(rows) == 2 * 4 * 6
    assert all(r["ground_truth"] == "" for r in rows)


def test_rerun_is_byte_identical(workdir, capsys):
    before = {n: (workdir / "reports" / n).read_bytes()
              for n in ("cv.csv", "report.txt", "assessments.csv", "selection.csv")}
    for step in ("train", "cv", "assess", "report"):
        assert _run(capsys, "--config", str(workdir / "run.json"), step)[0] == 0
    for n, blob in before.items():
        assert (workdir / "reports" / n).read_bytes() == blob, n


def test_feature_cache_is_reused(workdir, capsys):
    code, out, _ = _run(capsys, "--config", str(workdir / "run.json"), "extract")
    assert code == 0 and "0 computed" in out


def test_poisoned_labels_do_not_change_h(workdir, capsys):
    src = workdir / "cohort" / "manifest.csv"
    with open(src, newline="") as fh:
        lines = fh.read().splitlines()
    rows = list(csv.reader(lines[1:]))
    for r in rows[1:]:
        for p in PARAMETERS:
            r[MANIFEST_COLUMNS.index(p)] = "-999"
    poisoned = workdir / "cohort" / "poisoned.csv"
    with open(poisoned, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    clean = (workdir / "reports" / "assessments.csv").read_bytes()
    code, _, err = _run(capsys, "--config", str(workdir / "run.json"), "--manifest", str(poisoned),
                        "assess")
    assert code == 0, err
    assert (workdir / "reports" / "assessments.csv").read_bytes() == clean


def test_stamp_mismatch_rejected(workdir, capsys, tmp_path):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "seed": 4}))
    code, _, err = _run(capsys, "--config", str(other), "--workdir", str(workdir), "train")
    assert code == 3
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["error"] == "StampMismatchError" and "config_hash" in msg["message"]
    # flags are part of the hash too
    code, _, err = _run(capsys, "--config", str(workdir / "run.json"), "--clamp-17", "assess")
    assert code == 3


def test_numerical_failure_exit_code(workdir, capsys, tmp_path):
    wd = tmp_path / "huge"
    shutil.copytree(workdir / "features", wd / "features")
    cfg = wd / "run.json"
    cfg.write_text(json.dumps({**SMALL, "lasso": {"alpha": 1e6}}))
    manifest = str(workdir / "cohort" / "manifest.csv")
    for step in ("extract", "pca"):
        assert _run(capsys, "--config", str(cfg), "--manifest", manifest, step)[0] == 0
    code, _, err = _run(capsys, "--config", str(cfg), "--manifest", manifest, "train")
    assert code == 4
    assert "alpha too large for this parameter" in json.loads(err.strip().splitlines()[-1])["message"]


def test_config_and_data_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"lasso": {"alpha": -1}}')
    assert _run(capsys, "--config", str(bad), "train")[0] == 2
    bad.write_text('{"nonsense": 1}')
    code, _, err = _run(capsys, "--config", str(bad), "train")
    assert code == 2 and json.loads(err.strip())["exit_code"] == 2
    bad.write_text("{not json")
    assert _run(capsys, "--config", str(bad), "extract")[0] == 2
    code, _, err = _run(capsys, "--workdir", str(tmp_path), "extract")
    assert code == 3 and "manifest not found" in err
    assert _run(capsys, "--threads", "0", "extract")[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tendonfusion.cli", "--workdir", str(tmp_path),
                           "report"], capture_output=True, text=True)
    assert proc.returncode == 3
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "DataError"
