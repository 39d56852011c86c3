import json
import re
import time

import pytest

import tabfm
from tabfm.cli import main

from conftest import learnable_dataset

TINY_SPEC = {
    "n_patients": 200,
    "mean_visits": 2.0,
    "template": {"n_volumes": 4, "n_lobes": 2, "n_thickness": 6,
                 "n_csf": 1, "n_genetic": 3, "n_demographics": 3},
    "planted_pairs": [["thick_01", "thick_02", 0, 2.0]],
    "seed": 4,
}


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    assert main(["generate", "--spec", str(spec_path), "--out", str(root / "out")]) == 0
    return root / "out"


@pytest.fixture(scope="module")
def cv_dir(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    rc = main(["cv", "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"),
               "--variant", "deepfm", "--budget", "1", "--seed", "2", "--jobs", "4",
               "--max-epochs", "40", "--patience", "10", "--out", str(out)])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_cohort_and_manifest(cohort_dir, capsys):
    capsys.readouterr()
    for name in ("schema.json", "data.csv", "ground_truth.json",
                 "schema_meta.json", "manifest.json"):
        assert (cohort_dir / name).exists(), name
    manifest = json.loads((cohort_dir / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seed"] is None          # seed lives in the spec file
    assert manifest["config"]["out"] == str(cohort_dir)
    assert len(manifest["outputs"]) == 4
    assert manifest["version"] == tabfm.__version__
    schema = tabfm.load_schema(cohort_dir / "schema.json")
    assert manifest["schema_hash"] == schema.schema_hash


def test_generate_seed_override(cohort_dir, tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    assert main(["generate", "--spec", str(spec_path), "--seed", "99",
                 "--out", str(tmp_path / "out")]) == 0
    a = (cohort_dir / "data.csv").read_bytes()
    b = (tmp_path / "out" / "data.csv").read_bytes()
    assert a != b
    # schema does not depend on the seed
    assert (cohort_dir / "schema.json").read_bytes() == \
        (tmp_path / "out" / "schema.json").read_bytes()


def test_generate_rejects_malformed_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_patients": }')
    rc = main(["generate", "--spec", str(bad), "--out", str(tmp_path / "out")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "error:" in err and "line" in err

    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"n_patientz": 10}')
    rc = main(["generate", "--spec", str(unknown), "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "n_patientz" in capsys.readouterr().err


def test_generate_reruns_byte_identical(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    assert main(["generate", "--spec", str(spec_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--spec", str(spec_path), "--out", str(tmp_path / "b")]) == 0
    for name in ("data.csv", "schema.json", "schema_meta.json", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes(), name


# ---------------------------------------------------------------------------
# cv


def test_cv_learnable_fm_only_beats_point_nine(tmp_path, capsys):
    schema, samples = learnable_dataset()
    tabfm.save_schema(schema, tmp_path / "schema.json")
    tabfm.save_dataset(samples, schema, tmp_path / "data.csv")
    out = tmp_path / "cv"
    rc = main(["cv", "--data", str(tmp_path / "data.csv"),
               "--schema", str(tmp_path / "schema.json"),
               "--variant", "fm_only", "--budget", "4", "--seed", "5", "--jobs", "4",
               "--max-epochs", "80", "--patience", "20", "--batch-size", "64",
               "--out", str(out)])
    assert rc == 0
    assert "median test balanced accuracy" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["aggregates"]["fm_only"]["median"] > 0.9
    for name in ("report.tsv", "report.json", "trials.tsv", "manifest.json"):
        assert (out / name).exists(), name
    ckpts = sorted(out.glob("model_fold*.ckpt"))
    assert len(ckpts) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "cv"
    assert manifest["config"]["budget"] == 4 and manifest["seed"] == 5
    assert len(manifest["outputs"]) == 8


def test_cv_budget_one_tiny_cohort_is_fast(cohort_dir, tmp_path):
    started = time.monotonic()
    rc = main(["cv", "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"),
               "--variant", "deepfm", "--budget", "1", "--seed", "0",
               "--max-epochs", "40", "--patience", "10", "--out", str(tmp_path / "out")])
    assert rc == 0
    assert time.monotonic() - started < 60.0


def test_cv_invalid_variant_is_usage_error(cohort_dir, tmp_path, capsys):
    rc = main(["cv", "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"),
               "--variant", "nope", "--out", str(tmp_path / "out")])
    assert rc == 2
    err = capsys.readouterr().err
    for variant in tabfm.ALL_VARIANTS:
        assert variant in err


def test_cv_missing_data_is_data_error(cohort_dir, tmp_path, capsys):
    rc = main(["cv", "--data", str(tmp_path / "nope.csv"),
               "--schema", str(cohort_dir / "schema.json"),
               "--variant", "fm_only", "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "not found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# explain


def test_explain_reports_and_console(cohort_dir, cv_dir, tmp_path, capsys):
    ckpts = sorted(str(p) for p in cv_dir.glob("model_fold*.ckpt"))
    assert len(ckpts) == 5
    out = tmp_path / "explain"
    rc = main(["explain", "--checkpoint", *ckpts,
               "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"), "--out", str(out)])
    assert rc == 0
    console = capsys.readouterr().out
    for name in ("linear_importance.tsv", "interactions.tsv", "summary.json",
                 "manifest.json"):
        assert (out / name).exists(), name
    # default top-k of 10: ten linear rows and ten interaction rows per class
    rank_rows = re.findall(r"^\s+\d+\s+\S", console, flags=re.M)
    assert len(rank_rows) == 3 * (10 + 10)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_folds"] == 5
    assert summary["n_interaction_pairs"] == 17 * 16 // 2


def test_explain_single_checkpoint(cohort_dir, cv_dir, tmp_path, capsys):
    ckpt = sorted(cv_dir.glob("model_fold*.ckpt"))[0]
    out = tmp_path / "explain"
    rc = main(["explain", "--checkpoint", str(ckpt), "--top-k", "3",
               "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"), "--out", str(out)])
    assert rc == 0
    console = capsys.readouterr().out
    rank_rows = re.findall(r"^\s+\d+\s+\S", console, flags=re.M)
    assert len(rank_rows) == 3 * (3 + 3)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_folds"] == 1
    # single fold: mean weight equals the fold weight
    model = tabfm.load_checkpoint(ckpt)
    report = tabfm.linear_importance([model])
    assert all(e.fold_weights == (e.mean_weight,) for e in report.entries)


def test_explain_meta_checkpoint_names_groups(cohort_dir, tmp_path, capsys):
    cv_out = tmp_path / "cv_meta"
    rc = main(["cv", "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema.json"),
               "--meta-schema", str(cohort_dir / "schema_meta.json"),
               "--variant", "deepfm_meta", "--budget", "1", "--seed", "2",
               "--jobs", "4", "--max-epochs", "40", "--patience", "10",
               "--out", str(cv_out)])
    assert rc == 0
    ckpts = sorted(str(p) for p in cv_out.glob("model_fold*.ckpt"))
    out = tmp_path / "explain"
    rc = main(["explain", "--checkpoint", *ckpts,
               "--data", str(cohort_dir / "data.csv"),
               "--schema", str(cohort_dir / "schema_meta.json"), "--out", str(out)])
    assert rc == 0
    capsys.readouterr()
    interactions = (out / "interactions.tsv").read_text()
    assert "frontal × parietal" in interactions
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_interaction_pairs"] == 15 * 14 // 2


def test_explain_schema_hash_mismatch(cv_dir, tmp_path, capsys):
    schema, samples = learnable_dataset(n_patients=20)
    tabfm.save_schema(schema, tmp_path / "schema.json")
    tabfm.save_dataset(samples, schema, tmp_path / "data.csv")
    ckpt = sorted(cv_dir.glob("model_fold*.ckpt"))[0]
    rc = main(["explain", "--checkpoint", str(ckpt),
               "--data", str(tmp_path / "data.csv"),
               "--schema", str(tmp_path / "schema.json"),
               "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "schema" in capsys.readouterr().err
