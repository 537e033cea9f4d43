import json
import shutil

import numpy as np
import pytest
import yaml

from gliomapipe.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, run
from gliomapipe.config import load_config, parse_config
from gliomapipe.errors import ConfigError
from gliomapipe.manifest import read_manifest, sha256_path


def write_config(path, cases_dir, work_dir, **overrides):
    raw = {
        "seed": 11,
        "work_dir": str(work_dir),
        "data": {"cases_dir": str(cases_dir), "survival_csv": str(cases_dir / "survival.csv")},
        "network": {"encoder_maps": [8, 16, 24], "decoder_maps": [16, 8], "dense_block_depth": 2},
        "training": {"epochs": 1, "learning_rate": 1e-3},
        "survival": {"n_trees": 10},
    }
    raw.update(overrides)
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def pipeline_run(cohort_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "config.yaml", cohort_dir, root / "work")
    assert run(["pipeline", "--config", str(cfg)]) == EXIT_OK
    return cfg, root / "work"


def test_unknown_key_is_config_error(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config({"training": {"epoch": 3}})
    assert info.value.key_path == "training.epoch"
    cfg = tmp_path / "c.yaml"
    cfg.write_text("training:\n  loss: hinge\n")
    assert run(["train", "--config", str(cfg)]) == EXIT_CONFIG


def test_regions_must_start_with_wt():
    with pytest.raises(ConfigError):
        parse_config({"training": {"regions": ["NCR", "WT"]}})


def test_relative_paths_resolve_against_config(tmp_path):
    cfg = tmp_path / "sub" / "c.yaml"
    cfg.parent.mkdir()
    cfg.write_text("work_dir: out\ndata:\n  cases_dir: cases\n")
    loaded = load_config(cfg)
    assert loaded.work_dir == cfg.parent / "out"
    assert loaded.data.cases_dir == cfg.parent / "cases"


def test_missing_upstream_is_dependency_error(tmp_path, cohort_dir):
    cfg = write_config(tmp_path / "c.yaml", cohort_dir, tmp_path / "empty")
    assert run(["segment", "--config", str(cfg)]) == EXIT_DEPENDENCY
    assert run(["evaluate", "--config", str(cfg)]) == EXIT_DEPENDENCY
    assert run(["report", "--config", str(cfg)]) == EXIT_DEPENDENCY
    assert run(["survival-predict", "--config", str(cfg)]) == EXIT_DEPENDENCY


def test_pipeline_outputs(pipeline_run):
    _, work = pipeline_run
    for r in ("WT", "NCR", "ED", "ET"):
        assert (work / "weights" / f"{r}.safetensors").exists()
    assert len(list((work / "segmentations").glob("*_seg.nii.gz"))) == 5
    for name in ("segmentation_training.csv", "segmentation_validation.csv", "loss_curves.png",
                 "metrics_training.png", "survival_table.json", "survival.png"):
        assert (work / "report" / name).exists(), name
    header = (work / "report" / "segmentation_training.csv").read_text().splitlines()[0]
    assert header.startswith("statistic,DSC_ET,DSC_WT,DSC_TC")
    table = json.loads((work / "report" / "survival_table.json").read_text())
    assert table["columns"] == ["Dataset", "Accuracy", "MSE", "MedianSE", "StdSE", "SpearmanR"]


def test_manifests_chain_by_checksum(pipeline_run):
    _, work = pipeline_run
    train = read_manifest(work / "manifests" / "train.json")["payload"]
    segment = read_manifest(work / "manifests" / "segment.json")["payload"]
    evaluate = read_manifest(work / "manifests" / "evaluate.json")["payload"]
    for r in ("NCR", "ED", "ET"):
        assert segment["inputs"][f"weights/{r}"] == train["outputs"][f"weights/{r}"]
        assert train["outputs"][f"weights/{r}"] == sha256_path(work / "weights" / f"{r}.safetensors")
    assert evaluate["inputs"]["segmentations"] == sha256_path(work / "segmentations")
    surv_train = read_manifest(work / "manifests" / "survival-train.json")["payload"]
    surv_pred = read_manifest(work / "manifests" / "survival-predict.json")["payload"]
    assert surv_pred["inputs"]["survival/model.bin"] == surv_train["outputs"]["survival/model.bin"]


def test_evaluate_pred_equals_gt(cohort_dir, tmp_path):
    out = tmp_path / "report.json"
    assert run(["evaluate", "--pred-dir", str(cohort_dir), "--gt-dir", str(cohort_dir), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    for region in ("ET", "WT", "TC"):
        assert doc["summary"]["columns"][f"DSC_{region}"]["Mean"] == 1.0
        assert doc["summary"]["columns"][f"Hausdorff95_{region}"]["Mean"] == 0.0
    csv_out = tmp_path / "report.csv"
    assert run(["evaluate", "--pred-dir", str(cohort_dir), "--gt-dir", str(cohort_dir), "--out", str(csv_out)]) == 0
    assert csv_out.read_text().splitlines()[1].startswith("Mean,1.0,1.0,1.0")


def test_segment_single_case(pipeline_run, cohort_dir, tmp_path):
    cfg, work = pipeline_run
    out = tmp_path / "one_seg.nii.gz"
    code = run(["segment", "--config", str(cfg), "--weights-dir", str(work / "weights"),
                "--case", str(cohort_dir / "phantom_000"), "--out", str(out)])
    assert code == EXIT_OK
    assert out.read_bytes() == (work / "segmentations" / "phantom_000_seg.nii.gz").read_bytes()


def test_survival_commands_explicit(cohort_dir, tmp_path):
    feats = tmp_path / "f.csv"
    meta = cohort_dir / "survival.csv"
    assert run(["features", "--labels", str(cohort_dir), "--out", str(feats), "--meta", str(meta)]) == 0
    model = tmp_path / "m.bin"
    assert run(["survival-train", "--features", str(feats), "--meta", str(meta), "--out", str(model)]) == 0
    pred = tmp_path / "p.csv"
    assert run(["survival-predict", "--model", str(model), "--features", str(feats), "--out", str(pred),
                "--oob"]) == 0
    rows = pred.read_text().splitlines()
    assert rows[0] == "case_id,predicted_days,predicted_class,mode"
    assert all(r.endswith(",oob") for r in rows[1:])
    rep = tmp_path / "os.json"
    assert run(["survival-eval", "--pred", str(pred), "--meta", str(meta), "--out", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["report"]["n_cases"] == 4  # the fifth phantom is STR
    assert doc["report"]["mode"] == "oob"


def test_make_phantoms(tmp_path):
    assert run(["make-phantoms", "--out", str(tmp_path / "p"), "--n-cases", "2", "--shape", "16", "16", "12"]) == 0
    assert (tmp_path / "p" / "survival.csv").exists()
    assert sorted(p.name for p in (tmp_path / "p").iterdir() if p.is_dir()) == ["phantom_000", "phantom_001"]


def test_missing_modality_fails_cleanly(cohort_dir, tmp_path):
    broken = tmp_path / "cases"
    shutil.copytree(cohort_dir, broken)
    (broken / "phantom_001" / "phantom_001_flair.nii.gz").unlink()
    cfg = write_config(tmp_path / "c.yaml", broken, tmp_path / "w")
    assert run(["preprocess", "--config", str(cfg)]) == 4
