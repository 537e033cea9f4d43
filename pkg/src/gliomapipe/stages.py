"""Pipeline stages operating on files. The CLI is a thin layer over these.

Work directory layout::

    <work_dir>/cache/                     slice cache (preprocess)
    <work_dir>/weights/<REGION>.safetensors, train_report.json
    <work_dir>/segmentations/<case>_seg.nii.gz
    <work_dir>/evaluation/{training,validation}.{json,csv}
    <work_dir>/features/{ground_truth,segmented}.csv
    <work_dir>/survival/{model.bin,pred.csv,os_report.json}
    <work_dir>/report/                    tables + figures
    <work_dir>/manifests/<stage>.json
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .data_model import (
    DEFAULT_NAMING,
    LabelMap,
    SurvivalColumns,
    find_case_dirs,
    load_label_map,
    load_scan,
    load_survival_table,
    save_label_map,
)
from .errors import ParseError, StageDependencyError
from .features import FEATURE_NAMES, build_feature_vector, read_features_csv, write_features_csv
from .manifest import atomic_write_text, require, write_json, write_manifest
from .metrics import REFERENCE_FOCAL_TRAINING_MEANS, CaseMetrics, aggregate, evaluate_case
from .network import load_weights
from .preprocess import SliceCache, extract_slices, normalize_scan, split_dataset
from .survival import (
    DEFAULT_THRESHOLDS,
    REFERENCE_OS,
    ForestParams,
    classify,
    evaluate_os,
    filter_gtr,
    fit_rfr,
    load_model,
    predict_days,
    save_model,
)
from .trainer import run_cascade, segment_volume

log = logging.getLogger(__name__)

REGIONS_ALL = ("WT", "NCR", "ED", "ET")


class Layout:
    def __init__(self, work_dir):
        self.root = Path(work_dir)
        self.cache = self.root / "cache"
        self.weights = self.root / "weights"
        self.train_report = self.weights / "train_report.json"
        self.segmentations = self.root / "segmentations"
        self.evaluation = self.root / "evaluation"
        self.features = self.root / "features"
        self.survival = self.root / "survival"
        self.report = self.root / "report"
        self.manifests = self.root / "manifests"

    def manifest(self, stage: str) -> Path:
        return self.manifests / f"{stage}.json"


def label_path(case_dir: Path, naming=DEFAULT_NAMING) -> Path | None:
    return naming.find(case_dir, naming.label_suffix)


def find_label_files(root, naming=DEFAULT_NAMING) -> dict:
    """Map case id -> label file, from ``<root>/<case>_seg.*`` or ``<root>/<case>/<case>_seg.*``."""
    root = Path(root)
    if not root.is_dir():
        raise StageDependencyError(root)
    found = {}
    suffix = f"_{naming.label_suffix}"
    for path in sorted(root.iterdir()):
        if path.is_dir():
            hit = naming.find(path, naming.label_suffix)
            if hit is not None:
                found[path.name] = hit
            continue
        for ext in naming.extensions:
            if path.name.endswith(suffix + ext):
                found[path.name[: -len(suffix + ext)]] = path
                break
    return found


def load_cases(cases_dir, naming=DEFAULT_NAMING):
    """``(scan, labels)`` for every case directory with a label file."""
    dirs = find_case_dirs(cases_dir, naming)
    if not dirs:
        raise StageDependencyError(Path(cases_dir) / "<case_id>/")
    cases = []
    for d in dirs:
        lp = label_path(d, naming)
        if lp is None:
            raise StageDependencyError(d / f"{d.name}_{naming.label_suffix}")
        cases.append((load_scan(d, naming), load_label_map(lp, d.name)))
    return cases


# preprocess -------------------------------------------------------------------

def preprocess_stage(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    naming = cfg.data.naming.convention()
    require(cfg.data.cases_dir)
    cache = SliceCache(lay.cache)
    written = {}
    for scan, labels in load_cases(cfg.data.cases_dir, naming):
        norm = normalize_scan(scan)
        for region in cfg.training.regions:
            written[f"{scan.case_id}/{region}"] = cache.store(scan.case_id, region, extract_slices(norm, labels, region))
    write_manifest(lay.manifest("preprocess"), "preprocess", cfg.digest(), cfg.seed,
                   {"cases_dir": cfg.data.cases_dir}, {"cache": lay.cache})
    return written


# train ------------------------------------------------------------------------

def train_stage_files(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    naming = cfg.data.naming.convention()
    require(cfg.data.cases_dir)
    cases = [(normalize_scan(s), l) for s, l in load_cases(cfg.data.cases_dir, naming)]
    h, w, _ = cases[0][0].shape
    spec = cfg.network.spec(h, w)
    started = time.perf_counter()
    cache = SliceCache(lay.cache) if cfg.preprocess.cache and lay.cache.exists() else None
    result = run_cascade(cfg.cascade(), cases, spec, out_dir=lay.weights, normalized=True, cache=cache)
    report = {
        "loss": cfg.training.loss,
        "train_ids": result.train_ids,
        "val_ids": result.val_ids,
        "stages": {r: rep.to_dict(with_timing=False) for r, rep in result.reports.items()},
        "parents": {r: result.weights[r].metadata.get("parent") for r in result.weights},
    }
    write_json(lay.train_report, report)
    outputs = {f"weights/{r}": p for r, p in result.paths.items()}
    outputs["train_report"] = lay.train_report
    write_manifest(
        lay.manifest("train"), "train", cfg.digest(), cfg.seed, {"cases_dir": cfg.data.cases_dir}, outputs,
        timing={"wall_clock_s": round(time.perf_counter() - started, 3),
                "stage_wall_clock_s": {r: round(rep.wall_clock, 3) for r, rep in result.reports.items()}},
    )
    return result.paths


# segment ----------------------------------------------------------------------

def load_weight_dir(weights_dir) -> dict:
    weights_dir = Path(weights_dir)
    out = {}
    for region in ("NCR", "ED", "ET"):
        path = weights_dir / f"{region}.safetensors"
        require(path)
        out[region] = load_weights(path)
    return out


def segment_case(weights_dir, case_dir, out_path, naming=DEFAULT_NAMING, threshold=0.5) -> Path:
    weights = load_weight_dir(weights_dir)
    require(case_dir)
    scan = normalize_scan(load_scan(case_dir, naming))
    labels = segment_volume(weights, scan, threshold)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name("tmp_" + out_path.name)
    save_label_map(labels, tmp)
    tmp.replace(out_path)
    return out_path


def segment_stage(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    naming = cfg.data.naming.convention()
    require(cfg.data.cases_dir, *(lay.weights / f"{r}.safetensors" for r in ("NCR", "ED", "ET")))
    ext = cfg.data.naming.extension
    outputs = {}
    for case_dir in find_case_dirs(cfg.data.cases_dir, naming):
        out = lay.segmentations / f"{case_dir.name}_{naming.label_suffix}{ext}"
        outputs[f"segmentations/{case_dir.name}"] = segment_case(lay.weights, case_dir, out, naming,
                                                                 cfg.training.threshold)
    inputs = {f"weights/{r}": lay.weights / f"{r}.safetensors" for r in ("NCR", "ED", "ET")}
    inputs["cases_dir"] = cfg.data.cases_dir
    write_manifest(lay.manifest("segment"), "segment", cfg.digest(), cfg.seed, inputs, outputs)
    return outputs


# evaluate ---------------------------------------------------------------------

def evaluate_dirs(pred_dir, gt_dir, case_ids=None, naming=DEFAULT_NAMING):
    preds = find_label_files(pred_dir, naming)
    gts = find_label_files(gt_dir, naming)
    ids = sorted(set(preds) & set(gts)) if case_ids is None else sorted(case_ids)
    missing = [c for c in ids if c not in preds]
    if missing:
        raise StageDependencyError(Path(pred_dir) / f"{missing[0]}_{naming.label_suffix}")
    if not ids:
        raise StageDependencyError(Path(pred_dir) / "<case>_seg")
    return [evaluate_case(load_label_map(preds[c], c), load_label_map(gts[c], c)) for c in ids]


def evaluation_document(cases: list[CaseMetrics], name: str = "") -> dict:
    table = aggregate(cases)
    return {
        "name": name,
        "summary": table.to_dict(),
        "cases": [c.to_dict() for c in cases],
        "reference_focal_training_means": REFERENCE_FOCAL_TRAINING_MEANS,
    }


def write_evaluation(cases, out_path, name: str = "") -> Path:
    """JSON (summary + per-case) or CSV (summary table) chosen by file suffix."""
    out_path = Path(out_path)
    if out_path.suffix.lower() == ".csv":
        return atomic_write_text(out_path, aggregate(cases).to_csv())
    return write_json(out_path, evaluation_document(cases, name))


def evaluate_stage(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    naming = cfg.data.naming.convention()
    require(lay.segmentations, lay.train_report)
    split = json.loads(lay.train_report.read_text())
    outputs = {}
    for name, ids in (("training", split["train_ids"]), ("validation", split["val_ids"])):
        if not ids:
            continue
        cases = evaluate_dirs(lay.segmentations, cfg.data.cases_dir, ids, naming)
        outputs[f"evaluation/{name}.json"] = write_evaluation(cases, lay.evaluation / f"{name}.json", name)
        outputs[f"evaluation/{name}.csv"] = write_evaluation(cases, lay.evaluation / f"{name}.csv", name)
    inputs = {"segmentations": lay.segmentations, "train_report": lay.train_report}
    write_manifest(lay.manifest("evaluate"), "evaluate", cfg.digest(), cfg.seed, inputs, outputs)
    return outputs


# features ---------------------------------------------------------------------

def _ages(meta_path, columns: SurvivalColumns) -> dict:
    return {r.case_id: r.age for r in load_survival_table(meta_path, columns)}


def features_from_labels(labels_dir, out_path, meta_path, cases_dir=None, naming=DEFAULT_NAMING,
                         columns: SurvivalColumns = SurvivalColumns()) -> Path:
    """Feature CSV for every label file under ``labels_dir`` that has an age in ``meta_path``.

    The brain mask comes from the case's scan (under ``cases_dir`` or beside
    the label file); without a scan the whole grid is used.
    """
    require(labels_dir, meta_path)
    ages = _ages(meta_path, columns)
    vectors = []
    for case_id, path in find_label_files(labels_dir, naming).items():
        if case_id not in ages:
            log.warning("%s: no age in %s, skipped", case_id, meta_path)
            continue
        labels = load_label_map(path, case_id)
        brain = None
        for root in [Path(cases_dir) if cases_dir else None, Path(labels_dir)]:
            if root is not None and naming.find(root / case_id, naming.modality_suffixes["FLAIR"]):
                brain = load_scan(root / case_id, naming).brain_mask()
                break
        if brain is None:
            warnings.warn(f"{case_id}: no scan found, using the whole grid as brain mask", RuntimeWarning)
            brain = np.ones(labels.shape, dtype=bool)
        vectors.append(build_feature_vector(labels, brain, ages[case_id], case_id))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_features_csv(vectors, out_path)
    return Path(out_path)


def features_stage(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    naming = cfg.data.naming.convention()
    columns = cfg.data.columns.columns()
    require(cfg.data.survival_csv, cfg.data.cases_dir)
    outputs = {
        "features/ground_truth.csv": features_from_labels(
            cfg.data.cases_dir, lay.features / "ground_truth.csv", cfg.data.survival_csv,
            cfg.data.cases_dir, naming, columns),
    }
    inputs = {"cases_dir": cfg.data.cases_dir, "survival_csv": cfg.data.survival_csv}
    if lay.segmentations.exists():
        outputs["features/segmented.csv"] = features_from_labels(
            lay.segmentations, lay.features / "segmented.csv", cfg.data.survival_csv,
            cfg.data.cases_dir, naming, columns)
        inputs["segmentations"] = lay.segmentations
    write_manifest(lay.manifest("features"), "features", cfg.digest(), cfg.seed, inputs, outputs)
    return outputs


# survival ---------------------------------------------------------------------

def survival_train(features_csv, meta_csv, out_path, params: ForestParams = ForestParams(), seed: int = 0,
                   columns: SurvivalColumns = SurvivalColumns()) -> Path:
    """Fit on every case with known survival (all resection statuses)."""
    require(features_csv, meta_csv)
    ids, X, names = read_features_csv(features_csv)
    if names != FEATURE_NAMES:
        raise ParseError(1, "feature columns differ from the expected feature set")
    days = {r.case_id: r.survival_days for r in load_survival_table(meta_csv, columns)}
    rows = [i for i, c in enumerate(ids) if days.get(c) is not None]
    model = fit_rfr(X[rows], np.array([days[ids[i]] for i in rows]), params, seed, names)
    model.extra = {"train_ids": [ids[i] for i in rows]}
    return save_model(model, out_path)


def survival_predict(model_path, features_csv, out_path, oob: bool = False,
                     thresholds=DEFAULT_THRESHOLDS) -> Path:
    """Predicted days and class per case; ``oob`` swaps in out-of-bag values for training cases."""
    require(model_path, features_csv)
    model = load_model(model_path)
    ids, X, names = read_features_csv(features_csv)
    pred = predict_days(model, X, names) if len(ids) else np.zeros(0)
    modes = ["resubstitution"] * len(ids)
    if oob and model.oob_prediction is not None:
        train_pos = {c: i for i, c in enumerate(model.extra.get("train_ids", []))}
        for k, case_id in enumerate(ids):
            j = train_pos.get(case_id)
            if j is not None and np.isfinite(model.oob_prediction[j]):
                pred[k] = max(float(model.oob_prediction[j]), 0.0)
                modes[k] = "oob"
            elif j is None:
                modes[k] = "unseen"
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "predicted_days", "predicted_class", "mode"])
        for case_id, days, mode in zip(ids, pred, modes):
            writer.writerow([case_id, repr(float(days)), classify(float(days), thresholds).name, mode])
    tmp.replace(out_path)
    return out_path


def read_predictions(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[row["case_id"]] = (float(row["predicted_days"]), row.get("mode", "resubstitution"))
            except (KeyError, TypeError, ValueError):
                raise ParseError(line, "bad prediction row") from None
    return out


def survival_eval(pred_csv, meta_csv, out_path, thresholds=DEFAULT_THRESHOLDS,
                  columns: SurvivalColumns = SurvivalColumns(), dataset: str = "Training") -> Path:
    """OS report over GTR cases with known survival."""
    require(pred_csv, meta_csv)
    preds = read_predictions(pred_csv)
    records = [r for r in filter_gtr(load_survival_table(meta_csv, columns)) if r.case_id in preds]
    pred = [preds[r.case_id][0] for r in records]
    true = [r.survival_days for r in records]
    modes = sorted({preds[r.case_id][1] for r in records})
    report = evaluate_os(pred, true, thresholds, mode="+".join(modes) or "resubstitution")
    doc = {
        "dataset": dataset,
        "report": report.to_dict(),
        "thresholds": list(thresholds),
        "pairs": [{"case_id": r.case_id, "predicted_days": p, "true_days": t} for r, p, t in zip(records, pred, true)],
        "reference": REFERENCE_OS,
    }
    return write_json(out_path, doc)


def survival_stage(cfg: PipelineConfig, which: str) -> Path:
    lay = Layout(cfg.work_dir)
    columns = cfg.data.columns.columns()
    s = cfg.survival
    gt_features = lay.features / "ground_truth.csv"
    seg_features = lay.features / "segmented.csv"
    model = lay.survival / "model.bin"
    pred = lay.survival / "pred.csv"
    if which == "train":
        out = survival_train(gt_features, cfg.data.survival_csv, model, s.forest_params(), cfg.seed, columns)
        inputs = {"features/ground_truth.csv": gt_features, "survival_csv": cfg.data.survival_csv}
        outputs = {"survival/model.bin": out}
    elif which == "predict":
        source = seg_features if seg_features.exists() else gt_features
        out = survival_predict(model, source, pred, oob=s.oob, thresholds=s.thresholds)
        inputs = {"survival/model.bin": model, f"features/{source.name}": source}
        outputs = {"survival/pred.csv": out}
    else:
        out = survival_eval(pred, cfg.data.survival_csv, lay.survival / "os_report.json", s.thresholds, columns)
        inputs = {"survival/pred.csv": pred, "survival_csv": cfg.data.survival_csv}
        outputs = {"survival/os_report.json": out}
    write_manifest(lay.manifest(f"survival-{which}"), f"survival-{which}", cfg.digest(), cfg.seed, inputs, outputs)
    return out


# report -----------------------------------------------------------------------

def render_report(work_dir, out_dir=None) -> dict:
    """Tables (CSV/JSON) and figures (PNG) from stored stage outputs; no metric is recomputed."""
    from . import plotting
    from .metrics import SummaryTable

    lay = Layout(work_dir)
    out = Path(out_dir) if out_dir else lay.report
    written = {}
    eval_docs = sorted(lay.evaluation.glob("*.json")) if lay.evaluation.exists() else []
    os_path = lay.survival / "os_report.json"
    if not eval_docs and not os_path.exists() and not lay.train_report.exists():
        raise StageDependencyError(lay.evaluation / "*.json")

    for path in eval_docs:
        doc = json.loads(path.read_text())
        table = SummaryTable.from_dict(doc["summary"])
        written[f"segmentation_{path.stem}.csv"] = atomic_write_text(out / f"segmentation_{path.stem}.csv",
                                                                     table.to_csv())
        written[f"metrics_{path.stem}.png"] = plotting.plot_metric_distributions(
            doc["cases"], out / f"metrics_{path.stem}.png", title=path.stem)

    if os_path.exists():
        doc = json.loads(os_path.read_text())
        r = doc["report"]
        table5 = {
            "columns": ["Dataset", "Accuracy", "MSE", "MedianSE", "StdSE", "SpearmanR"],
            "rows": [[doc["dataset"], r["accuracy"], r["mse"], r["medianse"], r["stdse"], r["spearmanr"]]],
            "n_cases": r["n_cases"],
            "mode": r["mode"],
            "reference": doc["reference"],
        }
        written["survival_table.json"] = write_json(out / "survival_table.json", table5)
        if doc["pairs"]:
            written["survival.png"] = plotting.plot_survival(
                [p["predicted_days"] for p in doc["pairs"]], [p["true_days"] for p in doc["pairs"]],
                doc["thresholds"], out / "survival.png")

    if lay.train_report.exists():
        stages = json.loads(lay.train_report.read_text())["stages"]
        written["loss_curves.png"] = plotting.plot_loss_curves(stages, out / "loss_curves.png")
    return written


def report_stage(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg.work_dir)
    written = render_report(cfg.work_dir)
    inputs = {}
    for p in sorted(lay.evaluation.glob("*.json")) if lay.evaluation.exists() else []:
        inputs[f"evaluation/{p.name}"] = p
    for p in (lay.survival / "os_report.json", lay.train_report):
        if p.exists():
            inputs[str(p.relative_to(lay.root))] = p
    write_manifest(lay.manifest("report"), "report", cfg.digest(), cfg.seed, inputs,
                   {f"report/{k}": v for k, v in written.items()})
    return written
