"""Overlap and surface-distance scores per case, and cohort summary tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data_model import EVAL_REGIONS, LabelMap, SubregionId, subregion_mask
from .errors import EmptyInput, ShapeError

METRICS = ("DSC", "Sensitivity", "Hausdorff95")
STATISTICS = ("Mean", "StdDev", "Median", "25quantile", "75quantile")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def sensitivity(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    n_gt = int(gt.sum())
    if n_gt == 0:
        return 1.0 if not pred.any() else 0.0
    return int(np.logical_and(pred, gt).sum()) / n_gt


def boundary(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def directed_surface_distances(src_border, dst_border, spacing) -> np.ndarray:
    """Distance from every ``src_border`` voxel centre to the nearest ``dst_border`` centre."""
    dist = ndimage.distance_transform_edt(~dst_border, sampling=spacing)
    return dist[src_border]


def hausdorff95(pred, gt, spacing=None) -> float | None:
    """Symmetric 95th-percentile boundary distance in mm.

    Both masks empty gives 0.0. Exactly one empty gives ``None``, which the
    aggregation step excludes and counts.
    """
    pred, gt = _pair(pred, gt)
    spacing = tuple(float(s) for s in (spacing or (1.0,) * pred.ndim))
    if len(spacing) != pred.ndim:
        raise ShapeError(f"spacing has {len(spacing)} entries for a {pred.ndim}D mask")
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return None
    bp, bg = boundary(pred), boundary(gt)
    d_pg = directed_surface_distances(bp, bg, spacing)
    d_gp = directed_surface_distances(bg, bp, spacing)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: dict
    sensitivity: dict
    hausdorff95: dict

    def value(self, metric: str, region) -> float | None:
        region = SubregionId(region).value
        return {"DSC": self.dice, "Sensitivity": self.sensitivity, "Hausdorff95": self.hausdorff95}[metric][region]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dice": dict(self.dice),
            "sensitivity": dict(self.sensitivity),
            "hausdorff95": dict(self.hausdorff95),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CaseMetrics":
        return cls(data["case_id"], data["dice"], data["sensitivity"], data["hausdorff95"])


def evaluate_case(pred: LabelMap, gt: LabelMap) -> CaseMetrics:
    if pred.shape != gt.shape:
        raise ShapeError(f"{gt.case_id}: prediction shape {pred.shape} != ground truth {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing):
        raise ShapeError(f"{gt.case_id}: spacing {pred.spacing} != {gt.spacing}")
    scores = {"dice": {}, "sensitivity": {}, "hausdorff95": {}}
    for region in EVAL_REGIONS:
        p = subregion_mask(pred, region)
        g = subregion_mask(gt, region)
        scores["dice"][region.value] = dice(p, g)
        scores["sensitivity"][region.value] = sensitivity(p, g)
        scores["hausdorff95"][region.value] = hausdorff95(p, g, gt.spacing)
    return CaseMetrics(gt.case_id, **scores)


def _stats(values) -> dict:
    if len(values) == 0:
        return {name: None for name in STATISTICS}
    v = np.asarray(values, dtype=np.float64)
    return {
        "Mean": float(v.mean()),
        "StdDev": float(v.std()),
        "Median": float(np.percentile(v, 50)),
        "25quantile": float(np.percentile(v, 25)),
        "75quantile": float(np.percentile(v, 75)),
    }


def column_name(metric: str, region) -> str:
    return f"{metric}_{SubregionId(region).value}"


@dataclass(frozen=True)
class SummaryTable:
    """Statistics per (metric, region) column; undefined values are excluded and counted."""

    columns: dict
    excluded: dict
    n_cases: int
    extra: dict = field(default_factory=dict)

    def get(self, statistic: str, metric: str, region) -> float | None:
        return self.columns[column_name(metric, region)][statistic]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        canonical = [column_name(m, r) for m in METRICS for r in EVAL_REGIONS]
        names = [c for c in canonical if c in self.columns] + [c for c in self.columns if c not in canonical]
        writer.writerow(["statistic", *names])
        for stat in STATISTICS:
            row = [self.columns[c][stat] for c in names]
            writer.writerow([stat, *("" if v is None else repr(v) for v in row)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"n_cases": self.n_cases, "columns": self.columns, "excluded": self.excluded, **self.extra}

    @classmethod
    def from_dict(cls, data: dict) -> "SummaryTable":
        extra = {k: v for k, v in data.items() if k not in ("n_cases", "columns", "excluded")}
        return cls(data["columns"], data["excluded"], data["n_cases"], extra)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def aggregate(cases) -> SummaryTable:
    cases = list(cases)
    if not cases:
        raise EmptyInput("no cases to aggregate")
    columns, excluded = {}, {}
    for metric in METRICS:
        for region in EVAL_REGIONS:
            values = [c.value(metric, region) for c in cases]
            defined = [v for v in values if v is not None]
            name = column_name(metric, region)
            columns[name] = _stats(defined)
            excluded[name] = len(values) - len(defined)
    return SummaryTable(columns, excluded, len(cases))


# Focal-loss training-set means reported for the original cohort; carried in
# reports for side-by-side reading only.
REFERENCE_FOCAL_TRAINING_MEANS = {
    "DSC": {"ET": 0.79, "WT": 0.92, "TC": 0.90},
    "Sensitivity": {"ET": 0.79, "WT": 0.90, "TC": 0.88},
    "Hausdorff95": {"ET": 4.07, "WT": 4.23, "TC": 3.75},
}
