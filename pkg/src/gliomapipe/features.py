"""Survival features: tumor volume statistics, tumor-core shape descriptors, age."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

from .data_model import LabelMap, SubregionId, subregion_mask
from .errors import EmptyBrainMask, EmptyRegion, ParseError, ShapeError
from .metrics import boundary

STATISTICAL_NAMES = (
    "edema_voxels",
    "necrosis_voxels",
    "enhancing_voxels",
    "tumor_extent",
    "tumor_proportion",
)
SHAPE_NAMES = (
    "elongation",
    "flatness",
    "minor_axis_mm",
    "major_axis_mm",
    "diam2d_row_mm",
    "diam2d_col_mm",
    "diam2d_slice_mm",
    "diam3d_mm",
    "sphericity",
    "surface_area_mm2",
    "mesh_volume_mm3",
)
FEATURE_NAMES = STATISTICAL_NAMES + SHAPE_NAMES + ("age_years",)


def names_fingerprint(names=FEATURE_NAMES) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


def statistical_features(labels: LabelMap, brain_mask) -> np.ndarray:
    grid = labels.grid if isinstance(labels, LabelMap) else np.asarray(labels)
    brain_mask = np.asarray(brain_mask, dtype=bool)
    if brain_mask.shape != grid.shape:
        raise ShapeError(f"brain mask {brain_mask.shape} != labels {grid.shape}")
    n_brain = int(brain_mask.sum())
    if n_brain == 0:
        raise EmptyBrainMask("brain mask has no voxels")
    wt = subregion_mask(grid, SubregionId.WT)
    counts = [float((grid == value).sum()) for value in (2, 1, 4)]
    if not wt.any():
        return np.array(counts + [0.0, 0.0])
    idx = np.nonzero(wt)
    bbox = np.prod([int(i.max()) - int(i.min()) + 1 for i in idx])
    return np.array(counts + [bbox / n_brain, wt.sum() / n_brain], dtype=np.float64)


def max_pairwise_distance(points: np.ndarray) -> float:
    """Largest distance between any two rows of ``points``."""
    if len(points) < 2:
        return 0.0
    candidates = points
    if len(points) > points.shape[1] + 1:
        try:
            candidates = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            # flat or collinear point sets; exhaustive search below
            candidates = np.unique(points, axis=0)
    best = 0.0
    for start in range(0, len(candidates), 2048):
        block = cdist(candidates[start:start + 2048], candidates)
        best = max(best, float(block.max()))
    return best


def _plane_diameter(coords_mm: np.ndarray, index: np.ndarray, axis: int) -> float:
    keep = [a for a in range(3) if a != axis]
    best = 0.0
    for plane in np.unique(index[:, axis]):
        sel = index[:, axis] == plane
        best = max(best, max_pairwise_distance(coords_mm[sel][:, keep]))
    return best


def exposed_surface_area(mask: np.ndarray, spacing) -> float:
    """Area of voxel faces between the mask and its complement (grid edge is outside)."""
    padded = np.pad(mask.astype(np.int8), 1)
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    return float(sum(np.abs(np.diff(padded, axis=a)).sum() * face_area[a] for a in range(3)))


def shape_features(tc_mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    mask = np.asarray(tc_mask, dtype=bool)
    if mask.ndim != 3:
        raise ShapeError(f"expected a 3D mask, got shape {mask.shape}")
    if not mask.any():
        raise EmptyRegion("tumor core mask is empty")
    spacing = np.asarray(spacing, dtype=np.float64)

    coords = np.argwhere(mask) * spacing
    centred = coords - coords.mean(axis=0)
    cov = centred.T @ centred / len(coords)
    eig = np.sort(np.clip(np.linalg.eigvalsh(cov), 0.0, None))[::-1]
    major, minor, least = eig
    if major > 0:
        elongation = math.sqrt(minor / major)
        flatness = math.sqrt(least / major)
    else:
        elongation = flatness = 1.0

    edge_index = np.argwhere(boundary(mask))
    edge_mm = edge_index * spacing
    diam_row = _plane_diameter(edge_mm, edge_index, 0)
    diam_col = _plane_diameter(edge_mm, edge_index, 1)
    diam_slice = _plane_diameter(edge_mm, edge_index, 2)
    diam3d = max_pairwise_distance(edge_mm)

    area = exposed_surface_area(mask, spacing)
    volume = float(mask.sum() * np.prod(spacing))
    sphericity = (36 * math.pi * volume**2) ** (1 / 3) / area

    return np.array(
        [
            elongation,
            flatness,
            4 * math.sqrt(minor),
            4 * math.sqrt(major),
            diam_row,
            diam_col,
            diam_slice,
            diam3d,
            sphericity,
            area,
            volume,
        ]
    )


@dataclass(frozen=True)
class FeatureVector:
    case_id: str
    values: np.ndarray
    empty_core: bool = False
    names: tuple = FEATURE_NAMES

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.names),):
            raise ShapeError(f"expected {len(self.names)} features, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.case_id}: non-finite feature value")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))


def build_feature_vector(labels: LabelMap, brain_mask, age: float, case_id: str | None = None) -> FeatureVector:
    stats = statistical_features(labels, brain_mask)
    tc = subregion_mask(labels, SubregionId.TC)
    empty = not tc.any()
    shape = np.zeros(len(SHAPE_NAMES)) if empty else shape_features(tc, labels.spacing)
    values = np.concatenate([stats, shape, [float(age)]])
    return FeatureVector(case_id or labels.case_id, values, empty)


def write_features_csv(vectors, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", *FEATURE_NAMES, "empty_core"])
        for vec in vectors:
            writer.writerow([vec.case_id, *(repr(float(v)) for v in vec.values), int(vec.empty_core)])
    tmp.replace(path)


def read_features_csv(path) -> tuple[list[str], np.ndarray, tuple]:
    """Return ``(case_ids, X, names)``; the column set must match :data:`FEATURE_NAMES`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "case_id":
            raise ParseError(1, "feature CSV must start with a case_id column")
        names = tuple(h for h in header[1:] if h != "empty_core")
        width = len(names)
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(reader.line_num, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:1 + width]])
            except ValueError as exc:
                raise ParseError(reader.line_num, str(exc)) from None
            ids.append(row[0])
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), width), names
