"""Intensity normalization, axial slicing and case-level train/validation split."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import LabelMap, MultiModalScan, SubregionId, subregion_mask
from .errors import EmptyDataset, ShapeMismatch, TooFewCases

log = logging.getLogger(__name__)

EPS = 1e-8
DROPPED_SLICES = 10


@dataclass(frozen=True)
class SliceSample:
    image: np.ndarray  # (H, W, 4) float32
    target: np.ndarray  # (H, W) uint8
    case_id: str
    slice_index: int


def zscore_normalize(volume, mask=None):
    """Standardize ``volume`` over ``mask`` (default: nonzero voxels); zero elsewhere.

    A region with zero spread maps to 0 and emits a ``RuntimeWarning``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    region = volume != 0 if mask is None else np.asarray(mask, dtype=bool)
    if region.shape != volume.shape:
        raise ShapeMismatch(f"mask shape {region.shape} != volume shape {volume.shape}")
    out = np.zeros_like(volume)
    if not region.any():
        return out.astype(np.float32)
    values = volume[region]
    mu = values.mean()
    sigma = values.std()
    if sigma == 0:
        warnings.warn("zero intensity spread inside normalization region", RuntimeWarning, stacklevel=2)
    out[region] = (values - mu) / (sigma + EPS)
    return out.astype(np.float32)


def normalize_scan(scan: MultiModalScan) -> MultiModalScan:
    """Per-volume z-score of each modality over its own nonzero voxels."""
    channels = [zscore_normalize(scan.volumes[..., c]) for c in range(scan.volumes.shape[-1])]
    return MultiModalScan(scan.case_id, np.stack(channels, axis=-1), scan.spacing)


def kept_depth(depth: int) -> int:
    if depth <= DROPPED_SLICES:
        raise EmptyDataset(f"volume depth {depth} leaves no slices after dropping the last {DROPPED_SLICES}")
    return depth - DROPPED_SLICES


def extract_slices(scan: MultiModalScan, labels: LabelMap, region) -> list[SliceSample]:
    if scan.shape != labels.shape:
        raise ShapeMismatch(f"{scan.case_id}: scan {scan.shape} vs labels {labels.shape}")
    depth = kept_depth(scan.shape[2])
    target = subregion_mask(labels, SubregionId(region)).astype(np.uint8)
    return [
        SliceSample(
            image=np.ascontiguousarray(scan.volumes[:, :, k, :]),
            target=np.ascontiguousarray(target[:, :, k]),
            case_id=scan.case_id,
            slice_index=k,
        )
        for k in range(depth)
    ]


def stack_slices(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``(N, H, W, 4)`` images and ``(N, H, W)`` targets."""
    if not samples:
        raise EmptyDataset("no slices to stack")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    targets = np.stack([s.target for s in samples]).astype(np.float32)
    return images, targets


def split_dataset(case_ids, fraction: float = 0.75, seed: int = 0) -> tuple[list, list]:
    """Shuffle case ids with ``seed`` and cut at ``round(fraction * N)``.

    The cut is clamped so both sides keep at least one case.
    """
    ids = sorted(case_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise ValueError("duplicate case ids")
    if n < 2:
        raise TooFewCases(f"need at least 2 cases to split, got {n}")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n_train = min(max(math.floor(fraction * n + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [ids[i] for i in sorted(order[:n_train])]
    val = [ids[i] for i in sorted(order[n_train:])]
    return train, val


def preprocessing_version() -> str:
    params = {"normalization": "zscore-nonzero-per-volume", "eps": EPS, "dropped_slices": DROPPED_SLICES}
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12]


class SliceCache:
    """On-disk store of extracted slices keyed by (case, region, preprocessing version)."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, case_id: str, region) -> Path:
        return self.root / f"{case_id}__{SubregionId(region).value}__{preprocessing_version()}.npz"

    def get(self, case_id: str, region):
        path = self.path(case_id, region)
        if not path.exists():
            return None
        with np.load(path) as data:
            images, targets, index = data["images"], data["targets"], data["slice_index"]
        return [
            SliceSample(images[i], targets[i], case_id, int(index[i])) for i in range(len(index))
        ]

    def store(self, case_id: str, region, samples) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(case_id, region)
        tmp = path.with_suffix(".tmp.npz")
        images, targets = stack_slices(samples)
        np.savez(
            tmp,
            images=images,
            targets=targets.astype(np.uint8),
            slice_index=np.array([s.slice_index for s in samples]),
        )
        tmp.replace(path)
        return path
