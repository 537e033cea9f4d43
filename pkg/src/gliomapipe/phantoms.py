"""Synthetic brain phantoms with nested ellipsoidal tumors.

Each case is an ellipsoidal "brain" holding a tumor made of three nested
ellipsoids: edema (label 2) outside, an enhancing shell (label 4), and a
necrotic core (label 1). Every tissue class has its own contrast in each of
the four modalities, plus Gaussian noise.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data_model import MODALITIES, LabelMap, MultiModalScan, NamingConvention, write_volume

# (T1, T2, T1c, FLAIR) mean intensity per label
CONTRAST = {
    0: (100.0, 100.0, 100.0, 100.0),
    2: (90.0, 160.0, 100.0, 175.0),
    4: (80.0, 130.0, 210.0, 140.0),
    1: (55.0, 195.0, 65.0, 115.0),
}
NOISE_SD = 6.0


def _ellipsoid(grid, centre, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0


def make_phantom_case(case_id: str, shape=(64, 64, 32), seed: int = 0):
    """Return ``(scan, labels)`` for one synthetic case (raw intensities, 1 mm spacing)."""
    rng = np.random.default_rng(seed)
    h, w, d = shape
    grid = np.indices(shape, dtype=np.float64)
    brain = _ellipsoid(grid, ((h - 1) / 2, (w - 1) / 2, (d - 1) / 2), (0.46 * h, 0.44 * w, 0.6 * d))

    radii = np.array([rng.uniform(0.14, 0.22) * h, rng.uniform(0.14, 0.22) * w, rng.uniform(0.16, 0.26) * d])
    usable = max(d - 10, 1)
    centre = np.array(
        [
            rng.uniform(0.35, 0.65) * h,
            rng.uniform(0.35, 0.65) * w,
            rng.uniform(0.4, 0.6) * usable,
        ]
    )
    labels = np.zeros(shape, dtype=np.uint8)
    labels[_ellipsoid(grid, centre, radii) & brain] = 2
    labels[_ellipsoid(grid, centre, 0.62 * radii) & brain] = 4
    labels[_ellipsoid(grid, centre, 0.32 * radii) & brain] = 1

    volumes = np.zeros(shape + (len(MODALITIES),), dtype=np.float32)
    for value, means in CONTRAST.items():
        region = (labels == value) & brain
        volumes[region] = means
    volumes += rng.normal(0.0, NOISE_SD, volumes.shape).astype(np.float32)
    volumes[~brain] = 0.0
    return MultiModalScan(case_id, volumes), LabelMap(case_id, labels)


def make_phantom_cohort(n_cases: int = 4, shape=(64, 64, 32), seed: int = 0):
    """List of ``(scan, labels)`` pairs with ids ``phantom_000`` ..."""
    seeds = np.random.SeedSequence(seed).generate_state(n_cases)
    return [make_phantom_case(f"phantom_{i:03d}", shape, int(s)) for i, s in enumerate(seeds)]


def phantom_survival(labels: LabelMap, seed: int) -> tuple[float, float]:
    """Synthetic (age, survival days) loosely tied to necrosis volume and age."""
    rng = np.random.default_rng(seed)
    age = float(np.round(rng.uniform(35, 80), 1))
    necrosis = float((labels.grid == 1).sum())
    days = 1100 - 9.0 * age - 0.35 * necrosis + rng.normal(0, 40)
    return age, float(np.round(max(days, 30.0), 0))


def write_phantom_cohort(root, n_cases: int = 4, shape=(64, 64, 32), seed: int = 0,
                         naming: NamingConvention = NamingConvention(), ext: str = ".nii.gz") -> Path:
    """Write case directories plus ``survival.csv`` under ``root``; returns ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (scan, labels) in enumerate(make_phantom_cohort(n_cases, shape, seed)):
        case_dir = root / scan.case_id
        case_dir.mkdir(exist_ok=True)
        for c, name in enumerate(MODALITIES):
            path = case_dir / f"{scan.case_id}_{naming.modality_suffixes[name]}{ext}"
            write_volume(path, scan.volumes[..., c], scan.spacing)
        write_volume(case_dir / f"{scan.case_id}_{naming.label_suffix}{ext}", labels.grid, labels.spacing)
        age, days = phantom_survival(labels, seed + i)
        status = "STR" if i % 5 == 4 else "GTR"
        rows.append((scan.case_id, age, days, status))
    with open(root / "survival.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["BraTS19ID", "Age", "Survival", "ResectionStatus"])
        for case_id, age, days, status in rows:
            writer.writerow([case_id, age, int(days), status])
    return root
