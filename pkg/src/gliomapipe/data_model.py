"""Case volumes, label maps, tumor subregions and survival metadata."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import InvalidLabel, IoError, MissingModality, ParseError, ShapeMismatch

log = logging.getLogger(__name__)

MODALITIES = ("T1", "T2", "T1c", "FLAIR")
VALID_LABELS = (0, 1, 2, 4)
VOLUME_EXTENSIONS = (".nii.gz", ".nii", ".npy")


class SubregionId(str, enum.Enum):
    WT = "WT"
    TC = "TC"
    ET = "ET"
    NCR = "NCR"
    ED = "ED"

    @property
    def labels(self) -> frozenset[int]:
        return _REGION_LABELS[self]


_REGION_LABELS = {
    SubregionId.WT: frozenset({1, 2, 4}),
    SubregionId.TC: frozenset({1, 4}),
    SubregionId.ET: frozenset({4}),
    SubregionId.NCR: frozenset({1}),
    SubregionId.ED: frozenset({2}),
}

EVAL_REGIONS = (SubregionId.ET, SubregionId.WT, SubregionId.TC)


class ResectionStatus(str, enum.Enum):
    GTR = "GTR"
    STR = "STR"
    NA = "NA"

    @classmethod
    def parse(cls, text: str) -> "ResectionStatus":
        text = text.strip().upper()
        if text in ("GTR", "STR"):
            return cls(text)
        return cls.NA


def _frozen(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass(frozen=True)
class MultiModalScan:
    """Four co-registered volumes stacked on a trailing channel axis (H, W, D, 4)."""

    case_id: str
    volumes: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        volumes = np.asarray(self.volumes, dtype=np.float32)
        if volumes.ndim != 4 or volumes.shape[-1] != len(MODALITIES):
            raise ShapeMismatch(f"{self.case_id}: expected (H, W, D, 4) volumes, got {volumes.shape}")
        if not np.all(np.isfinite(volumes)):
            raise ValueError(f"{self.case_id}: non-finite voxel values")
        object.__setattr__(self, "volumes", _frozen(volumes))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @classmethod
    def from_arrays(cls, case_id, arrays, spacing=(1.0, 1.0, 1.0)):
        """Build a scan from four 3D arrays given in (T1, T2, T1c, FLAIR) order."""
        arrays = [np.asarray(a) for a in arrays]
        if len(arrays) != len(MODALITIES):
            raise ShapeMismatch(f"{case_id}: need {len(MODALITIES)} modalities, got {len(arrays)}")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeMismatch(f"{case_id}: modality shapes differ: {sorted(shapes)}")
        return cls(case_id, np.stack(arrays, axis=-1), spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.volumes.shape[:3]

    def modality(self, name: str) -> np.ndarray:
        return self.volumes[..., MODALITIES.index(name)]

    def brain_mask(self) -> np.ndarray:
        """Voxels that are nonzero in any modality (inputs are skull-stripped)."""
        return np.any(self.volumes != 0, axis=-1)


@dataclass(frozen=True)
class LabelMap:
    case_id: str
    grid: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 3:
            raise ShapeMismatch(f"{self.case_id}: label grid must be 3D, got shape {grid.shape}")
        if grid.dtype.kind == "f":
            bad = ~np.isfinite(grid) | (grid != np.round(grid))
            if bad.any():
                raise InvalidLabel(-1, bad.sum())
        values, counts = np.unique(grid.astype(np.int64), return_counts=True)
        for value, count in zip(values, counts):
            if int(value) not in VALID_LABELS:
                raise InvalidLabel(value, count)
        object.__setattr__(self, "grid", _frozen(grid.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class SurvivalRecord:
    case_id: str
    age: float
    survival_days: float | None = None
    resection_status: ResectionStatus = ResectionStatus.NA

    def __post_init__(self):
        if not self.age > 0:
            raise ValueError(f"{self.case_id}: age must be positive, got {self.age}")
        if self.survival_days is not None and self.survival_days < 0:
            raise ValueError(f"{self.case_id}: negative survival days {self.survival_days}")


@dataclass(frozen=True)
class NamingConvention:
    """File naming inside a case directory: ``<case_id>_<suffix><ext>``."""

    modality_suffixes: dict = field(
        default_factory=lambda: {"T1": "t1", "T2": "t2", "T1c": "t1ce", "FLAIR": "flair"}
    )
    label_suffix: str = "seg"
    extensions: tuple = VOLUME_EXTENSIONS

    def find(self, case_dir: Path, suffix: str) -> Path | None:
        case_dir = Path(case_dir)
        for ext in self.extensions:
            candidate = case_dir / f"{case_dir.name}_{suffix}{ext}"
            if candidate.exists():
                return candidate
        return None


DEFAULT_NAMING = NamingConvention()


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a 3D grid and its voxel spacing; .npy files get 1 mm spacing."""
    path = Path(path)
    try:
        if path.name.endswith(".npy"):
            return np.load(path, allow_pickle=False), (1.0, 1.0, 1.0)
        image = nib.load(str(path))
        grid = np.asanyarray(image.dataobj)
        zooms = image.header.get_zooms()[:3]
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise IoError(f"cannot read volume {path}: {exc}") from exc
    spacing = tuple(float(z) for z in zooms) if len(zooms) == 3 else ()
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        spacing = (1.0, 1.0, 1.0)
    return grid, spacing


def write_volume(path, grid, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a grid as NIfTI with a diagonal affine carrying the spacing."""
    path = Path(path)
    grid = np.asarray(grid)
    if path.name.endswith(".npy"):
        np.save(path, grid)
        return
    image = nib.Nifti1Image(grid, np.diag([*spacing, 1.0]))
    image.header.set_data_dtype(grid.dtype)
    # fixed header fields keep written bytes reproducible
    image.header["descrip"] = b"gliomapipe"
    nib.save(image, str(path))


def load_scan(case_dir, naming: NamingConvention = DEFAULT_NAMING) -> MultiModalScan:
    case_dir = Path(case_dir)
    arrays = []
    spacing = None
    for name in MODALITIES:
        path = naming.find(case_dir, naming.modality_suffixes[name])
        if path is None:
            raise MissingModality(name, case_dir)
        grid, vol_spacing = read_volume(path)
        if grid.ndim != 3:
            raise ShapeMismatch(f"{path}: expected a 3D volume, got shape {grid.shape}")
        if arrays and grid.shape != arrays[0].shape:
            raise ShapeMismatch(f"{case_dir.name}: {name} has shape {grid.shape}, expected {arrays[0].shape}")
        arrays.append(np.asarray(grid, dtype=np.float32))
        spacing = spacing or vol_spacing
    return MultiModalScan.from_arrays(case_dir.name, arrays, spacing)


def load_label_map(path, case_id: str | None = None) -> LabelMap:
    path = Path(path)
    grid, spacing = read_volume(path)
    if case_id is None:
        case_id = path.name.split(".")[0].removesuffix("_seg")
    return LabelMap(case_id, grid, spacing)


def save_label_map(labels: LabelMap, path) -> None:
    write_volume(path, labels.grid.astype(np.uint8), labels.spacing)


def subregion_mask(labels: LabelMap | np.ndarray, region: SubregionId | str) -> np.ndarray:
    grid = labels.grid if isinstance(labels, LabelMap) else np.asarray(labels)
    region = SubregionId(region)
    return np.isin(grid, sorted(region.labels))


@dataclass(frozen=True)
class SurvivalColumns:
    case_id: str = "BraTS19ID"
    age: str = "Age"
    survival: str = "Survival"
    resection: str = "ResectionStatus"


def load_survival_table(path, columns: SurvivalColumns = SurvivalColumns()) -> list[SurvivalRecord]:
    """Parse the survival CSV. Blank survival cells become ``None``, never zero."""
    path = Path(path)
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    records = []
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(1, "empty file") from None
        try:
            i_case = header.index(columns.case_id)
            i_age = header.index(columns.age)
        except ValueError:
            raise ParseError(1, f"header must contain {columns.case_id!r} and {columns.age!r}") from None
        i_surv = header.index(columns.survival) if columns.survival in header else None
        i_res = header.index(columns.resection) if columns.resection in header else None

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(line, f"expected {len(header)} fields, got {len(row)}")
            case_id = row[i_case].strip()
            if not case_id:
                raise ParseError(line, "empty case id")
            try:
                age = float(row[i_age])
            except ValueError:
                raise ParseError(line, f"non-numeric age {row[i_age]!r}") from None
            if not (math.isfinite(age) and age > 0):
                raise ParseError(line, f"age must be positive, got {age}")
            days = None
            if i_surv is not None and row[i_surv].strip():
                try:
                    days = float(row[i_surv])
                except ValueError:
                    raise ParseError(line, f"non-numeric survival {row[i_surv]!r}") from None
                if not (math.isfinite(days) and days >= 0):
                    raise ParseError(line, f"survival days must be >= 0, got {days}")
            status = ResectionStatus.parse(row[i_res]) if i_res is not None else ResectionStatus.NA
            records.append(SurvivalRecord(case_id, age, days, status))
    return records


def find_case_dirs(root, naming: NamingConvention = DEFAULT_NAMING) -> list[Path]:
    """Case directories under ``root`` holding any modality or label file, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        return []
    suffixes = [*naming.modality_suffixes.values(), naming.label_suffix]
    return sorted(p for p in root.iterdir() if p.is_dir() and any(naming.find(p, s) for s in suffixes))
