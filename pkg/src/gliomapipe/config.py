"""Pipeline configuration schema (YAML or JSON on disk)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data_model import MODALITIES, NamingConvention, SurvivalColumns
from .errors import ConfigError
from .losses import FocalParams
from .network import NetworkSpec
from .survival import ForestParams
from .trainer import CascadeConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NamingSection(_Strict):
    T1: str = "t1"
    T2: str = "t2"
    T1c: str = "t1ce"
    FLAIR: str = "flair"
    label: str = "seg"
    extension: str = ".nii.gz"

    def convention(self) -> NamingConvention:
        suffixes = {m: getattr(self, m) for m in MODALITIES}
        return NamingConvention(suffixes, self.label, (self.extension,))


class ColumnsSection(_Strict):
    case_id: str = "BraTS19ID"
    age: str = "Age"
    survival: str = "Survival"
    resection: str = "ResectionStatus"

    def columns(self) -> SurvivalColumns:
        return SurvivalColumns(self.case_id, self.age, self.survival, self.resection)


class DataSection(_Strict):
    cases_dir: Path = Path("data")
    survival_csv: Path | None = None
    naming: NamingSection = NamingSection()
    columns: ColumnsSection = ColumnsSection()


class PreprocessSection(_Strict):
    split_fraction: float = Field(0.75, gt=0, lt=1)
    cache: bool = True


class NetworkSection(_Strict):
    encoder_maps: tuple[int, int, int] = (64, 128, 256)
    decoder_maps: tuple[int, int] = (128, 64)
    dense_block_depth: int = Field(3, ge=1)

    def spec(self, height: int = 240, width: int = 240) -> NetworkSpec:
        return NetworkSpec((height, width, 4), self.encoder_maps, self.decoder_maps, self.dense_block_depth)

    @model_validator(mode="after")
    def _check(self):
        try:
            self.spec(8, 8)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return self


class FocalSection(_Strict):
    alpha: float = Field(0.25, gt=0, le=1)
    gamma: float = Field(2.0, ge=0)


class TrainingSection(_Strict):
    loss: Literal["dice", "focal"] = "dice"
    focal: FocalSection = FocalSection()
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    regions: tuple[Literal["WT", "NCR", "ED", "ET"], ...] = ("WT", "NCR", "ED", "ET")
    max_steps: int | None = Field(None, ge=0)
    threshold: float = Field(0.5, gt=0, lt=1)

    @field_validator("regions")
    @classmethod
    def _wt_first(cls, v):
        if not v or v[0] != "WT":
            raise ValueError("whole tumor (WT) must be the first stage")
        if len(set(v)) != len(v):
            raise ValueError("duplicate stage")
        return v


class SurvivalSection(_Strict):
    n_trees: int = Field(100, ge=1)
    max_depth: int | None = Field(None, ge=1)
    min_samples_leaf: int = Field(2, ge=1)
    max_features: int | None = Field(None, ge=1)
    thresholds: tuple[float, float] = (300.0, 450.0)
    oob: bool = False

    @field_validator("thresholds")
    @classmethod
    def _ordered(cls, v):
        if not v[0] < v[1]:
            raise ValueError("thresholds must be increasing")
        return v

    def forest_params(self) -> ForestParams:
        return ForestParams(self.n_trees, self.max_depth, self.min_samples_leaf, self.max_features)


class PipelineConfig(_Strict):
    seed: int = 0
    work_dir: Path = Path("run")
    data: DataSection = DataSection()
    preprocess: PreprocessSection = PreprocessSection()
    network: NetworkSection = NetworkSection()
    training: TrainingSection = TrainingSection()
    survival: SurvivalSection = SurvivalSection()

    def cascade(self) -> CascadeConfig:
        t = self.training
        return CascadeConfig(
            loss=t.loss,
            focal=FocalParams(t.focal.alpha, t.focal.gamma),
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            seed=self.seed,
            split_fraction=self.preprocess.split_fraction,
            regions=t.regions,
            max_steps=t.max_steps,
            threshold=t.threshold,
        )

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_config(raw: dict | None, base_dir: Path | None = None) -> PipelineConfig:
    """Validate a mapping; relative paths resolve against ``base_dir``."""
    try:
        cfg = PipelineConfig.model_validate(raw or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], path or "<root>") from None
    if base_dir is not None:
        cfg = _resolve(cfg, Path(base_dir))
    return cfg


def _resolve(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    def fix(p):
        return p if p is None or p.is_absolute() else base / p

    data = cfg.data.model_copy(update={"cases_dir": fix(cfg.data.cases_dir), "survival_csv": fix(cfg.data.survival_csv)})
    return cfg.model_copy(update={"work_dir": fix(cfg.work_dir), "data": data})


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML/JSON: {exc}", str(path)) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", str(path))
    return parse_config(raw, path.parent)
