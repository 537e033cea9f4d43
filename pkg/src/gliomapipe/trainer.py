"""Whole-tumor first, then subregions initialised from it; merged inference."""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_model import LabelMap, MultiModalScan, SubregionId
from .errors import ConfigError, IncompatibleWeights, PipelineError, ShapeError, StageError, TrainingDiverged
from .losses import FocalParams, make_loss
from .network import (
    NetworkSpec,
    WeightSet,
    build_network,
    get_weights,
    predict,
    save_weights,
    set_weights,
)
from .preprocess import extract_slices, kept_depth, normalize_scan, split_dataset, stack_slices

log = logging.getLogger(__name__)

SUBREGION_STAGES = (SubregionId.NCR, SubregionId.ED, SubregionId.ET)


@dataclass(frozen=True)
class CascadeConfig:
    loss: str = "dice"
    focal: FocalParams = FocalParams()
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    split_fraction: float = 0.75
    regions: tuple = ("WT", "NCR", "ED", "ET")
    max_steps: int | None = None
    threshold: float = 0.5

    def __post_init__(self):
        regions = tuple(SubregionId(r).value for r in self.regions)
        object.__setattr__(self, "regions", regions)
        if not regions or regions[0] != "WT":
            raise ConfigError("whole tumor (WT) must be the first cascade stage", "training.regions")
        if "WT" in regions[1:]:
            raise ConfigError("WT may appear only once", "training.regions")
        if self.loss not in ("dice", "focal"):
            raise ConfigError(f"unknown loss {self.loss!r}", "training.loss")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required", "training")


@dataclass
class StageData:
    train_images: np.ndarray
    train_targets: np.ndarray
    val_images: np.ndarray
    val_targets: np.ndarray

    @classmethod
    def from_cases(cls, cases, train_ids, val_ids, region, cache=None) -> "StageData":
        """Slices for ``region``; ``cache`` (a SliceCache) is consulted before extracting."""
        by_id = {scan.case_id: (scan, labels) for scan, labels in cases}

        def gather(ids):
            samples = []
            for case_id in ids:
                cached = cache.get(case_id, region) if cache is not None else None
                samples.extend(cached if cached is not None else extract_slices(*by_id[case_id], region))
            return stack_slices(samples) if samples else (np.zeros((0, 1, 1, 4), np.float32), np.zeros((0, 1, 1), np.float32))

        return cls(*gather(train_ids), *gather(val_ids))


@dataclass
class TrainReport:
    region: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float | None = None
    best_epoch: int = 0
    steps: int = 0
    seed: int = 0
    wall_clock: float = 0.0
    weights_checksum: str = ""
    init_checksum: str | None = None

    def to_dict(self, with_timing: bool = True) -> dict:
        out = asdict(self)
        if not with_timing:
            out.pop("wall_clock")
        return out


def _batch_loss(network, loss_fn, images, targets):
    pred = network(torch.from_numpy(images))[..., 0]
    return loss_fn(pred, torch.from_numpy(targets))


def dataset_loss(network, loss_fn, images, targets, batch_size=8) -> float | None:
    """Loss over a whole slice set, computed from batched probabilities."""
    if len(images) == 0:
        return None
    probs = predict(network, images, batch_size)
    return float(loss_fn(torch.from_numpy(probs).double(), torch.from_numpy(targets).double()))


def train_stage(region, data: StageData, init: WeightSet | None, config: CascadeConfig,
                spec: NetworkSpec, on_epoch=None) -> tuple[WeightSet, TrainReport]:
    """Adam on mini-batches; returns the weights with the lowest validation loss.

    ``on_epoch(epoch, network, report)`` runs after every epoch; a truthy
    return value ends training early.
    """
    region = SubregionId(region).value
    started = time.perf_counter()
    network = build_network(spec, config.seed)
    if init is not None:
        set_weights(network, init)
    loss_fn = make_loss(config.loss, config.focal)
    report = TrainReport(region=region, seed=config.seed, init_checksum=init.checksum() if init else None)
    report.initial_val_loss = dataset_loss(network, loss_fn, data.val_images, data.val_targets, config.batch_size)

    best_state = copy.deepcopy(network.state_dict())
    best_val = report.initial_val_loss if report.initial_val_loss is not None else np.inf
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    n = len(data.train_images)

    for epoch in range(config.epochs):
        if config.max_steps is not None and report.steps >= config.max_steps:
            break
        network.train()
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and report.steps >= config.max_steps:
                break
            idx = np.sort(order[start:start + config.batch_size])
            optimizer.zero_grad()
            loss = _batch_loss(network, loss_fn, data.train_images[idx], data.train_targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, region)
            loss.backward()
            optimizer.step()
            report.steps += 1
            batch_losses.append(float(loss.detach()))
        report.train_loss.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))

        val = dataset_loss(network, loss_fn, data.val_images, data.val_targets, config.batch_size)
        if val is None:
            val = report.train_loss[-1]
        if not np.isfinite(val):
            raise TrainingDiverged(epoch, region)
        report.val_loss.append(val)
        # strict improvement keeps the earliest of equal minima
        if val < best_val or (epoch == 0 and report.initial_val_loss is None):
            best_val = val
            best_state = copy.deepcopy(network.state_dict())
            report.best_epoch = epoch + 1
        log.info("%s epoch %d: train %.4f val %.4f", region, epoch + 1, report.train_loss[-1], val)
        if on_epoch is not None and on_epoch(epoch + 1, network, report):
            break

    network.load_state_dict(best_state)
    weights = get_weights(network).with_metadata(spec=spec_to_dict(spec), stage=region)
    report.weights_checksum = weights.checksum()
    report.wall_clock = time.perf_counter() - started
    return weights, report


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "encoder_maps": list(spec.encoder_maps),
        "decoder_maps": list(spec.decoder_maps),
        "dense_block_depth": spec.dense_block_depth,
    }


def spec_from_weights(weights: WeightSet, height: int, width: int) -> NetworkSpec:
    meta = weights.metadata.get("spec")
    if meta is None:
        raise IncompatibleWeights("weights carry no network description")
    spec = NetworkSpec((height, width, 4), tuple(meta["encoder_maps"]), tuple(meta["decoder_maps"]),
                       meta["dense_block_depth"])
    if spec.fingerprint() != weights.fingerprint:
        raise IncompatibleWeights("stored network description does not match the weight fingerprint")
    return spec


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class CascadeResult:
    weights: dict
    reports: dict
    paths: dict
    train_ids: list
    val_ids: list


def run_cascade(config: CascadeConfig, cases, spec: NetworkSpec, out_dir=None,
                normalized: bool = False, cache=None) -> CascadeResult:
    """Train WT from scratch, then each remaining region from the WT weights.

    ``cases`` is a list of ``(MultiModalScan, LabelMap)``. With ``out_dir``
    every stage is written to ``<out_dir>/<REGION>.safetensors`` and subregion
    files record the SHA-256 of the WT file as their parent.
    """
    cases = list(cases)
    if not normalized:
        cases = [(normalize_scan(scan), labels) for scan, labels in cases]
    train_ids, val_ids = split_dataset([s.case_id for s, _ in cases], config.split_fraction, config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None

    weights, reports, paths = {}, {}, {}
    parent = None
    wt_weights = None
    for region in config.regions:
        try:
            data = StageData.from_cases(cases, train_ids, val_ids, region, cache)
            init = None if region == "WT" else wt_weights
            w, report = train_stage(region, data, init, config, spec)
        except PipelineError as exc:
            raise StageError(region, exc) from exc
        w = w.with_metadata(parent=parent, seed=config.seed)
        weights[region], reports[region] = w, report
        if region == "WT":
            wt_weights = w
        if out_dir is not None:
            paths[region] = save_weights(w, out_dir / f"{region}.safetensors")
            if region == "WT":
                parent = file_sha256(paths[region])
        elif region == "WT":
            parent = w.checksum()
    return CascadeResult(weights, reports, paths, train_ids, val_ids)


def merge_subregion_masks(ncr, ed, et, case_id: str = "merged", spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    """Combine binary masks with priority ET (4) > NCR (1) > ED (2)."""
    ncr, ed, et = (np.asarray(m, dtype=bool) for m in (ncr, ed, et))
    if not (ncr.shape == ed.shape == et.shape):
        raise ShapeError(f"mask shapes differ: {ncr.shape}, {ed.shape}, {et.shape}")
    grid = np.zeros(ncr.shape, dtype=np.uint8)
    grid[ed] = 2
    grid[ncr] = 1
    grid[et] = 4
    return LabelMap(case_id, grid, spacing)


def probability_maps(weights: dict, scan: MultiModalScan, batch_size: int = 8) -> dict:
    """Per-region probability volumes; slices beyond the kept depth are 0."""
    h, w, d = scan.shape
    depth = kept_depth(d)
    images = np.ascontiguousarray(np.moveaxis(scan.volumes[:, :, :depth, :], 2, 0))
    maps = {}
    for region in SUBREGION_STAGES:
        ws = weights[region.value] if region.value in weights else weights[region]
        spec = spec_from_weights(ws, h, w)
        net = build_network(spec, seed=0)
        set_weights(net, ws)
        probs = np.zeros((h, w, d), dtype=np.float32)
        probs[:, :, :depth] = np.moveaxis(predict(net, images, batch_size), 0, 2)
        maps[region.value] = probs
    return maps


def labels_from_probabilities(maps: dict, threshold: float = 0.5, case_id: str = "merged",
                              spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    masks = {k: np.asarray(v) >= threshold for k, v in maps.items()}
    return merge_subregion_masks(masks["NCR"], masks["ED"], masks["ET"], case_id, spacing)


def segment_volume(weights: dict, scan: MultiModalScan, threshold: float = 0.5) -> LabelMap:
    """Segment a normalized scan with the NCR, ED and ET networks and merge."""
    maps = probability_maps(weights, scan)
    return labels_from_probabilities(maps, threshold, scan.case_id, scan.spacing)


def predict_region_volume(weights: WeightSet, scan: MultiModalScan, threshold: float = 0.5) -> np.ndarray:
    """Binary 3D mask from a single region network (e.g. WT) on a normalized scan."""
    h, w, d = scan.shape
    depth = kept_depth(d)
    net = build_network(spec_from_weights(weights, h, w), seed=0)
    set_weights(net, weights)
    images = np.ascontiguousarray(np.moveaxis(scan.volumes[:, :, :depth, :], 2, 0))
    mask = np.zeros((h, w, d), dtype=bool)
    mask[:, :, :depth] = np.moveaxis(predict(net, images), 0, 2) >= threshold
    return mask
