"""Random-forest regression of overall survival and its evaluation report."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load as st_load
from safetensors.numpy import save as st_save
from scipy.stats import rankdata

from .data_model import ResectionStatus, SurvivalRecord
from .errors import (
    FeatureSchemaMismatch,
    InvalidFeature,
    InvalidInput,
    IoError,
    ShapeError,
    TooFewSamples,
)

META_KEY = "gliomapipe"
DEFAULT_THRESHOLDS = (300.0, 450.0)

# Published OS scores on the original cohort (GTR cases); report fixture only.
REFERENCE_OS = {
    "Training": {"accuracy": 0.554, "mse": 57633.216, "medianse": 9467.29, "stdse": 126525.112, "spearmanr": 0.657},
    "Validation": {"accuracy": 0.517, "mse": 121803.886, "medianse": 46096.09, "stdse": 161666.751, "spearmanr": 0.128},
}


class SurvivalClass(enum.IntEnum):
    short = 0
    medium = 1
    long = 2


def filter_gtr(records, require_days: bool = True) -> list[SurvivalRecord]:
    """GTR records; with ``require_days`` only those whose survival is known."""
    return [
        r for r in records
        if r.resection_status == ResectionStatus.GTR and (r.survival_days is not None or not require_days)
    ]


def classify(days: float, thresholds=DEFAULT_THRESHOLDS) -> SurvivalClass:
    t1, t2 = thresholds
    if not t1 < t2:
        raise InvalidInput(f"thresholds must satisfy t1 < t2, got {thresholds}")
    if days < 0 or not math.isfinite(days):
        raise InvalidInput(f"survival days must be finite and >= 0, got {days}")
    if days < t1:
        return SurvivalClass.short
    if days <= t2:
        return SurvivalClass.medium
    return SurvivalClass.long


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 2
    max_features: int | None = None  # None -> ceil(sqrt(n_features))

    def n_split_features(self, n_features: int) -> int:
        if self.max_features is None:
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, min(self.max_features, n_features))


@dataclass
class Tree:
    """Flat regression tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return self.value[node]
            r, n = rows[active], node[active]
            go_left = X[r, feat[active]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])


def _best_split(x, y, min_leaf):
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(ys)
    csum = np.cumsum(ys)
    n_left = np.arange(1, n)
    s_left = csum[:-1]
    s_right = csum[-1] - s_left
    score = s_left**2 / n_left + s_right**2 / (n - n_left)
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    i = int(np.argmax(score))
    return score[i], 0.5 * (xs[i] + xs[i + 1])


def fit_tree(X, y, params: ForestParams, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    k = params.n_split_features(n_features)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(value) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yi = y[idx]
        if (
            len(idx) < 2 * params.min_samples_leaf
            or (params.max_depth is not None and depth >= params.max_depth)
            or np.all(yi == yi[0])
        ):
            continue
        best = None
        for f in rng.choice(n_features, size=k, replace=False):
            found = _best_split(X[idx, f], yi, params.min_samples_leaf)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        _, f, thr = best
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


@dataclass
class ForestModel:
    trees: list
    params: ForestParams
    feature_names: tuple
    seed: int
    oob_prediction: np.ndarray | None = None
    oob_r2: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        from .features import names_fingerprint

        return names_fingerprint(self.feature_names)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.feature_names):
            raise FeatureSchemaMismatch(f"model expects {len(self.feature_names)} features, got {X.shape[1]}")
        out = np.mean([t.predict(X) for t in self.trees], axis=0)
        return np.maximum(out, 0.0)


def _check_matrix(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"feature matrix must be 2D, got shape {X.shape}")
    bad = ~np.isfinite(X)
    if bad.any():
        raise InvalidFeature(int(np.argwhere(bad)[0, 1]))
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(X),):
            raise ShapeError(f"{len(X)} feature rows but target shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise InvalidInput("non-finite survival target")
    return X, y


def r2_score(y, pred) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def fit_rfr(X, y, params: ForestParams = ForestParams(), seed: int = 0, feature_names=None) -> ForestModel:
    """Bootstrap-aggregated regression trees with per-split feature subsampling."""
    X, y = _check_matrix(X, y)
    n = len(y)
    if n < 5:
        raise TooFewSamples(f"need at least 5 samples, got {n}")
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(X.shape[1]))
    feature_names = tuple(feature_names)
    if len(feature_names) != X.shape[1]:
        raise FeatureSchemaMismatch(f"{len(feature_names)} names for {X.shape[1]} columns")

    oob_sum = np.zeros(n)
    oob_count = np.zeros(n)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(params.n_trees):
        rng = np.random.default_rng(child)
        sample = rng.integers(0, n, size=n)
        tree = fit_tree(X[sample], y[sample], params, rng)
        trees.append(tree)
        out_of_bag = np.ones(n, dtype=bool)
        out_of_bag[sample] = False
        if out_of_bag.any():
            oob_sum[out_of_bag] += tree.predict(X[out_of_bag])
            oob_count[out_of_bag] += 1

    covered = oob_count > 0
    oob_pred = np.full(n, np.nan)
    oob_pred[covered] = oob_sum[covered] / oob_count[covered]
    oob_r2 = r2_score(y[covered], oob_pred[covered]) if covered.sum() >= 2 else None
    return ForestModel(trees, params, feature_names, seed, oob_pred, oob_r2)


def predict_days(model: ForestModel, x, feature_names=None) -> float | np.ndarray:
    """Mean tree prediction clamped at 0. Accepts a FeatureVector, one row, or a matrix."""
    names = getattr(x, "names", feature_names)
    values = getattr(x, "values", x)
    if names is not None and tuple(names) != model.feature_names:
        raise FeatureSchemaMismatch("feature names differ from the ones the model was trained on")
    values = np.asarray(values, dtype=np.float64)
    out = model.predict(values)
    return float(out[0]) if values.ndim == 1 else out


def save_model(model: ForestModel, path) -> Path:
    """Store every tree as flat arrays in a safetensors container."""
    path = Path(path)
    offsets = np.cumsum([0] + [len(t.value) for t in model.trees]).astype(np.int64)
    tensors = {
        "offsets": offsets,
        "feature": np.concatenate([t.feature for t in model.trees]),
        "threshold": np.concatenate([t.threshold for t in model.trees]),
        "left": np.concatenate([t.left for t in model.trees]),
        "right": np.concatenate([t.right for t in model.trees]),
        "value": np.concatenate([t.value for t in model.trees]),
    }
    if model.oob_prediction is not None:
        tensors["oob_prediction"] = np.asarray(model.oob_prediction, dtype=np.float64)
    meta = {
        "params": asdict(model.params),
        "feature_names": list(model.feature_names),
        "fingerprint": model.fingerprint,
        "seed": model.seed,
        "oob_r2": model.oob_r2,
        "extra": model.extra,
    }
    blob = st_save(tensors, metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_model(path) -> ForestModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
        tensors = st_load(blob)
        header = json.loads(blob[8:8 + int.from_bytes(blob[:8], "little")])
        meta = json.loads(header["__metadata__"][META_KEY])
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    except (SafetensorError, ValueError, KeyError, TypeError) as exc:
        raise IoError(f"corrupt model file {path}: {exc}") from exc
    off = tensors["offsets"]
    trees = [
        Tree(*(tensors[k][off[i]:off[i + 1]] for k in ("feature", "threshold", "left", "right", "value")))
        for i in range(len(off) - 1)
    ]
    return ForestModel(
        trees,
        ForestParams(**meta["params"]),
        tuple(meta["feature_names"]),
        meta["seed"],
        tensors.get("oob_prediction"),
        meta["oob_r2"],
        meta.get("extra", {}),
    )


@dataclass(frozen=True)
class OSReport:
    accuracy: float
    mse: float
    medianse: float
    stdse: float
    spearmanr: float | None
    n_cases: int
    mode: str = "resubstitution"

    def to_dict(self) -> dict:
        return asdict(self)


def spearman_r(a, b) -> float | None:
    """Rank correlation with average ranks for ties; ``None`` when either side is constant."""
    ra, rb = rankdata(a), rankdata(b)
    if ra.std() == 0 or rb.std() == 0:
        return None
    return float(np.clip(np.corrcoef(ra, rb)[0, 1], -1.0, 1.0))


def evaluate_os(pred_days, true_days, thresholds=DEFAULT_THRESHOLDS, mode: str = "resubstitution") -> OSReport:
    pred = np.asarray(pred_days, dtype=np.float64)
    true = np.asarray(true_days, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {true.shape}")
    if len(pred) < 2:
        raise InvalidInput("need at least 2 cases to evaluate survival prediction")
    hits = [classify(p, thresholds) == classify(t, thresholds) for p, t in zip(pred, true)]
    se = (pred - true) ** 2
    return OSReport(
        accuracy=float(np.mean(hits)),
        mse=float(se.mean()),
        medianse=float(np.median(se)),
        stdse=float(se.std()),
        spearmanr=spearman_r(pred, true),
        n_cases=len(pred),
        mode=mode,
    )
