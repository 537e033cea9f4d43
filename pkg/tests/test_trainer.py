import numpy as np
import pytest

from gliomapipe.errors import ConfigError, IncompatibleWeights
from gliomapipe.network import NetworkSpec, build_network, get_weights, load_weights
from gliomapipe.preprocess import normalize_scan, split_dataset
from gliomapipe.trainer import (
    CascadeConfig,
    StageData,
    labels_from_probabilities,
    merge_subregion_masks,
    run_cascade,
    segment_volume,
    spec_from_weights,
    train_stage,
)

SMALL = NetworkSpec((32, 32, 4), (8, 16, 24), (16, 8), dense_block_depth=2)


@pytest.fixture(scope="module")
def cases(small_cohort):
    return [(normalize_scan(s), lab) for s, lab in small_cohort]


def test_wt_must_come_first():
    with pytest.raises(ConfigError):
        CascadeConfig(regions=("NCR", "WT"))
    with pytest.raises(ConfigError):
        CascadeConfig(loss="mse")


def test_stage_data_split(cases):
    train, val = split_dataset([s.case_id for s, _ in cases], 0.75, 0)
    data = StageData.from_cases(cases, train, val, "WT")
    assert data.train_images.shape == (3 * 6, 32, 32, 4)
    assert data.val_targets.shape == (6, 32, 32)


def test_train_stage_reports_and_keeps_best(cases):
    train, val = split_dataset([s.case_id for s, _ in cases], 0.75, 0)
    data = StageData.from_cases(cases, train, val, "WT")
    cfg = CascadeConfig(epochs=3, learning_rate=1e-3, seed=1)
    w, rep = train_stage("WT", data, None, cfg, SMALL)
    assert len(rep.train_loss) == len(rep.val_loss) == 3
    assert rep.steps == 3 * 3
    best = min([rep.initial_val_loss] + rep.val_loss)
    assert best == (rep.initial_val_loss if rep.best_epoch == 0 else rep.val_loss[rep.best_epoch - 1])
    assert rep.weights_checksum == w.checksum()
    assert "wall_clock" not in rep.to_dict(with_timing=False)


def test_train_stage_deterministic(cases):
    train, val = split_dataset([s.case_id for s, _ in cases], 0.75, 0)
    data = StageData.from_cases(cases, train, val, "ED")
    cfg = CascadeConfig(epochs=2, learning_rate=1e-3, seed=4)
    a, _ = train_stage("ED", data, None, cfg, SMALL)
    b, _ = train_stage("ED", data, None, cfg, SMALL)
    assert a.equals(b)


def test_max_steps_and_early_stop(cases):
    train, val = split_dataset([s.case_id for s, _ in cases], 0.75, 0)
    data = StageData.from_cases(cases, train, val, "WT")
    _, rep = train_stage("WT", data, None, CascadeConfig(epochs=10, max_steps=4), SMALL)
    assert rep.steps == 4
    _, rep = train_stage("WT", data, None, CascadeConfig(epochs=10), SMALL, on_epoch=lambda e, n, r: e == 2)
    assert len(rep.val_loss) == 2


def test_zero_epochs_returns_init(cases):
    train, val = split_dataset([s.case_id for s, _ in cases], 0.75, 0)
    data = StageData.from_cases(cases, train, val, "ET")
    init = get_weights(build_network(SMALL, seed=9))
    w, rep = train_stage("ET", data, init, CascadeConfig(epochs=0), SMALL)
    assert w.equals(init)
    assert rep.init_checksum == init.checksum()


def test_cascade_writes_and_chains(cases, tmp_path):
    cfg = CascadeConfig(epochs=1, learning_rate=1e-3, seed=2)
    res = run_cascade(cfg, cases, SMALL, out_dir=tmp_path, normalized=True)
    assert sorted(res.paths) == ["ED", "ET", "NCR", "WT"]
    wt = load_weights(tmp_path / "WT.safetensors")
    import hashlib

    digest = hashlib.sha256((tmp_path / "WT.safetensors").read_bytes()).hexdigest()
    for region in ("NCR", "ED", "ET"):
        sub = load_weights(tmp_path / f"{region}.safetensors")
        assert sub.metadata["parent"] == digest
        assert res.reports[region].init_checksum == res.weights["WT"].checksum()
    assert wt.metadata["parent"] is None
    assert spec_from_weights(wt, 32, 32).fingerprint() == SMALL.fingerprint()
    label = segment_volume(res.weights, cases[0][0])
    assert label.shape == cases[0][0].shape
    assert set(np.unique(label.grid)) <= {0, 1, 2, 4}
    assert not label.grid[:, :, -10:].any()


def test_spec_from_weights_requires_metadata():
    with pytest.raises(IncompatibleWeights):
        spec_from_weights(get_weights(build_network(SMALL)), 32, 32)


def test_merge_priority():
    def vol(values, dtype=bool):
        return np.array(values, dtype).reshape(1, 1, -1)

    ncr, ed, et = vol([1, 1, 0, 0, 1]), vol([1, 0, 1, 0, 1]), vol([0, 0, 0, 0, 1])
    assert merge_subregion_masks(ncr, ed, et).grid.ravel().tolist() == [1, 1, 2, 0, 4]
    maps = {"NCR": vol([0.6, 0.4], float), "ED": vol([0.7, 0.5], float), "ET": vol([0.2, 0.1], float)}
    assert labels_from_probabilities(maps).grid.ravel().tolist() == [1, 2]


@pytest.mark.slow
def test_single_phantom_overfit():
    from gliomapipe.phantoms import make_phantom_case

    scan, labels = make_phantom_case("solo", (64, 64, 32), seed=1)
    case = [(normalize_scan(scan), labels)]
    data = StageData.from_cases(case, ["solo"], ["solo"], "WT")
    spec = NetworkSpec((64, 64, 4), (16, 32, 64), (32, 16))
    cfg = CascadeConfig(loss="dice", epochs=10_000, max_steps=200, learning_rate=3e-4, seed=0)
    _, rep = train_stage("WT", data, None, cfg, spec)
    assert rep.steps == 200
    assert rep.train_loss[-1] < 0.05
