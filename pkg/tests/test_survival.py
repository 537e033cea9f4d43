import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sstats

from gliomapipe.data_model import ResectionStatus, SurvivalRecord
from gliomapipe.errors import FeatureSchemaMismatch, InvalidFeature, InvalidInput, IoError, TooFewSamples
from gliomapipe.survival import (
    ForestParams,
    SurvivalClass,
    classify,
    evaluate_os,
    filter_gtr,
    fit_rfr,
    load_model,
    predict_days,
    save_model,
    spearman_r,
)


def _data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, 4))
    y = 200 + 400 * X[:, 0] + 100 * (X[:, 1] > 0.5)
    return X, y


def test_classify_examples():
    assert classify(299) is SurvivalClass.short
    assert classify(300) is SurvivalClass.medium
    assert classify(450) is SurvivalClass.medium
    assert classify(451) is SurvivalClass.long
    with pytest.raises(InvalidInput):
        classify(-1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 5000), st.floats(0, 5000))
def test_classify_monotone(a, b):
    lo, hi = sorted((a, b))
    assert classify(lo) <= classify(hi)


def test_filter_gtr():
    recs = [
        SurvivalRecord("a", 50, 100, ResectionStatus.GTR),
        SurvivalRecord("b", 50, None, ResectionStatus.GTR),
        SurvivalRecord("c", 50, 100, ResectionStatus.STR),
        SurvivalRecord("d", 50, 100, ResectionStatus.NA),
    ]
    assert [r.case_id for r in filter_gtr(recs)] == ["a"]
    assert [r.case_id for r in filter_gtr(recs, require_days=False)] == ["a", "b"]


def test_forest_fits_and_is_deterministic():
    X, y = _data()
    a = fit_rfr(X, y, ForestParams(n_trees=30), seed=3)
    b = fit_rfr(X, y, ForestParams(n_trees=30), seed=3)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    assert a.oob_r2 > 0.9
    assert np.all(a.predict(X) >= 0)


def test_forest_constant_target_exact():
    X, _ = _data(20)
    model = fit_rfr(X, np.full(20, 321.0), ForestParams(n_trees=5))
    assert np.all(model.predict(X) == 321.0)


def test_forest_errors():
    X, y = _data(4)
    with pytest.raises(TooFewSamples):
        fit_rfr(X, y)
    X, y = _data(10)
    X[3, 2] = np.nan
    with pytest.raises(InvalidFeature) as info:
        fit_rfr(X, y)
    assert info.value.index == 2


def test_model_roundtrip(tmp_path):
    X, y = _data(50)
    model = fit_rfr(X, y, ForestParams(n_trees=10), seed=1, feature_names=("a", "b", "c", "d"))
    path = save_model(model, tmp_path / "m.safetensors")
    back = load_model(path)
    np.testing.assert_array_equal(back.predict(X), model.predict(X))
    assert back.feature_names == model.feature_names and back.oob_r2 == model.oob_r2
    assert predict_days(back, X[0], ("a", "b", "c", "d")) == pytest.approx(model.predict(X[:1])[0])
    with pytest.raises(FeatureSchemaMismatch):
        predict_days(back, X[0], ("a", "b", "c", "x"))
    with pytest.raises(FeatureSchemaMismatch):
        back.predict(X[:, :3])
    (tmp_path / "bad").write_bytes(b"junk")
    with pytest.raises(IoError):
        load_model(tmp_path / "bad")


def test_evaluate_os_identity():
    true = np.array([100, 250, 320, 400, 500, 900.0])
    rep = evaluate_os(true, true)
    assert (rep.accuracy, rep.mse, rep.medianse, rep.stdse, rep.spearmanr) == (1.0, 0.0, 0.0, 0.0, 1.0)


def test_evaluate_os_values():
    pred = np.array([100.0, 460.0, 500.0])
    true = np.array([200.0, 300.0, 800.0])
    rep = evaluate_os(pred, true)
    assert rep.accuracy == pytest.approx(2 / 3)
    se = np.array([1e4, 160.0**2, 9e4])
    assert rep.mse == pytest.approx(se.mean()) and rep.medianse == 160.0**2
    assert rep.stdse == pytest.approx(se.std())
    assert rep.spearmanr == pytest.approx(1.0)


@pytest.mark.filterwarnings("ignore::scipy.stats.ConstantInputWarning")
@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=3, max_size=30), st.integers(0, 2**31))
def test_spearman_matches_scipy(a, seed):
    b = np.random.default_rng(seed).permutation(a)
    ours = spearman_r(a, b)
    ref = sstats.spearmanr(a, b).statistic
    if ours is None:
        assert np.isnan(ref)
    else:
        assert ours == pytest.approx(ref, abs=1e-12)
