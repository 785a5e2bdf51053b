import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from evsev import metrics as mt
from evsev import model as M
from evsev.metrics import EvalRecord

SMALL = M.ModelConfig(conv_channels=(8, 16), fc_widths=(16,), cbam_reduction=4, input_size=16)


def rec(true, pred, conf=0.9, vac=0.1, dis=0.1):
    return EvalRecord(true, pred, conf, vac, dis)


def records_from(truth, pred, vac=None, conf=None):
    n = len(truth)
    vac = vac if vac is not None else [0.1] * n
    conf = conf if conf is not None else [0.9] * n
    return [EvalRecord(int(t), int(p), float(c), float(v), 0.1) for t, p, v, c in zip(truth, pred, vac, conf)]


# ------------------------------------------------------------ classification

def test_all_correct():
    rs = records_from([0, 1, 2, 2, 1], [0, 1, 2, 2, 1])
    out = mt.confusion_and_per_class(rs)
    assert out["confusion"] == [[1, 0, 0], [0, 2, 0], [0, 0, 2]]
    assert out["accuracy"] == out["weighted_accuracy"] == 1.0
    for pc in out["per_class"]:
        assert pc["precision"] == pc["recall"] == pc["f1"] == 1.0


def test_two_class_hand_matrix():
    rs = records_from([0, 0, 1, 1], [0, 0, 0, 0])
    out = mt.confusion_and_per_class(rs, num_classes=2)
    assert out["confusion"] == [[2, 0], [2, 0]]
    assert [pc["recall"] for pc in out["per_class"]] == [1.0, 0.0]
    assert out["per_class"][0]["precision"] == 0.5
    assert out["per_class"][1]["precision"] == 0.0
    assert out["accuracy"] == 0.5


def test_weighted_equals_unweighted_when_balanced():
    rng = np.random.default_rng(0)
    truth = np.repeat([0, 1, 2], 20)
    pred = rng.integers(0, 3, 60)
    out = mt.confusion_and_per_class(records_from(truth, pred))
    assert out["weighted_accuracy"] == pytest.approx(out["accuracy"], abs=1e-12)


def test_weighted_accuracy_is_mean_recall():
    truth = [0] * 8 + [1] * 2
    pred = [0] * 8 + [0, 1]
    out = mt.confusion_and_per_class(records_from(truth, pred), num_classes=2)
    assert out["accuracy"] == 0.9
    assert out["weighted_accuracy"] == pytest.approx(0.75)


def test_empty_records_rejected():
    with pytest.raises(ValueError):
        mt.confusion_and_per_class([])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=80))
def test_confusion_totals(pairs):
    rs = [rec(t, p) for t, p in pairs]
    out = mt.confusion_and_per_class(rs)
    cm = np.array(out["confusion"])
    assert cm.sum() == len(rs)
    sup = [pc["support"] for pc in out["per_class"]]
    assert list(cm.sum(axis=1)) == sup == [sum(t == k for t, _ in pairs) for k in range(3)]
    assert all(r.correct == (r.true == r.pred) for r in rs)


# --------------------------------------------------------------- calibration

def test_ece_examples():
    assert mt.expected_calibration_error([rec(1, 1, 1.0)] * 5)[0] == 0.0
    ece, table = mt.expected_calibration_error([rec(0, 0, 0.9), rec(0, 1, 0.9)])
    assert ece == pytest.approx(0.4, abs=1e-12)
    assert sum(b["count"] for b in table) == 2
    rs = [rec(0, 0, 0.75)] * 3 + [rec(0, 1, 0.75)]
    assert mt.expected_calibration_error(rs)[0] == pytest.approx(0.0, abs=1e-12)


def test_ece_right_inclusive_bins():
    _, table = mt.expected_calibration_error([rec(0, 0, 0.2), rec(0, 0, 1.0)], n_bins=5)
    counts = [b["count"] for b in table]
    assert counts == [1, 0, 0, 0, 1]   # 0.2 closes the first bin, 1.0 the last


def test_ece_perfectly_calibrated_construction():
    rng = np.random.default_rng(0)
    n_bins = 15
    rs = []
    for b in range(5, n_bins):   # confidences from 1/3 upward
        conf = rng.uniform(b / n_bins + 1e-6, (b + 1) / n_bins, 400)
        n_correct = int(round(conf.mean() * 400))
        correct = np.zeros(400, bool)
        correct[:n_correct] = True
        rs += [rec(0, 0 if c else 1, float(x)) for x, c in zip(conf, correct)]
    ece, _ = mt.expected_calibration_error(rs, n_bins)
    assert 0 <= ece < 1 / (2 * n_bins)


@given(st.lists(st.tuples(st.floats(1 / 3, 1), st.booleans()), min_size=1, max_size=60), st.integers(1, 30))
def test_ece_in_unit_interval(items, n_bins):
    ece, table = mt.expected_calibration_error([rec(0, 0 if ok else 1, c) for c, ok in items], n_bins)
    assert 0 <= ece <= 1
    assert len(table) == n_bins and sum(b["count"] for b in table) == len(items)


def test_vacuity_binned_accuracy():
    rs = [rec(0, 0, vac=0.05)] * 4 + [rec(0, 1, vac=0.95)] * 2
    _, table = mt.expected_calibration_error(rs, 10, score="vacuity")
    assert table[0]["count"] == 4 and table[0]["acc"] == 1.0
    assert table[9]["count"] == 2 and table[9]["acc"] == 0.0


# ----------------------------------------------------------------- spearman

def brute_rho(x, y):
    def ranks(v):
        return np.array([np.mean([j + 1 for j, s in enumerate(sorted(v)) if s == e]) for e in v])
    rx, ry = ranks(list(x)), ranks(list(y))
    return float(np.corrcoef(rx, ry)[0, 1])


def test_spearman_examples():
    x = [1.0, 2.0, 5.0, 9.0]
    assert mt.spearman_rho(x, x).rho == pytest.approx(1.0)
    assert mt.spearman_rho(x, x[::-1]).rho == pytest.approx(-1.0)
    r = mt.spearman_rho([1, 2, 2, 4], [1, 3, 2, 4])
    assert r.rho == pytest.approx(brute_rho([1, 2, 2, 4], [1, 3, 2, 4]), abs=1e-12)


def test_spearman_p_value_normal_approximation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=200)
    y = x + rng.normal(size=200)
    r = mt.spearman_rho(x, y)
    z = r.rho * math.sqrt(199)
    assert r.p_value == pytest.approx(2 * stats.norm.sf(abs(z)), rel=1e-9)
    assert r.rho == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


def test_spearman_degenerate_and_errors():
    r = mt.spearman_rho([1, 1, 1, 1], [1, 2, 3, 4])
    assert r.degenerate and math.isnan(r.rho)
    with pytest.raises(ValueError):
        mt.spearman_rho([1, 2], [1, 2])
    with pytest.raises(ValueError):
        mt.spearman_rho([1, 2, 3], [1, 2])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=3, max_size=40))
def test_spearman_matches_scipy_with_ties(pairs):
    x, y = np.array(pairs, dtype=float).T
    r = mt.spearman_rho(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        assert r.degenerate
    else:
        assert r.rho == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(-300, 300), st.integers(-300, 300)), min_size=3, max_size=30))
def test_spearman_monotone_invariance(pairs):
    x, y = np.array(pairs, dtype=float).T / 100
    base = mt.spearman_rho(x, y)
    if base.degenerate:
        return
    assert mt.spearman_rho(np.exp(x), y).rho == pytest.approx(base.rho, abs=1e-12)
    assert mt.spearman_rho(x, y ** 3).rho == pytest.approx(base.rho, abs=1e-12)


def test_average_ranks():
    np.testing.assert_array_equal(mt.average_ranks([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


# -------------------------------------------------------------- selective

def brute_selective(rs, f):
    order = sorted(range(len(rs)), key=lambda i: (rs[i].vacuity, i))
    k = math.ceil(Fraction(str(f)) * len(rs))   # exact decimal arithmetic: 0.3 * 10 keeps 3
    kept = [rs[i] for i in order[:k]]
    return np.mean([r.correct for r in kept]), np.mean([r.vacuity for r in kept])


def test_selective_matches_brute_force():
    rng = np.random.default_rng(2)
    vac = rng.choice([0.1, 0.2, 0.3, 0.5], 10)   # ties exercise stable ordering
    rs = records_from(rng.integers(0, 3, 10), rng.integers(0, 3, 10), vac)
    fracs = [i / 10 for i in range(1, 11)] + [0.25, 0.55]
    for f, acc, mv in mt.selective_prediction_curve(rs, fracs):
        bacc, bmv = brute_selective(rs, f)
        assert acc == pytest.approx(bacc, abs=1e-15) and mv == pytest.approx(bmv, abs=1e-15)


def test_selective_full_and_perfect_ordering():
    truth = [0] * 10
    pred = [0] * 7 + [1] * 3
    vac = [0.1] * 7 + [0.5, 0.6, 0.7]
    rs = records_from(truth, pred, vac)
    curve = dict((f, a) for f, a, _ in mt.selective_prediction_curve(rs, [1.0, 0.7, 0.5]))
    assert curve[1.0] == mt.confusion_and_per_class(rs)["accuracy"] == 0.7
    assert curve[0.7] == curve[0.5] == 1.0
    with pytest.raises(ValueError):
        mt.selective_prediction_curve(rs, [0.0])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.floats(0.01, 1)), min_size=1, max_size=50))
def test_selective_properties(items):
    rs = [rec(t, p, vac=v) for t, p, v in items]
    fr = [1.0, 0.8, 0.6, 0.5, 0.3, 0.2]
    curve = mt.selective_prediction_curve(rs, fr)
    assert curve[0][1] == np.mean([r.correct for r in rs])
    mv = [c[2] for c in curve]
    assert all(a >= b - 1e-15 for a, b in zip(mv, mv[1:]))


# --------------------------------------------------------------- bootstrap

def test_bootstrap_examples():
    rs = [rec(0, 0)] * 50
    assert mt.bootstrap_ci(rs, "accuracy", 200) == (1.0, 1.0)
    mixed = [rec(0, 0)] * 50 + [rec(0, 1)] * 50
    a = mt.bootstrap_ci(mixed, "accuracy", 10_000, 0.95, seed=7)
    assert a == mt.bootstrap_ci(mixed, "accuracy", 10_000, 0.95, seed=7)
    assert abs(a[0] - 0.402) <= 0.02 and abs(a[1] - 0.598) <= 0.02


def test_bootstrap_binomial_oracle():
    # exact percentiles of Binomial(100, 0.5) / 100
    lo, hi = stats.binom.ppf([0.025, 0.975], 100, 0.5) / 100
    mixed = [rec(0, 0)] * 50 + [rec(0, 1)] * 50
    a = mt.bootstrap_ci(mixed, "accuracy", 10_000, seed=0)
    assert abs(a[0] - lo) <= 0.02 and abs(a[1] - hi) <= 0.02


def test_bootstrap_named_metrics_and_skips():
    rng = np.random.default_rng(0)
    rs = records_from(rng.integers(0, 3, 60), rng.integers(0, 3, 60))
    for name in ("weighted_accuracy", "ece", "recall:1", "f1:2", "mean_vacuity"):
        lo, hi = mt.bootstrap_ci(rs, name, 100)
        assert lo <= hi
    # class 2 appears once in 60: recall:2 is undefined on ~37% of resamples, still allowed
    rare = records_from([0] * 59 + [2], [0] * 60)
    mt.bootstrap_ci(rare, "recall:2", 200)
    # absent class: every resample undefined
    with pytest.raises(mt.BootstrapError):
        mt.bootstrap_ci(records_from([0] * 20, [0] * 20), "recall:1", 100)
    with pytest.raises(ValueError):
        mt.bootstrap_ci(rs, "accuracy", 50)
    with pytest.raises(ValueError):
        mt.bootstrap_ci(rs, "kappa", 100)


# ------------------------------------------------------------------- maps

def test_offsets_examples():
    assert mt.window_offsets(224, 112, 32) == [0, 32, 64, 96, 112]
    assert mt.window_offsets(64, 32, 16) == [0, 16, 32]
    assert mt.window_offsets(64, 64, 16) == [0]
    with pytest.raises(ValueError):
        mt.window_offsets(32, 64, 8)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 100))
def test_offset_arithmetic(side, window, stride):
    if window > side:
        with pytest.raises(ValueError):
            mt.window_offsets(side, window, stride)
        return
    offs = mt.window_offsets(side, window, stride)
    base = (side - window) // stride + 1
    expect = base + (0 if (side - window) % stride == 0 else 1)
    assert len(offs) == expect
    assert offs[0] == 0 and offs[-1] == side - window
    assert offs == sorted(set(offs))


def test_map_single_window_equals_forward():
    params = M.init_params(SMALL)
    img = np.random.default_rng(0).random((4, 16, 16))
    umap = mt.uncertainty_map(img, params, SMALL, window=16, stride=4)
    assert umap.vacuity.shape == (1, 1)
    ref = M.forward(img, params, SMALL)
    assert umap.vacuity[0, 0] == pytest.approx(ref.vacuity, rel=1e-12)
    assert umap.dissonance[0, 0] == pytest.approx(ref.dissonance, rel=1e-12)


def test_map_grid_and_constant_image(tmp_path):
    params = M.init_params(SMALL)
    img = np.full((4, 224, 224), 0.4)
    umap = mt.uncertainty_map(img, params, SMALL, window=112, stride=32)
    assert umap.row_offsets == umap.col_offsets == [0, 32, 64, 96, 112]
    assert umap.vacuity.shape == (5, 5)
    assert np.ptp(umap.vacuity) <= 1e-12 and np.ptp(umap.dissonance) <= 1e-12
    mt.write_uncertainty_map(tmp_path / "m", umap)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "row,col,vacuity,dissonance" and len(lines) == 26
    from evsev.netpbm import read_pgm
    assert read_pgm(tmp_path / "m_vacuity.pgm").shape == (40, 40)


def test_map_window_too_large():
    with pytest.raises(ValueError):
        mt.uncertainty_map(np.zeros((4, 16, 16)), M.init_params(SMALL), SMALL, 32, 8)


# ------------------------------------------------------------ degradation

def test_degradation_report_rows():
    params = M.init_params(SMALL)
    rng = np.random.default_rng(0)
    patches = list(rng.random((6, 4, 16, 16)))
    labels = [0, 1, 2, 0, 1, 2]
    rows = mt.degradation_report(patches, labels, params, SMALL)
    assert [r["condition"] for r in rows][0] == "clean" and len(rows) == 7
    outs = M.predict_batch(patches, params, SMALL)
    plain = mt.confusion_and_per_class(mt.make_records(labels, outs))["accuracy"]
    assert rows[0]["accuracy"] == plain
    assert rows[0]["mean_vacuity"] == pytest.approx(np.mean([o.vacuity for o in outs]))
    for r in rows:
        assert 0 <= r["accuracy"] <= 1 and 0 < r["mean_vacuity"] <= 1
    with pytest.raises(ValueError):
        mt.degradation_report([], [], params, SMALL)


# ----------------------------------------------------------------- report

def test_report_files(tmp_path):
    rng = np.random.default_rng(0)
    rs = [EvalRecord(int(t), int(p), float(c), float(v), 0.2, 0.5)
          for t, p, c, v in zip(rng.integers(0, 3, 30), rng.integers(0, 3, 30),
                                rng.uniform(0.34, 1, 30), rng.uniform(0.01, 0.3, 30))]
    report = mt.evaluate(rs, retain_fractions=[1.0, 0.5])
    report.config = {"seed": 3}
    report.write(tmp_path, rs)
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["config"] == {"seed": 3}
    assert set(d["spearman"]) == {"vacuity", "dissonance"}
    assert (tmp_path / "selective.csv").read_text().splitlines()[0] == "fraction,accuracy,mean_vacuity"
    assert (tmp_path / "calibration_bins.csv").read_text().splitlines()[0] == "bin_lo,bin_hi,count,acc,conf"
    pred = (tmp_path / "predictions.csv").read_text().splitlines()
    assert pred[0].endswith(",tier") and len(pred) == 31


def test_tiers():
    assert mt.tier(0.02) == "automatic"
    assert mt.tier(0.05) == "review"
    assert mt.tier(0.5) == "expert"
