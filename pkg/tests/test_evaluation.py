import math
import warnings

import numpy as np
import pytest
import sklearn.metrics as skm
from hypothesis import given, settings, strategies as st

from threatformer_ids import evaluation as ev
from threatformer_ids.errors import DataError
from threatformer_ids.model import ModelConfig, ThreatFormer

import oracles
from toydata import separable_sequences


def instance(g, n=None):
    n = int(g.integers(2, 13)) if n is None else n
    y = g.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    g.shuffle(y)
    scores = g.integers(0, 5, size=n) / 4 if g.random() < 0.5 else g.random(n)
    return scores.astype(float), y


def test_roc_examples():
    assert ev.roc_auc([0.9, 0.8, 0.4, 0.2], [1, 0, 1, 0]) == 0.75
    assert ev.roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert ev.roc_auc([0.3] * 4, [1, 0, 1, 0]) == 0.5


def test_pr_examples():
    assert ev.pr_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert ev.pr_auc([0.9, 0.5, 0.1], [0, 1, 0]) == 0.5


def test_pr_of_random_scores_near_prevalence():
    g = np.random.default_rng(7)
    y = g.integers(0, 2, size=2000)
    assert abs(ev.pr_auc(g.random(2000), y) - y.mean()) < 0.05


def test_single_class_errors():
    with pytest.raises(DataError):
        ev.roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        ev.pr_auc([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        ev.recall_at_fpr([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        ev.fpr_at_tpr([0.1, 0.2], [0, 0])


def test_recall_at_fpr_admits_one_false_positive_per_hundred():
    g = np.random.default_rng(3)
    s = np.r_[g.random(100), g.random(20) + 0.5]
    y = np.r_[np.zeros(100, int), np.ones(20, int)]
    _, thr = ev.recall_at_fpr(s, y, 0.01, return_threshold=True)
    assert ((s >= thr) & (y == 0)).sum() <= 1


def test_recall_at_fpr_warns_on_few_negatives():
    with pytest.warns(UserWarning, match="negatives"):
        ev.recall_at_fpr([0.9, 0.1, 0.2], [1, 0, 0], 0.01)


def test_recall_at_fpr_constructed_ranking():
    g = np.random.default_rng(11)
    s = g.random(210)
    y = np.r_[np.ones(10, int), np.zeros(200, int)]
    s[:10] += 0.3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        got = ev.recall_at_fpr(s, y, 0.01)
    assert got == float(oracles.recall_at_fpr(list(s), list(y), 0.01))


def test_fpr_at_tpr_extremes():
    assert ev.fpr_at_tpr([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 0.0
    assert ev.fpr_at_tpr([0.1, 0.0, 0.9, 0.8], [1, 1, 0, 0]) == 1.0


def test_f1_examples():
    assert ev.f1_at([0.9, 0.8, 0.1], [1, 1, 0], 0.5) == 1.0
    assert ev.f1_at([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0], 0.0) == pytest.approx(2 / 3)


def test_f1_threshold_comes_from_validation():
    val_s, val_y = [0.9, 0.6, 0.3, 0.1], [1, 1, 0, 0]
    f1, thr = ev.f1_at_threshold([0.55, 0.5, 0.2], [1, 0, 0], "val_best", val_s, val_y)
    assert thr == 0.6 and f1 == 0.0
    f1, thr = ev.f1_at_threshold([0.55, 0.5, 0.2], [1, 0, 0], 0.52)
    assert (f1, thr) == (1.0, 0.52)


def test_metrics_match_brute_force_oracles():
    g = np.random.default_rng(2024)
    for _ in range(1000):
        s, y = instance(g)
        sl, yl = list(s), [int(v) for v in y]
        assert ev.roc_auc(s, y) == float(oracles.roc_auc(sl, yl))
        assert math.isclose(ev.pr_auc(s, y), float(oracles.average_precision(sl, yl)), rel_tol=1e-12)
        cap, floor = float(g.choice([0.01, 0.2, 0.5])), float(g.choice([0.5, 0.95, 1.0]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert ev.recall_at_fpr(s, y, cap) == float(oracles.recall_at_fpr(sl, yl, cap))
        assert ev.fpr_at_tpr(s, y, floor) == float(oracles.fpr_at_tpr(sl, yl, floor))
        t = float(g.choice(s))
        assert ev.f1_at(s, y, t) == float(oracles.f1(sl, yl, t))
        assert ev.best_f1_threshold(s, y)[1] == float(oracles.best_f1(sl, yl))


def test_agrees_with_sklearn():
    g = np.random.default_rng(5)
    for _ in range(50):
        s, y = instance(g, n=int(g.integers(10, 200)))
        assert ev.roc_auc(s, y) == pytest.approx(skm.roc_auc_score(y, s), abs=1e-12)
        assert ev.pr_auc(s, y) == pytest.approx(skm.average_precision_score(y, s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["exp", "cube", "affine"]))
def test_invariant_under_monotone_transforms(seed, kind):
    s, y = instance(np.random.default_rng(seed))
    f = {"exp": np.exp, "cube": lambda v: v ** 3 + v, "affine": lambda v: 3 * v - 7}[kind]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for metric in (ev.roc_auc, ev.pr_auc, ev.recall_at_fpr, ev.fpr_at_tpr):
            assert metric(s, y) == metric(f(s), y)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_operating_metrics_monotone_in_cap_and_floor(seed):
    s, y = instance(np.random.default_rng(seed))
    caps = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rec = [ev.recall_at_fpr(s, y, c) for c in caps[1:-1]]
    fpr = [ev.fpr_at_tpr(s, y, f) for f in caps[1:]]
    assert rec == sorted(rec) and fpr == sorted(fpr)


def test_metric_suite_report():
    r = ev.metric_suite([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0], "chrono", [0.9, 0.2], [1, 0], seed=3)
    d = r.to_dict()
    assert d["format_version"] == 1 and d["n_pos"] + d["n_neg"] == 4
    assert all(0 <= d[k] <= 1 for k in ("auc_roc", "auc_pr", "recall_at_fpr", "fpr_at_tpr", "f1"))
    assert d["threshold_policy"] == "val_best"


def test_metric_suite_single_class_is_undefined_not_dropped():
    r = ev.metric_suite([0.1, 0.2], [0, 0], "drift")
    assert r.auc_roc is None and r.auc_pr is None and r.warnings


def test_curve_points():
    fpr, tpr = ev.roc_points([0.9, 0.8, 0.4, 0.2], [1, 0, 1, 0])
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1
    rec, prec = ev.pr_points([0.9, 0.8, 0.4, 0.2], [1, 0, 1, 0])
    np.testing.assert_allclose(rec, [0.5, 0.5, 1, 1])
    np.testing.assert_allclose(prec, [1, 0.5, 2 / 3, 0.5])


@pytest.fixture(scope="module")
def model_and_seqs():
    seqs = separable_sequences(120, shift=1.0, seed=9)
    m = ThreatFormer(ModelConfig(d_in=4, n_continuous=2, d_model=16, n_heads=2, n_layers=1, d_ff=16, seed=4))
    return m, seqs


def test_robustness_zero_budget_is_clean_metric(model_and_seqs):
    m, seqs = model_and_seqs
    X, C, y = ev._tensors(seqs)
    curve = ev.robustness_eval(m, seqs, [0.0])
    assert curve.auc_pr == [ev.pr_auc(m.predict(X, C), y)]


def test_robustness_curve_shape(model_and_seqs):
    m, seqs = model_and_seqs
    curve = ev.robustness_eval(m, seqs, [0.0, 0.5, 1.0], steps=3)
    assert len(curve.auc_pr) == 3 and curve.auc_pr[2] <= curve.auc_pr[0]
    with pytest.raises(ValueError):
        ev.robustness_eval(m, seqs, [0.1, 0.5])


def test_drift_blocks(model_and_seqs):
    m, seqs = model_and_seqs
    X, C, y = ev._tensors(seqs)
    (single,) = ev.drift_blocks(m, seqs, 1)
    assert single.auc_pr == ev.pr_auc(m.predict(X, C), y) and single.n == len(seqs)
    blocks = ev.drift_blocks(m, seqs, 4)
    assert sum(b.n for b in blocks) == len(seqs)
    for a, b in zip(blocks, blocks[1:]):
        assert a.end_time <= b.end_time and a.start_time <= b.start_time


def test_drift_block_lacking_class_reported_as_none(model_and_seqs):
    m, seqs = model_and_seqs
    negatives = [s for s in seqs if s.y == 0]
    blocks = ev.drift_blocks(m, negatives, 2)
    assert len(blocks) == 2 and all(b.auc_pr is None for b in blocks)


def test_latency_sane(model_and_seqs):
    m, seqs = model_and_seqs
    mean1, std1 = ev.measure_latency(m, seqs, batch_size=32, n_batches=20)
    mean2, _ = ev.measure_latency(m, seqs, batch_size=32, n_batches=20)
    assert mean1 > 0 and std1 >= 0
    assert abs(mean1 - mean2) / max(mean1, mean2) < 0.5
