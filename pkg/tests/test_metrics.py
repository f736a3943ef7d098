import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compseg.errors import DataError, UndefinedMetricError
from compseg.metrics import (CorrectionCurve, accuracies, auc, class_iou, confusion, correction_curve, default_r_grid,
                             miou, oracle_curve, oracle_curve_analytic, summarize, write_matrix_csv)

from oracles import brute_force_metrics


def brute_correction(pred, gt, unc, r):
    """Replace the top floor(r*N) pixels by hand, ranking by (-u, raster index)."""
    pred, gt, unc = list(pred), list(gt), list(unc)
    order = sorted(range(len(pred)), key=lambda i: (-unc[i], i))
    m = int(np.floor(r * len(pred) + 1e-9))
    fixed = pred[:]
    for i in order[:m]:
        fixed[i] = gt[i]
    return sum(a == b for a, b in zip(fixed, gt)) / len(gt)


def test_confusion_examples():
    assert confusion([1, 1], [0, 1], 2).tolist() == [[0, 1], [0, 1]]
    c = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert np.array_equal(c, np.diag([1, 1, 2]))
    gt = np.array([0, 0, 1, 2, 2, 2])
    assert confusion(np.zeros(6, int), gt, 3).sum(axis=1).tolist() == [2, 1, 3]


def test_confusion_errors():
    with pytest.raises(DataError):
        confusion([0, 1], [0], 2)
    with pytest.raises(DataError):
        confusion([0, 3], [0, 1], 3)


def test_miou_and_accuracy_examples():
    conf = confusion([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert miou(conf) == pytest.approx(7 / 12)
    assert class_iou(conf).tolist() == pytest.approx([0.5, 2 / 3])
    acc_c, acc_a = accuracies(conf)
    assert acc_c.tolist() == [0.5, 1.0] and acc_a == 0.75
    assert miou(confusion([0, 1, 1], [0, 1, 1], 2)) == 1.0


def test_absent_class_excluded():
    conf = confusion([0, 1, 1], [0, 0, 1], 3)
    assert np.isnan(class_iou(conf)[2])
    assert miou(conf) == pytest.approx((0.5 + 0.5) / 2)
    acc_c, _ = accuracies(conf)
    assert np.isnan(acc_c[2])


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        miou(np.zeros((3, 3), dtype=int))
    with pytest.raises(UndefinedMetricError):
        accuracies(np.zeros((3, 3), dtype=int))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.integers(0, 2 ** 31))
def test_metrics_match_oracle(n, K, seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, K, n)
    pred = r.integers(0, K, n)
    conf_o, miou_o, acc_o, acc_a_o = brute_force_metrics(pred, gt, K)
    conf = confusion(pred, gt, K)
    assert conf.tolist() == conf_o
    assert miou(conf) == pytest.approx(miou_o, abs=1e-15)
    acc_c, acc_a = accuracies(conf)
    assert acc_a == pytest.approx(acc_a_o, abs=1e-15)
    for a, o in zip(acc_c, acc_o):
        assert np.isnan(a) if o is None else a == pytest.approx(o)


def test_correction_examples():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([1, 0, 0, 1])
    unc = np.array([0.9, 0.1, 0.8, 0.2])
    c = correction_curve(pred, gt, unc, [0.0, 0.25, 0.5])
    assert c.acc.tolist() == [0.5, 0.75, 1.0]
    perfect = correction_curve(gt, gt, np.zeros(4))
    assert np.all(perfect.acc == 1.0)


def test_correction_tie_break_is_raster_order():
    gt = np.array([0, 0, 0, 0])
    pred = np.array([0, 0, 1, 1])
    c = correction_curve(pred, gt, np.ones(4), [0.5, 0.75])
    # ties: pixels 0, 1 come first and are already right
    assert c.acc.tolist() == [0.5, 0.75]


def test_floor_guard():
    n = 100
    gt = np.zeros(n, int)
    pred = np.ones(n, int)
    c = correction_curve(pred, gt, np.arange(n)[::-1], [0.29])
    assert c.acc[0] == 0.29


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2 ** 31))
def test_correction_matches_oracle_and_is_monotone(n, seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, 3, n)
    pred = np.where(r.random(n) < 0.6, gt, r.integers(0, 3, n))
    unc = r.integers(0, 4, n).astype(float)   # plenty of ties
    grid = default_r_grid()
    c = correction_curve(pred, gt, unc, grid)
    assert c.acc.tolist() == pytest.approx([brute_correction(pred, gt, unc, x) for x in grid])
    assert np.all(np.diff(c.acc) >= 0)
    o = oracle_curve(pred, gt, grid)
    assert np.all(o.acc >= c.acc - 1e-15)
    assert auc(o) >= auc(c)
    # scaling the ranking monotonically leaves the curve unchanged
    assert np.array_equal(correction_curve(pred, gt, unc ** 2 + 1, grid).acc, c.acc)


def test_oracle_examples():
    o = oracle_curve_analytic(0.964, [0.0, 0.036, 0.2])
    assert o.acc.tolist() == pytest.approx([0.964, 1.0, 1.0])
    gt = np.zeros(1000, int)
    pred = gt.copy()
    pred[::25] = 1   # 40 errors, base 0.96
    grid = default_r_grid()
    assert np.array_equal(oracle_curve(pred, gt, grid).acc,
                          correction_curve(pred, gt, (pred != gt).astype(float), grid).acc)
    assert oracle_curve(pred, gt, grid).acc == pytest.approx(oracle_curve_analytic(0.96, grid).acc)


def test_auc_examples():
    grid = default_r_grid()
    assert auc(CorrectionCurve(grid, np.ones_like(grid))) == pytest.approx(1.0)
    assert auc(CorrectionCurve(grid, np.full_like(grid, 0.83))) == pytest.approx(0.83)
    v = auc(oracle_curve_analytic(0.964))
    ys = [min(1.0, 0.964 + r) for r in grid]
    trap = sum((grid[i + 1] - grid[i]) * (ys[i] + ys[i + 1]) / 2 for i in range(len(grid) - 1)) / 0.5
    assert v == pytest.approx(trap, abs=1e-12)
    # continuous closed form 1 - (1 - b)^2 / (2 * 0.5), up to grid discretization
    assert v == pytest.approx(1 - 0.036 ** 2 / 1.0, abs=1e-4)
    assert round(v, 3) == 0.999
    with pytest.raises(DataError):
        auc(CorrectionCurve(np.array([0.0, 0.3]), np.array([0.5, 0.6])))


def test_summary_and_csv(tmp_path):
    s = summarize([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert s["miou"] == pytest.approx(7 / 12) and s["acc_a"] == 0.75
    write_matrix_csv(tmp_path / "c.csv", s["confusion"], ["a", "b"])
    assert (tmp_path / "c.csv").read_text().splitlines() == [",a,b", "a,1,1", "b,0,2"]
    c = correction_curve([0, 1], [0, 0], [0.0, 1.0], [0.0, 0.5])
    c.write_csv(tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "r_area,acc_a"
