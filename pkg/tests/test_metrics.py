"""Dice, transfer metrics, score tensors, report aggregation."""

import numpy as np
import pytest

from odex.baselines import SingleModelPipeline
from odex.learner import LearnerConfig, init_learner
from odex.metrics import (ScoreTensor, build_score_tensor, bwt_per_task,
                          compute_bwt, compute_fwt, dice, format_table,
                          make_report, report_csv_line)
from odex.stream import build_shifting_source_stream


def test_dice_basic_cases():
    a = np.zeros((4, 4), bool)
    a[1:3, 1:3] = True
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[0, 0] = True
    assert dice(a, b) == 0.0
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0  # both empty
    g = np.zeros((4, 4)); g[0, :2] = 1
    assert dice(np.zeros((4, 4)), g) == 0.0  # empty prediction


def test_dice_hand_example():
    p = np.zeros((4, 4)); p[0] = 1            # |P| = 4
    g = np.zeros((4, 4)); g[:, 0] = 1         # |G| = 4, overlap 1... adjust
    p[:] = 0; p[0, :4] = 1
    g[:] = 0; g[0, :2] = 1; g[1, :2] = 1      # overlap 2, |P|=|G|=4
    assert dice(p, g) == 0.5


def test_dice_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(0, 1, (5, 5)) > 0.6
        b = rng.uniform(0, 1, (5, 5)) > 0.6
        assert dice(a, b) == dice(b, a)
        perm = rng.permutation(25)
        assert dice(a.ravel()[perm], b.ravel()[perm]) == dice(a, b)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


def tensor_from(rows):
    """rows[stage][task] as plain floats, one sample per task."""
    return ScoreTensor([[np.array([v], float) for v in row] for row in rows])


def test_bwt_hand_example():
    # task rows over stages: t1 (0.9, 0.8, 0.7), t2 (-, 0.9, 0.9), t3 (-, -, 0.9)
    scores = tensor_from([
        [0.0, 0.0, 0.0],   # untrained row (unused by BWT)
        [0.9, 0.1, 0.1],
        [0.8, 0.9, 0.2],
        [0.7, 0.9, 0.9],
    ])
    per_task = bwt_per_task(scores)
    assert abs(per_task[0] - (-0.15)) < 1e-12
    assert abs(per_task[1] - 0.0) < 1e-12
    assert abs(compute_bwt(scores) - (-0.075)) < 1e-12


def test_fwt_hand_example():
    # 2 tasks; task-2 Dice under (F0, F1, F2) = (0.0, 0.4, 0.8)
    scores = tensor_from([
        [0.5, 0.0],
        [0.6, 0.4],
        [0.6, 0.8],
    ])
    assert abs(compute_fwt(scores) - 0.4) < 1e-12


def test_fwt_inner_sum_telescopes():
    rng = np.random.default_rng(1)
    vals = rng.uniform(0, 1, (4, 3, 5))
    scores = ScoreTensor([[vals[i, j] for j in range(3)] for i in range(4)])
    # per task i: mean_j<=i of per-sample mean differences telescopes to
    # (mean Dice under F_i - mean Dice under F_0) / i
    for i in (2, 3):
        expected = (vals[i, i - 1].mean() - vals[0, i - 1].mean()) / i
        got = np.mean([np.mean(vals[j, i - 1] - vals[j - 1, i - 1])
                       for j in range(1, i + 1)])
        assert abs(got - expected) < 1e-12


def test_constant_tensor_gives_exact_zero():
    scores = ScoreTensor([[np.full(4, 0.6) for _ in range(3)] for _ in range(4)])
    assert compute_bwt(scores) == 0.0
    assert compute_fwt(scores) == 0.0


def test_single_final_model_has_zero_bwt():
    # joint evaluated as every snapshot: all rows identical
    rng = np.random.default_rng(2)
    row = [rng.uniform(0, 1, 6) for _ in range(4)]
    scores = ScoreTensor([row, row, row, row, row])
    assert compute_bwt(scores) == 0.0


def test_transfer_metrics_bounded():
    rng = np.random.default_rng(3)
    for _ in range(10):
        vals = rng.uniform(0, 1, (5, 4, 3))
        scores = ScoreTensor([[vals[i, j] for j in range(4)] for i in range(5)])
        assert -1.0 <= compute_bwt(scores) <= 1.0
        assert -1.0 <= compute_fwt(scores) <= 1.0


def test_transfer_metrics_need_two_stages():
    scores = tensor_from([[0.5], [0.5]])
    with pytest.raises(ValueError):
        compute_bwt(scores)
    with pytest.raises(ValueError):
        compute_fwt(scores)


def test_build_score_tensor_shapes_and_untrained_row():
    stages = build_shifting_source_stream(2, n_train=4, n_test=3, seed=9)
    cfg = LearnerConfig(seed=9)
    f0 = SingleModelPipeline(init_learner(cfg))
    snaps = [f0, f0, f0]
    scores = build_score_tensor(snaps, [s.test for s in stages])
    assert scores.n_stages == 2 and scores.n_tasks == 2
    assert all(arr.shape == (3,) for row in scores.values for arr in row)
    # zero head -> probabilities 0.5 -> empty masks -> Dice 0 vs blobs
    assert all(np.all(arr == 0.0) for arr in scores.values[0])
    assert compute_bwt(scores) == 0.0
    assert compute_fwt(scores) == 0.0


def test_report_and_csv():
    scores = tensor_from([
        [0.0, 0.0],
        [0.9, 0.5],
        [0.8, 0.9],
    ])
    rep = make_report("odex", "shifting_source", 7, scores, pool_size=2,
                      wall_seconds=1.5)
    assert rep.mean_dice == pytest.approx((0.8 + 0.9) / 2)
    assert rep.std_dice == pytest.approx(0.05)
    assert rep.bwt == pytest.approx(-0.1)
    assert rep.bwt_std == 0.0  # single defined task
    assert rep.bwt_alt_norm == pytest.approx(rep.bwt / 2)
    line = report_csv_line(rep)
    assert line.startswith("odex,shifting_source,7,")
    assert line.split(",")[9] == "2"
    table = format_table([rep])
    assert "odex" in table and len(table.splitlines()) == 3


def test_report_single_sample_zero_std():
    scores = tensor_from([[0.0], [0.5], [0.5]])
    # 1 task is not enough for transfer metrics; use 2 stages, 1 sample
    scores = tensor_from([[0.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    rep = make_report("seq", "s", 1, scores, None, 0.0)
    assert rep.std_dice == 0.0
    assert report_csv_line(rep).split(",")[9] == ""
