"""Pool controller: selection, expansion decisions, stage training,
routing, snapshots."""

import dataclasses

import numpy as np
import pytest

from odex.learner import LearnerConfig, PARAM_NAMES, init_learner
from odex.oodgate import (GaussianStats, ThresholdCalibration,
                          calibrate_threshold, fit_gaussian, mahalanobis,
                          normalize_distance)
from odex.pool import (EXPAND, REUSE, ExpansionDecision, ModelEntry, ModelPool,
                       Strategy, decide, get_entry, gram_distance_batch,
                       gram_fit, infer, infer_batch, new_pool, select_model,
                       snapshot_for_stage, train_on_stage, untrained_pool)
from odex.seeding import rng_for
from odex.stream import SOURCE_A, SOURCE_C, gen_source_sample

CFG = LearnerConfig(channels=4, image_size=16, epochs_per_stage=2,
                    batch_size=4, seed=5)


def make_samples(source, n, tag, size=16):
    small = dataclasses.replace(source, axis_range=(2.0, 4.0))
    return [gen_source_sample(small, rng_for(99, tag, i), size, sample_id=i)
            for i in range(n)]


def gaussian_at(center, scale=1.0):
    dim = len(center)
    sigma = scale * np.eye(dim)
    return GaussianStats(mu=np.asarray(center, float), sigma=sigma,
                         precision=np.eye(dim) / scale,
                         regularization_eps=0.0, n_samples=10)


def entry_with(model_id, history, cfg=CFG, calibration=None):
    return ModelEntry(model_id=model_id, learner=init_learner(cfg),
                      history=history, calibration=calibration)


def test_select_singleton_pool():
    pool = new_pool(CFG)
    pool.entries.append(entry_with(1, [gaussian_at([0.0, 0.0])]))
    feats = np.array([[5.0, 5.0]])
    model_id, raw = select_model(pool, feats)
    assert model_id == 1
    assert raw == pytest.approx(np.sqrt(50.0))


def test_select_prefers_centered_history():
    pool = new_pool(CFG)
    pool.entries.append(entry_with(1, [gaussian_at([30.0, 30.0])]))
    pool.entries.append(entry_with(2, [gaussian_at([1.0, 1.0])]))
    feats = np.tile([1.0, 1.0], (4, 1))
    model_id, raw = select_model(pool, feats)
    assert model_id == 2
    assert raw == pytest.approx(0.0)


def test_select_tie_breaks_to_lowest_id():
    pool = new_pool(CFG)
    hist = [gaussian_at([0.0, 0.0])]
    pool.entries.append(entry_with(1, list(hist)))
    pool.entries.append(entry_with(2, list(hist)))
    model_id, _ = select_model(pool, np.array([[2.0, 2.0]]))
    assert model_id == 1


def test_select_empty_pool_raises():
    with pytest.raises(ValueError):
        select_model(new_pool(CFG), np.zeros((1, 2)))


def test_select_uses_per_entry_feature_mapping():
    pool = new_pool(CFG)
    pool.entries.append(entry_with(1, [gaussian_at([0.0, 0.0])]))
    pool.entries.append(entry_with(2, [gaussian_at([0.0, 0.0])]))
    feats = {1: np.array([[9.0, 9.0]]), 2: np.array([[0.1, 0.0]])}
    model_id, _ = select_model(pool, feats)
    assert model_id == 2


def test_select_normalizes_across_calibration_scales():
    # entry 1 has raw distances ~100x entry 2's but a matching
    # calibration; normalized comparison must not punish the scale
    pool = new_pool(CFG)
    # raws: 100 for entry 1 (tight gaussian), 1 for entry 2; both map to
    # exactly 0.375 on their own calibrated scales -> tie -> lowest id
    pool.entries.append(entry_with(
        1, [gaussian_at([0.0, 0.0], scale=1e-4)],
        calibration=calibrate_threshold([64.0, 80.0])))
    pool.entries.append(entry_with(
        2, [gaussian_at([0.0, 0.0])],
        calibration=calibrate_threshold([0.25, 1.125])))
    feats = np.tile([1.0, 0.0], (3, 1))
    model_id, raw = select_model(pool, feats)
    assert model_id == 1
    assert raw == pytest.approx(100.0)
    pool.entries[0].calibration = calibrate_threshold([10.0, 20.0])
    model_id, raw = select_model(pool, feats)
    assert model_id == 2  # entry 1 now looks far on its own scale


def test_decide_empty_pool_forces_expand():
    d = decide(new_pool(CFG), np.zeros((1, 2)))
    assert d.kind == EXPAND
    assert d.selected_model == 0


def test_decide_reuse_at_center():
    pool = new_pool(CFG)
    pool.entries.append(entry_with(
        1, [gaussian_at([0.0, 0.0])],
        calibration=calibrate_threshold([1.0, 2.0, 3.0])))
    d = decide(pool, np.tile([0.0, 0.0], (2, 1)))
    assert d.kind == REUSE
    assert d.normalized_distance == 0.0
    assert d.threshold >= 0.1


def test_decide_expand_above_threshold():
    # calibration {1,2,3}: xi = 0.4; raw 4 -> normalized 0.6 -> expand
    cal = calibrate_threshold([1.0, 2.0, 3.0])
    pool = new_pool(CFG)
    pool.entries.append(entry_with(1, [gaussian_at([0.0, 0.0])], calibration=cal))
    feats = np.array([[4.0, 0.0]])  # identity covariance: distance 4
    d = decide(pool, feats)
    assert d.raw_distance == pytest.approx(4.0)
    assert d.normalized_distance == pytest.approx(0.6)
    assert d.threshold == pytest.approx(0.4)
    assert d.kind == EXPAND


def test_decision_monotone_in_raw_distance():
    cal = calibrate_threshold([1.0, 2.0, 3.0])
    pool = new_pool(CFG)
    pool.entries.append(entry_with(1, [gaussian_at([0.0, 0.0])], calibration=cal))
    kinds = []
    for d in np.linspace(0.0, 6.0, 25):
        kinds.append(decide(pool, np.array([[d, 0.0]])).kind)
    flips = sum(1 for a, b in zip(kinds, kinds[1:]) if a != b)
    assert kinds[0] == REUSE and kinds[-1] == EXPAND and flips == 1


def test_first_stage_bookkeeping():
    pool = new_pool(CFG)
    data = make_samples(SOURCE_A, 12, "s1")
    train_on_stage(pool, data, 1)
    assert pool.size == 1
    entry = pool.entries[0]
    assert entry.model_id == 1
    assert len(entry.history) == 1
    assert entry.calibration is not None
    assert entry.stages_trained == [1]
    assert pool.decisions[0].kind == EXPAND
    assert pool.decisions[0].selected_model == 0


def test_expand_copies_history_and_resets_momentum():
    pool = new_pool(CFG)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "s1"), 1)
    # force expansion by training a strongly shifted stage
    train_on_stage(pool, make_samples(SOURCE_C, 12, "s2"), 2)
    if pool.size == 1:  # tiny run may reuse; force the structural path
        parent = pool.entries[0]
        parent.calibration = ThresholdCalibration(0.0, 1e-9, 0.1)
        train_on_stage(pool, make_samples(SOURCE_C, 12, "s3"), 3)
    assert pool.size >= 2
    child = pool.entries[-1]
    parent = pool.entries[0]
    # child inherited the parent's history and added its own stage
    assert len(child.history) == len(parent.history) + 1
    assert child.history[0] is parent.history[0]
    assert child.model_id == pool.size


def test_model_ids_dense_from_one():
    pool = new_pool(CFG, Strategy.ALWAYS_EXPAND)
    for k in range(1, 4):
        train_on_stage(pool, make_samples(SOURCE_A, 10, f"st{k}"), k)
    assert [e.model_id for e in pool.entries] == [1, 2, 3]
    assert pool.size == 3  # ALWAYS_EXPAND grows every stage


def test_history_grows_on_reuse():
    pool = new_pool(CFG)
    for k in range(1, 4):
        train_on_stage(pool, make_samples(SOURCE_A, 12, f"r{k}"), k)
    sizes = [len(e.history) for e in pool.entries]
    stages = [len(e.stages_trained) for e in pool.entries]
    # history bookkeeping: own stages plus inherited prefix
    for e in pool.entries:
        assert len(e.history) >= len(e.stages_trained)


def test_no_history_keeps_single_gaussian():
    pool = new_pool(CFG, Strategy.NO_HISTORY)
    for k in range(1, 4):
        train_on_stage(pool, make_samples(SOURCE_A, 12, f"n{k}"), k)
    for e in pool.entries:
        assert len(e.history) == 1


def test_gram_strategy_uses_gram_stats():
    pool = new_pool(CFG, Strategy.GRAM)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "g1"), 1)
    from odex.pool import GramStats
    assert isinstance(pool.entries[0].history[0], GramStats)


def test_gram_distance_zero_on_own_mean():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((10, 4))
    g = gram_fit(feats)
    assert gram_distance_batch(g, feats).min() >= 0.0
    # distance of a stage to itself (same features, same Gram) is zero
    # in the aggregate sense: mean sample Gram equals the stage Gram
    sample_grams = np.einsum("ni,nj->nij", feats, feats)
    assert np.abs(sample_grams.mean(axis=0) - g.matrix).max() < 1e-12
    single = np.tile(feats[0], (5, 1))
    g_single = gram_fit(single)
    assert np.allclose(gram_distance_batch(g_single, single), 0.0, atol=1e-12)


def test_infer_singleton_routes_everything_to_model_one():
    pool = new_pool(CFG)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "i1"), 1)
    images = np.stack([s.image for s in make_samples(SOURCE_A, 5, "i2")])
    masks, chosen = infer_batch(pool, images)
    assert masks.shape == images.shape and masks.dtype == bool
    assert np.all(chosen == 1)
    mask, model_id = infer(pool, images[0])
    assert model_id == 1
    assert np.array_equal(mask, masks[0])


def test_infer_ties_break_to_lowest_id():
    pool = new_pool(CFG)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "t1"), 1)
    clone = snapshot_for_stage(pool).entries[0]
    clone.model_id = 2
    pool.entries.append(clone)
    images = np.stack([s.image for s in make_samples(SOURCE_A, 4, "t2")])
    _, chosen = infer_batch(pool, images)
    assert np.all(chosen == 1)


def test_infer_empty_pool_raises():
    with pytest.raises(ValueError):
        infer_batch(new_pool(CFG), np.zeros((1, 16, 16)))


def test_untrained_pool_predicts_empty_masks():
    pool = untrained_pool(CFG)
    images = np.stack([s.image for s in make_samples(SOURCE_A, 3, "u")])
    masks, chosen = infer_batch(pool, images)
    assert not masks.any()
    assert np.all(chosen == 1)


def test_snapshot_immutable_under_further_training():
    pool = new_pool(CFG)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "s1"), 1)
    snap = snapshot_for_stage(pool)
    probe = np.stack([s.image for s in make_samples(SOURCE_A, 6, "p")])
    before_masks, before_ids = snap.infer_batch(probe)
    train_on_stage(pool, make_samples(SOURCE_C, 12, "s2"), 2)
    after_masks, after_ids = snap.infer_batch(probe)
    assert np.array_equal(before_masks, after_masks)
    assert np.array_equal(before_ids, after_ids)
    live_masks, _ = pool.infer_batch(probe)
    assert pool.size >= 1


def test_snapshot_equals_live_pool_on_probe():
    pool = new_pool(CFG)
    train_on_stage(pool, make_samples(SOURCE_A, 12, "s1"), 1)
    snap = snapshot_for_stage(pool)
    probe = np.stack([s.image for s in make_samples(SOURCE_A, 6, "q")])
    a, ids_a = snap.infer_batch(probe)
    b, ids_b = pool.infer_batch(probe)
    assert np.array_equal(a, b) and np.array_equal(ids_a, ids_b)


def test_dice_expand_probe_reuses_on_same_distribution():
    cfg = dataclasses.replace(CFG, epochs_per_stage=4)
    pool = new_pool(cfg, Strategy.DICE_EXPAND)
    train_on_stage(pool, make_samples(SOURCE_A, 16, "d1"), 1)
    train_on_stage(pool, make_samples(SOURCE_A, 16, "d2"), 2)
    assert pool.decisions[1].kind == REUSE
    assert pool.decisions[1].threshold == 0.1
    assert pool.size == 1


def test_always_expand_selected_parent_recorded():
    pool = new_pool(CFG, Strategy.ALWAYS_EXPAND)
    train_on_stage(pool, make_samples(SOURCE_A, 10, "a1"), 1)
    train_on_stage(pool, make_samples(SOURCE_A, 10, "a2"), 2)
    d = pool.decisions[1]
    assert d.kind == EXPAND
    assert d.selected_model == 1
    assert d.threshold == -np.inf
