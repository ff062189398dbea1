"""Model-pool controller: shift-gated expansion and distance routing.

Each pool entry owns a learner, the Gaussian history of every stage
that trained it (inherited from its parent on expansion), and the
threshold calibrated on its own most recent training data. Decision
and inference distances are always computed in the candidate entry's
own feature space, since histories only describe that space.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import oodgate
from .learner import (Learner, LearnerConfig, Sample, copy_learner,
                      extract_features, forward, init_learner, train_stage)
from .oodgate import ThresholdCalibration, calibrate_threshold, fit_gaussian
from .seeding import subseed

REUSE = "reuse"
EXPAND = "expand"


class Strategy(enum.Enum):
    ODEX = "odex"
    ALWAYS_EXPAND = "always_expand"
    DICE_EXPAND = "dicex"
    NO_HISTORY = "no_history"
    GRAM = "gram"


# relative training-Dice fall that triggers expansion under DICE_EXPAND
DICE_FALL_THRESHOLD = 0.1


@dataclass(frozen=True)
class GramStats:
    """Mean outer-product Gram matrix of one stage's pooled features."""

    matrix: np.ndarray
    n_samples: int


def gram_fit(features: np.ndarray) -> GramStats:
    z = np.asarray(features, dtype=np.float64)
    return GramStats(matrix=z.T @ z / z.shape[0], n_samples=z.shape[0])


def gram_distance_batch(stats: GramStats, features: np.ndarray) -> np.ndarray:
    """Frobenius norm between each sample's own Gram and the stage
    Gram, (N,)."""
    z = np.asarray(features, dtype=np.float64)
    outer = np.einsum("ni,nj->nij", z, z)
    diff = outer - stats.matrix
    return np.sqrt(np.einsum("nij,nij->n", diff, diff))


@dataclass(frozen=True)
class ExpansionDecision:
    kind: str                 # REUSE or EXPAND
    selected_model: int       # 0 when the pool was empty
    raw_distance: float
    normalized_distance: float
    threshold: float


@dataclass
class ModelEntry:
    model_id: int
    learner: Learner
    history: list = field(default_factory=list)
    calibration: ThresholdCalibration | None = None
    last_stage_train_dice: float = 0.0
    stages_trained: list[int] = field(default_factory=list)


@dataclass
class ModelPool:
    config: LearnerConfig
    strategy: Strategy = Strategy.ODEX
    entries: list[ModelEntry] = field(default_factory=list)
    next_id: int = 1
    decisions: list[ExpansionDecision] = field(default_factory=list)

    def infer_batch(self, images: np.ndarray):
        return infer_batch(self, images)

    @property
    def size(self) -> int:
        return len(self.entries)


def new_pool(config: LearnerConfig, strategy: Strategy = Strategy.ODEX) -> ModelPool:
    return ModelPool(config=config, strategy=strategy)


def untrained_pool(config: LearnerConfig,
                   strategy: Strategy = Strategy.ODEX) -> ModelPool:
    """Deployable-before-training pipeline: one fresh entry, no history;
    routing falls through to it and the zero head predicts empty masks."""
    pool = new_pool(config, strategy)
    pool.entries.append(ModelEntry(model_id=1, learner=init_learner(config)))
    pool.next_id = 2
    return pool


def _fit_summary(pool: ModelPool, features: np.ndarray):
    if pool.strategy is Strategy.GRAM:
        return gram_fit(features)
    return fit_gaussian(features)


def _summed_distance_batch(pool: ModelPool, history, features) -> np.ndarray:
    if len(history) == 0:
        raise ValueError("history is empty")
    if pool.strategy is Strategy.GRAM:
        return np.sum([gram_distance_batch(s, features) for s in history], axis=0)
    return oodgate.summed_history_distance_batch(history, features)


def _entry_features(entry: ModelEntry, stage_features) -> np.ndarray:
    if isinstance(stage_features, Mapping):
        return stage_features[entry.model_id]
    return stage_features


def _comparable(entry: ModelEntry, raw):
    """Distances of different entries live in different feature spaces;
    each entry's own calibration maps them onto a common dimensionless
    scale (0 = its in-distribution floor). Uncalibrated entries are
    compared raw."""
    if entry.calibration is None:
        return raw
    cal = entry.calibration
    return np.maximum((raw - cal.d_min) / cal.denom, 0.0)


def select_model(pool: ModelPool, stage_features):
    """Entry whose calibration-normalized mean summed history distance
    of the stage features is smallest (ties go to the lowest id);
    returns (model_id, raw distance of that entry).

    stage_features is either one (N, C) array scored against every
    entry or a mapping model_id -> (N, C) with features extracted by
    each entry's own learner.
    """
    if not pool.entries:
        raise ValueError("pool is empty")
    best_id, best_key, best_raw = None, np.inf, np.inf
    for entry in pool.entries:
        if not entry.history:
            continue
        feats = _entry_features(entry, stage_features)
        raw = float(_summed_distance_batch(pool, entry.history, feats).mean())
        key = float(_comparable(entry, raw))
        if key < best_key:
            best_id, best_key, best_raw = entry.model_id, key, raw
    if best_id is None:
        raise ValueError("no entry has a history to score against")
    return best_id, best_raw


def get_entry(pool: ModelPool, model_id: int) -> ModelEntry:
    for entry in pool.entries:
        if entry.model_id == model_id:
            return entry
    raise KeyError(f"no entry with model_id {model_id}")


def decide(pool: ModelPool, stage_features) -> ExpansionDecision:
    """Reuse the best entry iff its normalized stage distance is
    strictly below its threshold; an empty pool forces expansion."""
    if not pool.entries:
        return ExpansionDecision(EXPAND, 0, np.inf, np.inf, 0.0)
    model_id, raw = select_model(pool, stage_features)
    entry = get_entry(pool, model_id)
    if entry.calibration is None:
        return ExpansionDecision(EXPAND, model_id, raw, np.inf, 0.0)
    normalized = oodgate.normalize_distance(entry.calibration, raw)
    threshold = (-np.inf if pool.strategy is Strategy.ALWAYS_EXPAND
                 else entry.calibration.xi)
    kind = REUSE if normalized < threshold else EXPAND
    return ExpansionDecision(kind, model_id, raw, normalized, threshold)


def _decide_dice_expand(pool: ModelPool, stage_features,
                        stage_data: list[Sample],
                        stage_index: int) -> ExpansionDecision:
    """Probe the selected entry with one fine-tuning epoch and expand
    when its training Dice falls more than 10% below the Dice of its
    own last stage."""
    model_id, _ = select_model(pool, stage_features)
    entry = get_entry(pool, model_id)
    probe_cfg = dataclasses.replace(pool.config, epochs_per_stage=1)
    probe = copy_learner(entry.learner)
    _, log = train_stage(probe, stage_data, probe_cfg,
                         seed=subseed(pool.config.seed, "probe", stage_index))
    probe_dice = log[-1].mean_train_dice
    baseline = entry.last_stage_train_dice
    fall = 0.0 if baseline <= 0 else (baseline - probe_dice) / baseline
    kind = REUSE if fall < DICE_FALL_THRESHOLD else EXPAND
    return ExpansionDecision(kind, model_id, probe_dice, fall,
                             DICE_FALL_THRESHOLD)


def train_on_stage(pool: ModelPool, stage_data: list[Sample],
                   stage_index: int) -> ModelPool:
    """Decide, train the chosen learner, refresh its history and
    threshold. Mutates the pool in place and returns it."""
    if not stage_data:
        raise ValueError("stage_data is empty")
    cfg = pool.config
    images = np.stack([s.image for s in stage_data])

    if not pool.entries:
        decision = ExpansionDecision(EXPAND, 0, np.inf, np.inf, 0.0)
    else:
        feats_by_id = {e.model_id: extract_features(e.learner, images)
                       for e in pool.entries}
        if pool.strategy is Strategy.DICE_EXPAND:
            decision = _decide_dice_expand(pool, feats_by_id, stage_data,
                                           stage_index)
        else:
            decision = decide(pool, feats_by_id)

    if decision.kind == EXPAND:
        if decision.selected_model == 0:
            learner = init_learner(cfg)
            history = []
        else:
            parent = get_entry(pool, decision.selected_model)
            learner = copy_learner(parent.learner)
            for buf in learner.velocity.values():  # fresh optimizer state
                buf[:] = 0.0
            history = list(parent.history)
        entry = ModelEntry(model_id=pool.next_id, learner=learner,
                           history=history)
        pool.entries.append(entry)
        pool.next_id += 1
    else:
        entry = get_entry(pool, decision.selected_model)

    _, log = train_stage(entry.learner, stage_data, cfg,
                         seed=subseed(cfg.seed, "stage", stage_index))

    feats_post = extract_features(entry.learner, images)
    summary = _fit_summary(pool, feats_post)
    if pool.strategy is Strategy.NO_HISTORY:
        entry.history = [summary]
    else:
        entry.history.append(summary)
    in_dist = _summed_distance_batch(pool, entry.history, feats_post)
    entry.calibration = calibrate_threshold(in_dist)
    if log:
        entry.last_stage_train_dice = log[-1].mean_train_dice
    entry.stages_trained.append(stage_index)
    pool.decisions.append(decision)
    return pool


def _routing_distances(pool: ModelPool, images: np.ndarray) -> np.ndarray:
    """(E, N) calibration-normalized distance matrix; entries without a
    history get +inf."""
    rows = []
    for entry in pool.entries:
        if not entry.history:
            rows.append(np.full(images.shape[0], np.inf))
            continue
        feats = extract_features(entry.learner, images)
        raw = _summed_distance_batch(pool, entry.history, feats)
        rows.append(_comparable(entry, raw))
    return np.stack(rows)


def infer_batch(pool: ModelPool, images: np.ndarray):
    """Route each image to the entry with the smallest normalized
    summed history distance in its own feature space; threshold its
    probabilities at 0.5. Returns (masks (N,H,W) bool, chosen model
    ids (N,))."""
    if not pool.entries:
        raise ValueError("pool is empty")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    dists = _routing_distances(pool, images)
    which = np.argmin(dists, axis=0)  # first minimum = lowest model_id
    ids = np.array([e.model_id for e in pool.entries])
    masks = np.empty(images.shape, dtype=bool)
    for ei, entry in enumerate(pool.entries):
        sel = which == ei
        if not sel.any():
            continue
        probs, _ = forward(entry.learner, images[sel], training_mode=False)
        masks[sel] = probs > 0.5
    return masks, ids[which]


def infer(pool: ModelPool, image: np.ndarray):
    """Single-image routing; returns (mask (H,W) bool, model_id)."""
    masks, chosen = infer_batch(pool, np.asarray(image)[None])
    return masks[0], int(chosen[0])


def snapshot_for_stage(pool: ModelPool) -> ModelPool:
    """Frozen deep copy for metric evaluation; later training of the
    live pool cannot affect it."""
    return copy.deepcopy(pool)
