"""Comparison strategies sharing the learner and stream machinery:
naive sequential training, the joint upper bound, EWC, the pool-based
ablation variants, and static per-task training."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .learner import (Learner, LearnerConfig, Sample, compute_gradients,
                      copy_learner, forward, init_learner, train_stage)
from .pool import ModelPool, Strategy, new_pool, snapshot_for_stage, train_on_stage
from .seeding import rng_for, subseed
from .stream import Stage


@dataclass(frozen=True)
class SingleModelPipeline:
    """Single fixed learner behind the same inference interface as a
    pool snapshot."""

    learner: Learner

    def infer_batch(self, images: np.ndarray):
        probs, _ = forward(self.learner, images, training_mode=False)
        return probs > 0.5, np.ones(probs.shape[0], dtype=int)

    @property
    def size(self) -> int:
        return 1


def train_sequential(stages: list[Stage], config: LearnerConfig):
    """One learner through every stage with no forgetting mechanism;
    returns a frozen pipeline per stage."""
    if not stages:
        raise ValueError("empty stream")
    learner = init_learner(config)
    snapshots = []
    for stage in stages:
        train_stage(learner, stage.train, config,
                    seed=subseed(config.seed, "stage", stage.spec.stage_index))
        snapshots.append(SingleModelPipeline(copy_learner(learner)))
    return snapshots


def train_joint(stages: list[Stage], config: LearnerConfig) -> SingleModelPipeline:
    """Upper bound: the shuffled union of all training data for
    n_stages * epochs_per_stage epochs."""
    if not stages:
        raise ValueError("empty stream")
    all_data = [s for stage in stages for s in stage.train]
    cfg = dataclasses.replace(
        config, epochs_per_stage=config.epochs_per_stage * len(stages))
    learner = init_learner(config)
    train_stage(learner, all_data, cfg, seed=subseed(config.seed, "joint"))
    return SingleModelPipeline(learner)


def fit_fisher(learner: Learner, data: list[Sample], config: LearnerConfig,
               n_batches: int = 16, seed: int = 0) -> dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean squared gradient over sampled
    batches. Does not mutate the learner."""
    rng = rng_for(seed, "fisher-batches")
    batch_size = min(config.batch_size, len(data))
    if batch_size < 2:
        raise ValueError("need at least 2 samples for Fisher estimation")
    fisher = {name: np.zeros_like(arr) for name, arr in learner.params.items()}
    for _ in range(n_batches):
        idx = rng.choice(len(data), size=batch_size, replace=False)
        images = np.stack([data[i].image for i in idx])
        masks = np.stack([data[i].mask for i in idx])
        grads, _, _ = compute_gradients(learner, images, masks,
                                        update_running=False)
        for name, g in grads.items():
            fisher[name] += g * g
    for name in fisher:
        fisher[name] /= n_batches
    return fisher


@dataclass
class EwcRegularizer:
    """Quadratic anchor (lambda/2) * sum F * (theta - theta_ref)^2
    against the most recent consolidated reference."""

    ref_params: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    lam: float = 0.4

    def loss_and_grads(self, learner: Learner):
        if self.lam == 0.0:
            return 0.0, None
        loss = 0.0
        grads = {}
        for name, theta in learner.params.items():
            diff = theta - self.ref_params[name]
            f = self.fisher[name]
            loss += 0.5 * self.lam * float((f * diff * diff).sum())
            grads[name] = self.lam * f * diff
        return loss, grads


def train_ewc(stages: list[Stage], config: LearnerConfig, lam: float = 0.4,
              fisher_batches: int = 16):
    """Sequential training with an EWC penalty consolidated after every
    stage; with lam = 0 the trajectory is bit-identical to
    train_sequential under the same config."""
    if not stages:
        raise ValueError("empty stream")
    learner = init_learner(config)
    regularizer = None
    snapshots = []
    for stage in stages:
        k = stage.spec.stage_index
        train_stage(learner, stage.train, config,
                    seed=subseed(config.seed, "stage", k),
                    regularizer=regularizer)
        snapshots.append(SingleModelPipeline(copy_learner(learner)))
        fisher = fit_fisher(learner, stage.train, config, n_batches=fisher_batches,
                            seed=subseed(config.seed, "fisher", k))
        regularizer = EwcRegularizer(
            ref_params={n: p.copy() for n, p in learner.params.items()},
            fisher=fisher, lam=lam)
    return snapshots


def run_variant(strategy, stages: list[Stage], config: LearnerConfig):
    """Drive a pool strategy through the stream; returns (snapshots,
    pool-size trace)."""
    if isinstance(strategy, str):
        try:
            strategy = Strategy(strategy)
        except ValueError:
            raise ValueError(f"unknown strategy {strategy!r}") from None
    pool = new_pool(config, strategy)
    snapshots, trace = [], []
    for stage in stages:
        train_on_stage(pool, stage.train, stage.spec.stage_index)
        snapshots.append(snapshot_for_stage(pool))
        trace.append(pool.size)
    return snapshots, trace


def static_per_task(stages: list[Stage], config: LearnerConfig) -> np.ndarray:
    """Train an independent learner per stage and cross-evaluate mean
    Dice on every stage's test set: matrix[i, j] = trained on i,
    tested on j."""
    from .metrics import dice

    n = len(stages)
    matrix = np.zeros((n, n))
    for i, stage in enumerate(stages):
        learner = init_learner(config, seed=subseed(config.seed, "static", i + 1))
        train_stage(learner, stage.train, config,
                    seed=subseed(config.seed, "stage", stage.spec.stage_index))
        pipeline = SingleModelPipeline(learner)
        for j, other in enumerate(stages):
            images = np.stack([s.image for s in other.test])
            pred, _ = pipeline.infer_batch(images)
            matrix[i, j] = np.mean([dice(pred[k], other.test[k].mask)
                                    for k in range(len(other.test))])
    return matrix
