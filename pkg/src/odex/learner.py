"""Tiny 2-D segmentation network trained from scratch.

Architecture: conv(1->C, 3x3) -> BN1 -> ReLU -> conv(C->C, 3x3) -> BN2
-> ReLU -> 1x1 head -> sigmoid. Gradients are written by hand,
including the batch-statistics branch of both BN layers. The first
batch-norm output (pre-ReLU) is the feature map used for distribution
tracking; `extract_features` pools it to one C-vector per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import conv2d_backward, conv2d_forward
from .metrics import dice
from .seeding import rng_for

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # running = (1 - m) * running + m * batch

PARAM_NAMES = (
    "conv1_w", "conv1_b", "bn1_gamma", "bn1_beta",
    "conv2_w", "conv2_b", "bn2_gamma", "bn2_beta",
    "head_w", "head_b",
)


class NonFiniteGradientError(RuntimeError):
    """A gradient tensor contains NaN or infinity; the step was aborted."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient in {tensor_name}")
        self.tensor_name = tensor_name


@dataclass(frozen=True)
class Sample:
    """One image/mask pair; task_label identifies the generating
    distribution and is only ever read by evaluation code."""

    image: np.ndarray
    mask: np.ndarray
    task_label: int
    sample_id: int

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask shapes differ")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values outside [0, 1]")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask is not binary")


@dataclass(frozen=True)
class LearnerConfig:
    channels: int = 8
    kernel_size: int = 3
    image_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    epochs_per_stage: int = 20
    batch_size: int = 8
    dice_smoothing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")


@dataclass
class Learner:
    config: LearnerConfig
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]   # bn1_mean, bn1_var, bn2_mean, bn2_var
    velocity: dict[str, np.ndarray]  # SGD momentum buffers, keyed like params


def init_learner(config: LearnerConfig, seed: int | None = None) -> Learner:
    """Fresh learner: fan-in uniform conv weights, zero head, identity BN."""
    c, k = config.channels, config.kernel_size
    rng = rng_for(config.seed if seed is None else seed, "learner-init")
    a1 = 1.0 / np.sqrt(1 * k * k)
    a2 = 1.0 / np.sqrt(c * k * k)
    params = {
        "conv1_w": rng.uniform(-a1, a1, (c, 1, k, k)),
        "conv1_b": np.zeros(c),
        "bn1_gamma": np.ones(c),
        "bn1_beta": np.zeros(c),
        "conv2_w": rng.uniform(-a2, a2, (c, c, k, k)),
        "conv2_b": np.zeros(c),
        "bn2_gamma": np.ones(c),
        "bn2_beta": np.zeros(c),
        "head_w": np.zeros((1, c, 1, 1)),
        "head_b": np.zeros(1),
    }
    running = {
        "bn1_mean": np.zeros(c), "bn1_var": np.ones(c),
        "bn2_mean": np.zeros(c), "bn2_var": np.ones(c),
    }
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    return Learner(config, params, running, velocity)


def copy_learner(learner: Learner) -> Learner:
    return Learner(
        learner.config,
        {k: v.copy() for k, v in learner.params.items()},
        {k: v.copy() for k, v in learner.running.items()},
        {k: v.copy() for k, v in learner.velocity.items()},
    )


def _check_images(learner: Learner, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    s = learner.config.image_size
    if images.ndim != 3 or images.shape[1:] != (s, s):
        raise ValueError(f"expected images of shape (N, {s}, {s}), got {images.shape}")
    return images


def _bn_forward(a, gamma, beta, run_mean, run_var, training):
    """Returns (out, cache). Batch statistics are population (divide by
    the full per-channel count)."""
    if training:
        mean = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3))
    else:
        mean, var = run_mean, run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (a - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, mean, var)


def _bn_backward(gout, cache, gamma):
    xhat, inv_std, _, _ = cache
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    g_gamma = np.einsum("nchw,nchw->c", gout, xhat)
    g_beta = gout.sum(axis=(0, 2, 3))
    g_xhat = gout * gamma[None, :, None, None]
    s1 = g_xhat.sum(axis=(0, 2, 3))
    s2 = np.einsum("nchw,nchw->c", g_xhat, xhat)
    ga = (inv_std[None, :, None, None] / m) * (
        m * g_xhat
        - s1[None, :, None, None]
        - xhat * s2[None, :, None, None]
    )
    return ga, g_gamma, g_beta


def _forward_pass(learner: Learner, images: np.ndarray, training: bool,
                  update_running: bool = False) -> dict:
    p = learner.params
    x = images[:, None, :, :]
    a1 = conv2d_forward(x, p["conv1_w"], p["conv1_b"])
    z1, bn1_cache = _bn_forward(a1, p["bn1_gamma"], p["bn1_beta"],
                                learner.running["bn1_mean"],
                                learner.running["bn1_var"], training)
    r1 = np.maximum(z1, 0.0)
    a2 = conv2d_forward(r1, p["conv2_w"], p["conv2_b"])
    z2, bn2_cache = _bn_forward(a2, p["bn2_gamma"], p["bn2_beta"],
                                learner.running["bn2_mean"],
                                learner.running["bn2_var"], training)
    r2 = np.maximum(z2, 0.0)
    logits = conv2d_forward(r2, p["head_w"], p["head_b"])[:, 0]
    probs = 1.0 / (1.0 + np.exp(-logits))

    if training and update_running:
        for key, cache in (("bn1", bn1_cache), ("bn2", bn2_cache)):
            _, _, mean, var = cache
            learner.running[f"{key}_mean"] *= 1.0 - BN_MOMENTUM
            learner.running[f"{key}_mean"] += BN_MOMENTUM * mean
            learner.running[f"{key}_var"] *= 1.0 - BN_MOMENTUM
            learner.running[f"{key}_var"] += BN_MOMENTUM * var

    return {
        "x": x, "a1": a1, "z1": z1, "bn1_cache": bn1_cache, "r1": r1,
        "a2": a2, "z2": z2, "bn2_cache": bn2_cache, "r2": r2,
        "logits": logits, "probs": probs,
    }


def forward(learner: Learner, images: np.ndarray, training_mode: bool):
    """Full forward pass.

    Returns (probabilities (N,H,W), bn1 feature maps (N,C,H,W), the
    latter taken before ReLU). Training mode normalizes with batch
    statistics and updates the running estimates; evaluation mode uses
    the stored running statistics and never mutates the learner.
    """
    images = _check_images(learner, images)
    if training_mode and images.shape[0] < 2:
        raise ValueError("training-mode forward needs a batch of >= 2 images")
    cache = _forward_pass(learner, images, training_mode,
                          update_running=training_mode)
    return cache["probs"], cache["z1"]


def extract_features(learner: Learner, images: np.ndarray) -> np.ndarray:
    """Spatial mean of each BN1 channel in evaluation mode, (N, C)."""
    images = _check_images(learner, images)
    p = learner.params
    a1 = conv2d_forward(images[:, None], p["conv1_w"], p["conv1_b"])
    z1, _ = _bn_forward(a1, p["bn1_gamma"], p["bn1_beta"],
                        learner.running["bn1_mean"],
                        learner.running["bn1_var"], training=False)
    return z1.mean(axis=(2, 3))


def dice_bce_loss(probabilities: np.ndarray, mask: np.ndarray,
                  smoothing: float = 1.0):
    """Equal-weight soft-Dice + pixel-mean BCE for one image.

    Returns (loss, gradient w.r.t. the probabilities). Probabilities
    must lie strictly inside (0, 1); BCE is undefined at the endpoints
    and no clamp is applied.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    g = np.asarray(mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("probability and mask shapes differ")
    if p.min() <= 0.0 or p.max() >= 1.0:
        raise ValueError("probabilities must be strictly inside (0, 1)")
    npix = p.size
    num = 2.0 * (p * g).sum() + smoothing
    den = p.sum() + g.sum() + smoothing
    soft_dice = num / den
    bce = -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p)).mean()
    loss = 0.5 * (1.0 - soft_dice) + 0.5 * bce
    d_dice = (2.0 * g * den - num) / den**2
    d_bce = (p - g) / (p * (1.0 - p)) / npix
    grad = 0.5 * (-d_dice) + 0.5 * d_bce
    return loss, grad


def _batch_loss_from_logits(logits: np.ndarray, masks: np.ndarray,
                            smoothing: float):
    """Batch-mean Dice+BCE evaluated in logit space.

    Identical to averaging dice_bce_loss over the batch but safe where
    sigmoid saturates to exactly 0 or 1 in floating point. Returns
    (loss, gradient w.r.t. logits, probabilities).
    """
    n = logits.shape[0]
    npix = logits.shape[1] * logits.shape[2]
    probs = 1.0 / (1.0 + np.exp(-logits))
    loss = 0.0
    dlogits = np.empty_like(logits)
    for i in range(n):
        z, g, p = logits[i], masks[i], probs[i]
        num = 2.0 * (p * g).sum() + smoothing
        den = p.sum() + g.sum() + smoothing
        # BCE in logit form: mean(softplus(z) - g*z)
        bce = (np.logaddexp(0.0, z) - g * z).mean()
        loss += 0.5 * (1.0 - num / den) + 0.5 * bce
        d_dice_dp = (2.0 * g * den - num) / den**2
        dlogits[i] = (0.5 * (-d_dice_dp) * p * (1.0 - p)
                      + 0.5 * (p - g) / npix)
    loss /= n
    dlogits /= n
    return loss, dlogits, probs


def _hard_dice(probs: np.ndarray, masks: np.ndarray) -> float:
    scores = [dice(probs[i] > 0.5, masks[i] > 0.5) for i in range(probs.shape[0])]
    return float(np.mean(scores))


def compute_gradients(learner: Learner, images: np.ndarray, masks: np.ndarray,
                      update_running: bool = True):
    """Analytic gradients of the batch loss for every parameter tensor.

    Returns (grads dict, loss, hard train Dice of the batch). The BN
    batch-statistics branch is part of the gradient.
    """
    images = _check_images(learner, images)
    masks = np.asarray(masks, dtype=np.float64)
    if images.shape[0] < 2:
        raise ValueError("training step needs a batch of >= 2 images")
    p = learner.params
    cache = _forward_pass(learner, images, training=True,
                          update_running=update_running)
    loss, dlogits, probs = _batch_loss_from_logits(
        cache["logits"], masks, learner.config.dice_smoothing)

    grads: dict[str, np.ndarray] = {}
    g_logits4 = dlogits[:, None]
    g_r2, grads["head_w"], grads["head_b"] = conv2d_backward(
        cache["r2"], p["head_w"], g_logits4)
    g_z2 = g_r2 * (cache["z2"] > 0.0)
    g_a2, grads["bn2_gamma"], grads["bn2_beta"] = _bn_backward(
        g_z2, cache["bn2_cache"], p["bn2_gamma"])
    g_r1, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(
        cache["r1"], p["conv2_w"], g_a2)
    g_z1 = g_r1 * (cache["z1"] > 0.0)
    g_a1, grads["bn1_gamma"], grads["bn1_beta"] = _bn_backward(
        g_z1, cache["bn1_cache"], p["bn1_gamma"])
    _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(
        cache["x"], p["conv1_w"], g_a1, need_gx=False)

    return grads, loss, _hard_dice(probs, masks)


def sgd_step(learner: Learner, grads: dict[str, np.ndarray]) -> None:
    """v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v."""
    cfg = learner.config
    for name in PARAM_NAMES:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
    for name in PARAM_NAMES:
        v = learner.velocity[name]
        v *= cfg.momentum
        v += grads[name]
        v += cfg.weight_decay * learner.params[name]
        learner.params[name] -= cfg.learning_rate * v


def backward_and_step(learner: Learner, batch: list[Sample],
                      regularizer=None):
    """One SGD step on a minibatch.

    Returns (loss before the step, hard train Dice of the batch). A
    regularizer with loss_and_grads(learner) -> (loss, grads-or-None)
    may add a penalty term.
    """
    images = np.stack([s.image for s in batch])
    masks = np.stack([s.mask for s in batch])
    grads, loss, train_dice = compute_gradients(learner, images, masks)
    if regularizer is not None:
        r_loss, r_grads = regularizer.loss_and_grads(learner)
        loss += r_loss
        if r_grads is not None:
            for name, g in r_grads.items():
                grads[name] = grads[name] + g
    sgd_step(learner, grads)
    return loss, train_dice


@dataclass(frozen=True)
class EpochStats:
    mean_loss: float
    mean_train_dice: float


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # a singleton batch has no usable batch statistics
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train_stage(learner: Learner, stage_data: list[Sample],
                config: LearnerConfig, seed: int | None = None,
                regularizer=None):
    """Train for config.epochs_per_stage epochs of seeded shuffled
    minibatches; returns (learner, per-epoch EpochStats log)."""
    if not stage_data:
        raise ValueError("stage_data is empty")
    rng = rng_for(config.seed if seed is None else seed, "stage-shuffle")
    log: list[EpochStats] = []
    for _ in range(config.epochs_per_stage):
        losses, dices = [], []
        for idx in _minibatches(len(stage_data), config.batch_size, rng):
            batch = [stage_data[i] for i in idx]
            loss, train_dice = backward_and_step(learner, batch, regularizer)
            losses.append(loss)
            dices.append(train_dice)
        log.append(EpochStats(float(np.mean(losses)), float(np.mean(dices))))
    return learner, log
