"""Two-stage training: novel-view synthesis, then the grasp head.

Stage one fits the encoder and core by rendering one fixed camera's view
from another camera's image. Stage two freezes both and fits only the grasp
head with a softmax cross-entropy over one positive and many negatives. The
joint baseline runs the stage-two loop with nothing frozen.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import rays_for_pixels
from .field import (CameraObservation, ModelParams, encode_observation,
                    grasp_theta, render_rays)
from .scene import GRASP_DIRECTION, SceneSpec, foreground_mask, sample_negative_positions, \
    sample_positive_grasp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NvsConfig:
    steps: int = 2000
    warmup_steps: int = 10000
    lr_omega_max: float = 1e-4
    lr_phi_max: float = 1e-5
    rays_per_step: int = 1024
    n_samples_per_ray: int = 24
    foreground_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.lr_omega_max <= 0 or self.lr_phi_max <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class GraspTrainConfig:
    lr: float = 1e-4
    negatives_per_scene: int = 2047
    epochs: int = 250
    freeze_backbone: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.negatives_per_scene < 1:
            raise ValueError("negatives_per_scene must be at least 1")


@dataclass
class TrainingScene:
    """A scene with its ground truth and one observation per fixed camera."""

    scene: SceneSpec
    observations: list


def warmup_lr(step: int, lr_max: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to ``lr_max`` at ``warmup_steps``, constant after."""
    return lr_max * min(step, warmup_steps) / warmup_steps


def nvs_learning_rates(step: int, config: NvsConfig) -> tuple[float, float]:
    return (warmup_lr(step, config.lr_omega_max, config.warmup_steps),
            warmup_lr(step, config.lr_phi_max, config.warmup_steps))


def sample_pixels(target: CameraObservation, n: int, fg_fraction: float, background,
                  rng: np.random.Generator) -> np.ndarray:
    """Flat pixel indices, about ``fg_fraction`` of them on non-background pixels."""
    h, w = target.image.shape[:2]
    fg = np.nonzero(foreground_mask(target.image, background).reshape(-1))[0]
    n_fg = min(int(round(n * fg_fraction)), n) if fg.size else 0
    picks = [rng.choice(fg, n_fg)] if n_fg else []
    picks.append(rng.choice(h * w, n - n_fg, replace=False))
    return np.concatenate(picks)


def nvs_loss(source: CameraObservation, target: CameraObservation, pixels: np.ndarray,
             params: ModelParams, box, n_samples: int, rng) -> Tensor:
    """Mean squared RGB error of rendered target pixels."""
    w = target.image.shape[1]
    u, v = pixels % w, pixels // w
    origins, dirs = rays_for_pixels(u, v, target.camera.K, target.camera.RT)
    enc = encode_observation(source, params)
    rgb, _ = render_rays(origins, dirs, enc, params, box, n_samples, "stratified", rng)
    gt = target.image.reshape(-1, 3)[pixels]
    diff = rgb - gt
    return (diff * diff).mean()


def nvs_step(batch, params: ModelParams, opt_state: dict, config: NvsConfig, step: int, box, rng):
    """One optimisation step of the encoder and core.

    Args:
        batch: ``(source, target, pixels)``.
        opt_state: ``{"omega": AdamState, "phi": AdamState}``.

    Returns:
        ``(loss, params)``.
    """
    source, target, pixels = batch
    work = params.trainable(("omega", "phi"))
    with ad.Tape() as tape:
        loss = nvs_loss(source, target, pixels, work, box, config.n_samples_per_ray, rng)
    if not np.isfinite(loss.data).all():
        raise ad.NonFiniteError("non-finite NVS loss")
    grads = ad.backward(tape, loss)
    lrs = dict(zip(("omega", "phi"), nvs_learning_rates(step, config)))
    new = {}
    for g in ("omega", "phi"):
        group = work.group(g)
        gg = {k: grads[t.id] for k, t in group.items()}
        upd, _ = ad.adam_step(group, gg, opt_state[g], lr=lrs[g])
        new.update(upd)
    return float(loss.data), params.updated(new)


def train_nvs(dataset: list[TrainingScene], params: ModelParams, config: NvsConfig, box,
              on_step: Callable | None = None, checkpoint_every: int = 0,
              on_checkpoint: Callable | None = None) -> ModelParams:
    """Run ``config.steps`` NVS steps, each on a random scene and view pair.

    ``on_checkpoint(step, params)`` fires after every ``checkpoint_every``
    completed steps, except the last.
    """
    rng = np.random.default_rng(config.seed)
    opt = {"omega": ad.AdamState(config.lr_omega_max), "phi": ad.AdamState(config.lr_phi_max)}
    bg = params.config.background
    for step in range(config.steps):
        ts = dataset[int(rng.integers(len(dataset)))]
        n_views = len(ts.observations)
        source = ts.observations[int(rng.integers(n_views))]
        target = ts.observations[int(rng.integers(n_views))]
        pixels = sample_pixels(target, config.rays_per_step, config.foreground_fraction, bg, rng)
        loss, params = nvs_step((source, target, pixels), params, opt, config, step, box, rng)
        if on_step is not None:
            on_step(step, loss, nvs_learning_rates(step, config))
        done = step + 1
        if on_checkpoint and checkpoint_every and done % checkpoint_every == 0 and done < config.steps:
            on_checkpoint(done, params)
    return params


# ---------------------------------------------------------------------------
# Grasp head


def grasp_loss(scores, positive: int = 0) -> Tensor:
    """Softmax cross-entropy of the positive among all candidate scores."""
    scores = ad.as_tensor(scores)
    if scores.ndim != 1:
        raise ValueError("scores must be a vector")
    return ad.logsumexp(scores, axis=0) - scores[positive]


def label_loss(scores, labels) -> Tensor:
    """:func:`grasp_loss` from 0/1 labels; exactly one label may be 1."""
    labels = np.asarray(labels)
    pos = np.nonzero(labels == 1)[0]
    if pos.size != 1:
        raise ValueError(f"expected exactly one positive label, got {pos.size}")
    return grasp_loss(scores, int(pos[0]))


def grasp_candidates(scene: SceneSpec, n_negatives: int, rng) -> np.ndarray:
    """Positive first, then negatives; (1 + n, 3)."""
    pos = sample_positive_grasp(scene, rng).position
    neg = sample_negative_positions(scene, n_negatives, rng)
    return np.concatenate([pos[None], neg])


def train_grasp(dataset: list[TrainingScene], params: ModelParams, config: GraspTrainConfig,
                on_step: Callable | None = None) -> ModelParams:
    """Fit the grasp head (and, unless frozen, the backbone) one scene per step.

    With ``freeze_backbone`` the encoder and core tensors are returned
    bit-identical; only the head is updated.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for ts in dataset:
        if not ts.scene.objects:
            raise ValueError("training scene without objects has no positive grasp")
    rng = np.random.default_rng(config.seed)
    groups = ("psi",) if config.freeze_backbone else ("omega", "phi", "psi")
    params = ModelParams(params.tensors, params.config, config.freeze_backbone,
                         config.freeze_backbone)
    opt = ad.AdamState(config.lr)
    direction = np.array(GRASP_DIRECTION)
    cache: dict = {}
    step = 0
    for epoch in range(config.epochs):
        for si in rng.permutation(len(dataset)):
            ts = dataset[int(si)]
            view = int(rng.integers(len(ts.observations)))
            cands = grasp_candidates(ts.scene, config.negatives_per_scene, rng)
            work = params.trainable(groups)
            with ad.Tape() as tape:
                if config.freeze_backbone:
                    key = (int(si), view)
                    if key not in cache:
                        cache[key] = encode_observation(ts.observations[view], work)
                    enc = cache[key]
                else:
                    enc = encode_observation(ts.observations[view], work)
                scores = grasp_theta(Tensor(cands), direction, enc, work)
                loss = grasp_loss(scores, 0)
            grads = ad.backward(tape, loss)
            train = {k: t for k, t in work.tensors.items() if k.split(".")[0] in groups}
            upd, _ = ad.adam_step(train, {k: grads[t.id] for k, t in train.items()}, opt)
            params = params.updated(upd)
            if on_step is not None:
                on_step(step, epoch, float(loss.data), config.lr)
            step += 1
    return params


def train_joint_baseline(dataset, params: ModelParams, config: GraspTrainConfig,
                         on_step: Callable | None = None) -> ModelParams:
    """Same loop as :func:`train_grasp` with every group trainable."""
    cfg = GraspTrainConfig(**{**asdict(config), "freeze_backbone": False})
    return train_grasp(dataset, params, cfg, on_step)


def probe_loss(ts: TrainingScene, params: ModelParams, n_negatives: int, seed: int,
               view: int = 0) -> float:
    """Grasp loss on a fixed candidate draw, for monitoring."""
    rng = np.random.default_rng(seed)
    cands = grasp_candidates(ts.scene, n_negatives, rng)
    enc = encode_observation(ts.observations[view], params)
    scores = grasp_theta(Tensor(cands), np.array(GRASP_DIRECTION), enc, params)
    return float(grasp_loss(scores, 0).data)
