"""Training: Adam updates, flip augmentation, epoch scheduling, validation,
checkpointing.

A training run is deterministic given (config, seed, corpus): shuffling and
augmentation use per-epoch seeded generators and the optimizer is pure
arithmetic. Stages select which branch trains: ``global`` and ``local``
train one branch standalone (the local branch then sees a zero guidance
map), ``end2end`` trains everything under the composite loss, and
``staged`` chains global -> local-with-frozen-global -> end2end. While the
global branch is frozen it runs in inference mode, so its parameters and
running statistics stay bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import kittiio
from .loss import LossWeights, composite_loss, focal_mse, validity_mask
from .model import FusionNet, global_forward, local_forward, save_checkpoint
from .simdata import SceneSample
from .tensor import Tape, Tensor, backward

STAGES = ("end2end", "global", "local", "staged")


class MissingGradient(RuntimeError):
    """A parameter reached the optimizer without an accumulated gradient."""


class NumericAbort(FloatingPointError):
    """Training hit a non-finite loss; carries location diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip_prob: float = 0.5
    flip_axis: str = "horizontal"   # mirror about the vertical axis; "vertical" turns upside down
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0       # extra periodic checkpoints; best + final always kept
    guidance_skip: bool = False
    detach_focal: bool = True
    stage_epochs: tuple = (10, 10, 10)   # staged training: global / local / end2end

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.flip_axis not in ("horizontal", "vertical"):
            raise ValueError(f"flip_axis must be horizontal or vertical, got {self.flip_axis!r}")


# --- optimizer --------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_init(params) -> AdamState:
    return AdamState(m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if len(grads) != len(params):
        raise MissingGradient(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            raise MissingGradient(f"parameter {i} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# --- data handling ----------------------------------------------------------


def flip_sample(sample: SceneSample, axis: str = "horizontal") -> SceneSample:
    """Mirror every modality of a sample consistently."""
    ax2 = 1 if axis == "horizontal" else 0   # W or H axis of 2-D rasters
    flip2 = (lambda a: np.ascontiguousarray(a[:, ::-1])) if ax2 == 1 else \
            (lambda a: np.ascontiguousarray(a[::-1, :]))
    return SceneSample(
        rgb=np.ascontiguousarray(sample.rgb[:, :, ::-1] if ax2 == 1 else sample.rgb[:, ::-1, :]),
        lidar=flip2(sample.lidar),
        gt=flip2(sample.gt),
        dense_truth=flip2(sample.dense_truth) if sample.dense_truth is not None else None,
        artifact_mask=flip2(sample.artifact_mask) if sample.artifact_mask is not None else None,
        sample_id=sample.sample_id,
    )


def augment(sample: SceneSample, rng: np.random.Generator,
            flip_prob: float = 0.5, flip_axis: str = "horizontal") -> SceneSample:
    """With probability ``flip_prob``, mirror all modalities together."""
    if rng.random() < flip_prob:
        return flip_sample(sample, flip_axis)
    return sample


def load_corpus(directory, crop_h: int = None) -> dict:
    """Read every manifest-listed sample, keyed by split."""
    splits: dict = {"train": [], "val": []}
    for sample_id, split in kittiio.read_manifest(directory):
        splits.setdefault(split, []).append(
            kittiio.read_sample(directory, sample_id, crop_h=crop_h))
    return splits


def _batch_arrays(samples: list[SceneSample], dtype):
    # channel-major layout: [C, N, H, W]
    rgb = np.stack([s.rgb for s in samples], axis=1).astype(dtype, copy=False)
    lidar = np.stack([s.lidar for s in samples])[None].astype(dtype, copy=False)
    gt = np.stack([s.gt for s in samples])[None].astype(dtype, copy=False)
    mask = validity_mask(gt)
    return np.ascontiguousarray(rgb), np.ascontiguousarray(lidar), gt, mask


def _zero_guidance(lidar_t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(lidar_t.data))


def _forward_loss(model: FusionNet, stage: str, rgb_t: Tensor, lidar_t: Tensor,
                  gt: np.ndarray, mask: np.ndarray, epoch: int,
                  config: TrainConfig):
    """Stage-specific forward pass; returns (loss tensor, named depth maps)."""
    if stage == "global":
        _, d_global, _ = global_forward(model.global_branch, rgb_t, lidar_t, training=True)
        loss = focal_mse(d_global, gt, mask, epoch, config.detach_focal)
        return loss, {"d_global": d_global.data}
    if stage == "local":
        d_local, _ = local_forward(model.local_branch, lidar_t, _zero_guidance(lidar_t),
                                   training=True)
        loss = focal_mse(d_local, gt, mask, epoch, config.detach_focal)
        return loss, {"d_local": d_local.data}
    if stage == "local_guided":
        guidance, d_global, conf_global = global_forward(
            model.global_branch, rgb_t, lidar_t, training=False)
        d_local, _ = local_forward(model.local_branch, lidar_t, guidance, training=True)
        loss = focal_mse(d_local, gt, mask, epoch, config.detach_focal)
        return loss, {"d_local": d_local.data, "d_global": d_global.data}
    if stage == "end2end":
        out = model(rgb_t, lidar_t, training=True)
        loss = composite_loss(out.d_out, out.d_global, out.d_local, gt, mask,
                              epoch, config.weights, config.detach_focal)
        return loss, {"d_out": out.d_out.data, "d_global": out.d_global.data,
                      "d_local": out.d_local.data}
    raise ValueError(f"unknown stage {stage!r}")


def _stage_params(model: FusionNet, stage: str):
    if stage == "global":
        branch = model.global_branch
    elif stage in ("local", "local_guided"):
        branch = model.local_branch
    else:
        return [(n, p) for n, p in model.named_params() if p.requires_grad]
    # Standalone-branch losses never touch the confidence head (it only
    # feeds the fusion), so it would reach the optimizer without gradients.
    return [(f"{stage}.{n}.{pn}", p) for n, layer in branch.named_layers()
            for pn, p in layer.params()
            if p.requires_grad and not (stage != "global" and n == "conf_head")]


def predict_depth(model: FusionNet, sample: SceneSample, stage: str = "end2end"):
    """Inference-mode depth map for one sample, clamped to be non-negative."""
    dtype = model.config.np_dtype()
    rgb_t = Tensor(sample.rgb[:, None].astype(dtype, copy=False))
    lidar_t = Tensor(sample.lidar[None, None].astype(dtype, copy=False))
    if stage == "local":
        d, _ = local_forward(model.local_branch, lidar_t, _zero_guidance(lidar_t))
        pred = d.data
    elif stage == "global":
        _, d, _ = global_forward(model.global_branch, rgb_t, lidar_t)
        pred = d.data
    else:
        pred = model(rgb_t, lidar_t).d_out.data
    return np.maximum(pred[0, 0], 0.0)


def _validate(model: FusionNet, samples: list[SceneSample], stage: str,
              batch_size: int):
    """Pooled RMSE/MAE in millimeters over all valid pixels of a split."""
    dtype = model.config.np_dtype()
    sq_sum = abs_sum = 0.0
    n = 0
    eval_stage = stage if stage in ("global", "local") else "end2end"
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        rgb, lidar, gt, mask = _batch_arrays(chunk, dtype)
        rgb_t, lidar_t = Tensor(rgb), Tensor(lidar)
        if eval_stage == "global":
            _, d, _ = global_forward(model.global_branch, rgb_t, lidar_t)
        elif eval_stage == "local":
            d, _ = local_forward(model.local_branch, lidar_t, _zero_guidance(lidar_t))
        else:
            d = model(rgb_t, lidar_t).d_out
        pred = np.maximum(d.data, 0.0)
        sel = mask > 0
        err = (pred[sel] - gt[sel]).astype(np.float64)
        sq_sum += float((err * err).sum())
        abs_sum += float(np.abs(err).sum())
        n += int(sel.sum())
    return 1000.0 * float(np.sqrt(sq_sum / n)), 1000.0 * abs_sum / n


def train_loop(model: FusionNet, corpus: dict, config: TrainConfig,
               stage: str = "end2end", out_dir=None, stage_label: str = None,
               batch_hook=None, log_lines: list = None) -> list[dict]:
    """Train one stage; returns per-epoch history records.

    ``corpus`` maps "train"/"val" to sample lists. Validation metrics are
    logged every epoch; the best-validation checkpoint is kept alongside
    the final one. A non-finite loss aborts with diagnostics.
    """
    train_set = corpus.get("train") or []
    if not train_set:
        raise ValueError("training corpus is empty")
    val_set = corpus.get("val") or train_set
    label = stage_label or stage

    params = _stage_params(model, stage)
    tensors = [p for _, p in params]
    state = adam_init(tensors)
    dtype = model.config.np_dtype()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_rmse = np.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng([config.seed, 0x5481, epoch])
        aug_rng = np.random.default_rng([config.seed, 0xA6A6, epoch])
        order = shuffle_rng.permutation(len(train_set))
        batch_losses = []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [augment(train_set[i], aug_rng, config.flip_prob, config.flip_axis)
                     for i in order[start:start + config.batch_size]]
            rgb, lidar, gt, mask = _batch_arrays(chunk, dtype)
            rgb_t, lidar_t = Tensor(rgb), Tensor(lidar)
            for p in tensors:
                p.zero_grad()
            with Tape() as tape:
                loss, maps = _forward_loss(model, stage, rgb_t, lidar_t, gt, mask,
                                           epoch, config)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                diag = {"stage": label, "epoch": epoch, "batch": bi,
                        "terms": {k: float(np.square(np.where(mask > 0, v - gt, 0)).sum()
                                           / max(mask.sum(), 1))
                                  for k, v in maps.items()}}
                raise NumericAbort(f"non-finite loss at {label} epoch {epoch} batch {bi}", diag)
            backward(loss, tape)
            adam_step(tensors, [p.grad for p in tensors], state, config.learning_rate,
                      config.beta1, config.beta2, config.adam_eps)
            batch_losses.append(loss_val)
            if batch_hook is not None:
                batch_hook(epoch, bi, loss_val, maps, gt, mask)

        val_rmse, val_mae = _validate(model, val_set, stage, config.batch_size)
        record = {"stage": label, "epoch": epoch,
                  "train_loss": float(np.mean(batch_losses)),
                  "val_rmse_mm": val_rmse, "val_mae_mm": val_mae,
                  "wall_time_s": time.perf_counter() - t0}
        history.append(record)
        if log_lines is not None:
            log_lines.append(record)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            if val_rmse < best_rmse:
                best_rmse = val_rmse
                save_checkpoint(model, out_dir / "best.ckpt")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.ckpt")

    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.ckpt")
        if not (out_dir / "best.ckpt").exists():
            save_checkpoint(model, out_dir / "best.ckpt")
    return history


def _set_branch_trainable(branch, trainable: bool) -> None:
    for _, layer in branch.named_layers():
        for _, p in layer.params():
            p.requires_grad = trainable


def staged_training(model: FusionNet, corpus: dict, config: TrainConfig,
                    out_dir=None) -> list[dict]:
    """Pretrain each branch individually, then fine-tune end to end.

    Stage 1 trains the global branch alone; stage 2 trains the local branch
    against guidance from the (frozen, inference-mode) global branch; stage
    3 trains everything under the composite loss. Each stage's epoch count
    comes from ``config.stage_epochs`` and restarts the focal ramp.
    """
    s1, s2, s3 = config.stage_epochs
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []

    cfg = dataclasses.replace(config, epochs=s1)
    history += train_loop(model, corpus, cfg, stage="global", out_dir=out_dir,
                          stage_label="stage1_global")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "stage1_global.ckpt")

    _set_branch_trainable(model.global_branch, False)
    try:
        cfg = dataclasses.replace(config, epochs=s2)
        history += train_loop(model, corpus, cfg, stage="local_guided", out_dir=out_dir,
                              stage_label="stage2_local")
    finally:
        _set_branch_trainable(model.global_branch, True)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "stage2_local.ckpt")

    cfg = dataclasses.replace(config, epochs=s3)
    history += train_loop(model, corpus, cfg, stage="end2end", out_dir=out_dir,
                          stage_label="stage3_end2end")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "stage3_end2end.ckpt")
    return history
