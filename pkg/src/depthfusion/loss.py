"""Training objective and evaluation metrics.

The per-map loss is a focal-weighted MSE over valid ground-truth pixels:

    (1/n) * sum_mask (1 + 0.05 * epoch * |y - y_hat|) * (y - y_hat)^2

At epoch 0 the weight collapses to 1 and the loss is exactly a masked MSE.
The composite objective is a weighted sum of that loss over the fused,
global and local depth maps. Metrics (RMSE/MAE) are reported in millimeters
over valid ground-truth pixels; depths are meters internally.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional

import numpy as np

from .tensor import (EmptyMask, ShapeMismatch, Tensor, absval, add, mul,
                     reduce_mean, square, sub)

FOCAL_RAMP = 0.05
M_TO_MM = 1000.0


@dataclasses.dataclass
class LossWeights:
    """Weights of the (global, local, fused) loss terms."""

    w1: float = 0.1   # global depth map
    w2: float = 0.1   # local depth map
    w3: float = 1.0   # fused output map


def validity_mask(target: np.ndarray, dtype=None) -> np.ndarray:
    """Binary mask of annotated pixels: 1 where the target has a depth value."""
    return (target > 0).astype(dtype or target.dtype)


def focal_mse(pred: Tensor, target, mask, epoch: int,
              detach_focal: bool = True) -> Tensor:
    """Focal-weighted masked MSE between predicted and target depth.

    The focal factor (1 + 0.05 * epoch * |err|) is treated as a constant
    weight by default; ``detach_focal=False`` lets gradients flow through
    the |err| inside the factor as well.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if target_t.shape != pred.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target_t.shape}")
    diff = sub(pred, target_t)
    sq = square(diff)
    if epoch == 0:
        return reduce_mean(sq, mask)
    if detach_focal:
        weight = Tensor(1.0 + (FOCAL_RAMP * epoch) * np.abs(diff.data))
        weighted = mul(sq, weight)
    else:
        weighted = mul(sq, add(1.0, mul(FOCAL_RAMP * epoch, absval(diff))))
    return reduce_mean(weighted, mask)


def composite_loss(out: Tensor, global_d: Tensor, local_d: Tensor, target,
                   mask, epoch: int, weights: LossWeights = None,
                   detach_focal: bool = True) -> Tensor:
    """Weighted sum of the focal-MSE over the fused, global and local maps."""
    w = weights or LossWeights()
    term_g = focal_mse(global_d, target, mask, epoch, detach_focal)
    term_l = focal_mse(local_d, target, mask, epoch, detach_focal)
    term_o = focal_mse(out, target, mask, epoch, detach_focal)
    return add(add(mul(term_g, w.w1), mul(term_l, w.w2)), mul(term_o, w.w3))


def _masked_errors(pred, target, mask) -> np.ndarray:
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != target.shape or mask.shape != pred.shape:
        raise ShapeMismatch(f"metric shapes differ: {pred.shape}, {target.shape}, {mask.shape}")
    sel = mask > 0
    if not sel.any():
        raise EmptyMask("no valid pixels to evaluate")
    return (pred[sel] - target[sel]).astype(np.float64)


def rmse(pred, target, mask) -> float:
    """Root-mean-squared depth error over valid pixels, in millimeters."""
    err = _masked_errors(pred, target, mask)
    return float(np.sqrt(np.mean(err * err)) * M_TO_MM)


def mae(pred, target, mask) -> float:
    """Mean absolute depth error over valid pixels, in millimeters."""
    err = _masked_errors(pred, target, mask)
    return float(np.mean(np.abs(err)) * M_TO_MM)


# --- evaluation report -----------------------------------------------------


@dataclasses.dataclass
class SampleMetrics:
    """Per-sample evaluation record.

    The artifact fields are present only for synthetic samples, where the
    dense true depth and the corrupted-pixel mask are known; they measure
    the error against the true depth restricted to corrupted LiDAR pixels.
    """

    sample_id: str
    rmse_mm: float
    mae_mm: float
    valid_pixel_count: int
    rmse_artifact_mm: Optional[float] = None
    mae_artifact_mm: Optional[float] = None
    artifact_pixel_count: Optional[int] = None


def evaluate_sample(sample_id: str, pred, gt, dense_truth=None,
                    artifact_mask=None) -> SampleMetrics:
    """Metrics of one prediction against its semi-sparse ground truth."""
    mask = validity_mask(gt.data if isinstance(gt, Tensor) else np.asarray(gt))
    rec = SampleMetrics(sample_id=sample_id, rmse_mm=rmse(pred, gt, mask),
                        mae_mm=mae(pred, gt, mask),
                        valid_pixel_count=int(mask.sum()))
    if dense_truth is not None and artifact_mask is not None and artifact_mask.any():
        am = artifact_mask.astype(np.float64)
        rec.rmse_artifact_mm = rmse(pred, dense_truth, am)
        rec.mae_artifact_mm = mae(pred, dense_truth, am)
        rec.artifact_pixel_count = int(artifact_mask.sum())
    return rec


def aggregate_metrics(samples: list[SampleMetrics]) -> dict:
    """Pooled metrics recomputable from the per-sample records alone."""
    if not samples:
        raise ValueError("no samples to aggregate")
    n = sum(s.valid_pixel_count for s in samples)
    sq_sum = sum((s.rmse_mm / M_TO_MM) ** 2 * s.valid_pixel_count for s in samples)
    abs_sum = sum((s.mae_mm / M_TO_MM) * s.valid_pixel_count for s in samples)
    agg = {
        "sample_count": len(samples),
        "valid_pixel_count": n,
        "rmse_mm": float(np.sqrt(sq_sum / n) * M_TO_MM),
        "mae_mm": float(abs_sum / n * M_TO_MM),
    }
    art = [s for s in samples if s.artifact_pixel_count]
    if art:
        an = sum(s.artifact_pixel_count for s in art)
        asq = sum((s.rmse_artifact_mm / M_TO_MM) ** 2 * s.artifact_pixel_count for s in art)
        aabs = sum((s.mae_artifact_mm / M_TO_MM) * s.artifact_pixel_count for s in art)
        agg["artifact_pixel_count"] = an
        agg["rmse_artifact_mm"] = float(np.sqrt(asq / an) * M_TO_MM)
        agg["mae_artifact_mm"] = float(aabs / an * M_TO_MM)
    return agg


def report_to_dict(samples: list[SampleMetrics]) -> dict:
    return {
        "samples": [dataclasses.asdict(s) for s in samples],
        "aggregate": aggregate_metrics(samples),
    }


def write_report(samples: list[SampleMetrics], json_path, text_path) -> dict:
    """Write the machine-readable and plain-text evaluation reports.

    Output bytes are a pure function of the records (no timestamps), so
    identical evaluations produce identical files.
    """
    report = report_to_dict(samples)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    agg = report["aggregate"]
    lines = [f"{'id':<12} {'rmse_mm':>10} {'mae_mm':>10} {'pixels':>8}"]
    for s in samples:
        lines.append(f"{s.sample_id:<12} {s.rmse_mm:>10.3f} {s.mae_mm:>10.3f} "
                     f"{s.valid_pixel_count:>8d}")
    lines.append("")
    lines.append(f"aggregate over {agg['sample_count']} samples "
                 f"({agg['valid_pixel_count']} pixels): "
                 f"RMSE {agg['rmse_mm']:.3f} mm, MAE {agg['mae_mm']:.3f} mm")
    if "rmse_artifact_mm" in agg:
        lines.append(f"artifact pixels ({agg['artifact_pixel_count']}): "
                     f"RMSE {agg['rmse_artifact_mm']:.3f} mm, "
                     f"MAE {agg['mae_artifact_mm']:.3f} mm")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return report
