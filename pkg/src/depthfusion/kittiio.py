"""Benchmark-compatible depth-map file I/O and visualization export.

Depth maps are 16-bit single-channel PNGs storing meters * 256, with 0
meaning "no measurement"; the codec round-trips bit-exactly for any map on
the 1/256 m grid. RGB frames are plain 8-bit PNGs. A sample on disk is a
set of ``<id>_*.png`` files plus a ``manifest.txt`` of ``<id> <split>``
lines; the dense true depth and artifact mask exist only for synthetic
samples and are optional on read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .simdata import SceneSample

DEPTH_SCALE = 256.0
MAX_DEPTH_M = 65535 / DEPTH_SCALE


class FormatError(ValueError):
    """File exists but is not in the expected format."""


class RangeError(ValueError):
    """Depth value outside the representable range of the 16-bit codec."""


class AlignmentError(ValueError):
    """Modalities of one sample disagree on resolution."""


class IoError(OSError):
    """Filesystem-level failure, annotated with the offending path."""


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _open_image(path) -> Image.Image:
    try:
        return Image.open(path)
    except FileNotFoundError as e:
        raise IoError(f"missing file: {path}") from e
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def read_depth_png(path) -> np.ndarray:
    """Decode a 16-bit depth PNG into meters (float32); 0 stays 0 (invalid)."""
    img = _open_image(path)
    if img.mode not in ("I", "I;16", "I;16B"):
        raise FormatError(f"{path}: expected 16-bit grayscale, got mode {img.mode!r}")
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected single channel, got shape {arr.shape}")
    return (arr.astype(np.float64) / DEPTH_SCALE).astype(np.float32)


def write_depth_png(depth_m: np.ndarray, path) -> None:
    """Encode meters as a 16-bit PNG; invalid (<= 0) pixels store 0."""
    depth_m = np.asarray(depth_m)
    if depth_m.ndim != 2:
        raise FormatError(f"depth map must be 2-D, got shape {depth_m.shape}")
    if not np.all(np.isfinite(depth_m)):
        raise RangeError("depth map contains non-finite values")
    if depth_m.max(initial=0.0) > MAX_DEPTH_M:
        raise RangeError(f"depth {depth_m.max():.3f} m exceeds the representable "
                         f"maximum {MAX_DEPTH_M:.3f} m")
    stored = np.round(np.clip(depth_m, 0.0, None).astype(np.float64) * DEPTH_SCALE)
    img = Image.fromarray(stored.astype(np.uint16))
    try:
        img.save(path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_rgb_png(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG into [3, H, W] floats in [0, 1]."""
    img = _open_image(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_rgb_png(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    data = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_mask_png(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode != "L":
        raise FormatError(f"{path}: expected 8-bit mask, got mode {img.mode!r}")
    return np.asarray(img) > 127


def write_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def write_sample(directory, sample_id: str, sample: SceneSample) -> None:
    d = ensure_dir(directory)
    write_rgb_png(sample.rgb, d / f"{sample_id}_rgb.png")
    write_depth_png(sample.lidar, d / f"{sample_id}_lidar.png")
    write_depth_png(sample.gt, d / f"{sample_id}_gt.png")
    if sample.dense_truth is not None:
        write_depth_png(sample.dense_truth, d / f"{sample_id}_dense.png")
    if sample.artifact_mask is not None:
        write_mask_png(sample.artifact_mask, d / f"{sample_id}_amask.png")


def read_sample(directory, sample_id: str, crop_h: int = None) -> SceneSample:
    """Load one sample; dense truth and artifact mask are optional on disk.

    ``crop_h`` keeps the bottom ``crop_h`` rows of every modality (the top
    of a driving frame carries no LiDAR). Resolution disagreements between
    modalities raise AlignmentError; nothing is ever resampled silently.
    """
    d = Path(directory)
    rgb = read_rgb_png(d / f"{sample_id}_rgb.png")
    lidar = read_depth_png(d / f"{sample_id}_lidar.png")
    gt = read_depth_png(d / f"{sample_id}_gt.png")
    dense = amask = None
    if (d / f"{sample_id}_dense.png").exists():
        dense = read_depth_png(d / f"{sample_id}_dense.png")
    if (d / f"{sample_id}_amask.png").exists():
        amask = read_mask_png(d / f"{sample_id}_amask.png")

    base = rgb.shape[1:]
    for name, arr in (("lidar", lidar), ("gt", gt), ("dense", dense), ("amask", amask)):
        if arr is not None and arr.shape != base:
            raise AlignmentError(f"{sample_id}: {name} is {arr.shape}, rgb is {base}")
    if crop_h is not None:
        if crop_h > base[0]:
            raise AlignmentError(f"{sample_id}: crop height {crop_h} exceeds image height {base[0]}")
        rgb = rgb[:, -crop_h:, :]
        lidar = lidar[-crop_h:, :]
        gt = gt[-crop_h:, :]
        dense = dense[-crop_h:, :] if dense is not None else None
        amask = amask[-crop_h:, :] if amask is not None else None
    return SceneSample(rgb=rgb, lidar=lidar, gt=gt, dense_truth=dense,
                       artifact_mask=amask, sample_id=sample_id)


def read_manifest(directory) -> list[tuple[str, str]]:
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise IoError(f"missing manifest: {path}")
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        entries.append((parts[0], parts[1]))
    return entries


# piecewise-linear blue-to-red palette; position, (r, g, b) in [0, 255]
_PALETTE_STOPS = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
_PALETTE_RGB = np.array([
    [0, 0, 131], [0, 60, 170], [5, 255, 255],
    [255, 255, 0], [250, 0, 0], [128, 0, 0],
], dtype=np.float64)


def export_visualization(depth_m: np.ndarray, path, vmin: float = None,
                         vmax: float = None) -> Path:
    """Write an 8-bit color-mapped PNG of a depth map; returns the written path.

    The scale is recorded in the filename (``..._vmin0.50_vmax20.00.png``)
    so images with identical color scales are directly comparable. Invalid
    (<= 0) pixels render black.
    """
    depth_m = np.asarray(depth_m, dtype=np.float64)
    valid = depth_m > 0
    if vmin is None:
        vmin = float(depth_m[valid].min()) if valid.any() else 0.0
    if vmax is None:
        vmax = float(depth_m[valid].max()) if valid.any() else 1.0
    if vmax <= vmin:
        vmax = vmin + 1.0
    t = np.clip((depth_m - vmin) / (vmax - vmin), 0.0, 1.0)
    channels = [np.interp(t, _PALETTE_STOPS, _PALETTE_RGB[:, c]) for c in range(3)]
    img = np.stack(channels, axis=-1)
    img[~valid] = 0.0
    path = Path(path)
    out = path.with_name(f"{path.stem}_vmin{vmin:.2f}_vmax{vmax:.2f}.png")
    try:
        Image.fromarray(np.round(img).astype(np.uint8), mode="RGB").save(out)
    except OSError as e:
        raise IoError(f"cannot write {out}: {e}") from e
    return out
