"""Synthetic scene generator for desk-scale training and evaluation.

Scenes are analytic primitives (ground plane, back wall, boxes, spheres)
ray-cast through a pinhole camera, so true depth is exact and object
boundaries in the RGB rendering coincide with depth discontinuities. From
the dense true depth we derive a sparse LiDAR frame (scanline sampling with
jitter and dropout), corrupted LiDAR blobs standing in for moving-object
ghosting, and a semi-sparse ground truth that is never corrupted.

All depths are snapped to the 1/256 m grid and RGB to the 8-bit grid at
generation time, so samples survive the on-disk PNG round trip bit-exactly
and artifact offsets stay exact in float arithmetic.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

DEPTH_GRID = 256.0
DEPTH_MIN = 0.5
DEPTH_MAX = 85.0


class InvalidScene(ValueError):
    """Scene specification puts geometry behind or inside the camera."""


def snap_depth(d: np.ndarray) -> np.ndarray:
    """Quantize depths (meters) to the 1/256 m grid used by the PNG codec."""
    return (np.round(np.asarray(d, dtype=np.float64) * DEPTH_GRID) / DEPTH_GRID).astype(np.float32)


def snap_rgb(rgb: np.ndarray) -> np.ndarray:
    """Quantize [0,1] colors to the 8-bit grid used on disk."""
    return (np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / np.float32(255.0)).astype(np.float32)


@dataclasses.dataclass
class CameraSpec:
    focal_px: float = 96.0
    cx: float = -1.0          # -1: image center
    cy: float = -1.0
    height_m: float = 1.5     # camera height above the ground plane
    pitch_deg: float = 6.0    # downward pitch


@dataclasses.dataclass
class ScanlineConfig:
    line_count: int = 10
    jitter_px: float = 0.8    # vertical scatter of each projected scan row
    dropout: float = 0.68     # probability a sampled pixel is discarded


@dataclasses.dataclass
class ArtifactConfig:
    count_min: int = 1
    count_max: int = 3
    magnitude_min_m: float = 1.0
    magnitude_max_m: float = 5.0
    blob_px_min: float = 5.0
    blob_px_max: float = 20.0


@dataclasses.dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclasses.dataclass
class Box:
    center: tuple
    half_size: tuple
    albedo: tuple


@dataclasses.dataclass
class SceneSpec:
    """Full description of one synthetic sample.

    ``primitives`` may be given explicitly (tests do this); when None a
    randomized layout of boxes and spheres resting on the ground plane is
    drawn deterministically from ``seed``.
    """

    seed: int = 0
    h: int = 64
    w: int = 192
    camera: CameraSpec = dataclasses.field(default_factory=CameraSpec)
    scanlines: ScanlineConfig = dataclasses.field(default_factory=ScanlineConfig)
    artifacts: ArtifactConfig = dataclasses.field(default_factory=ArtifactConfig)
    gt_fill_target: float = 0.30
    ground_extent_m: float = 60.0   # distance of the back wall closing the scene
    object_count_min: int = 4
    object_count_max: int = 9
    primitives: Optional[list] = None


@dataclasses.dataclass
class SceneSample:
    """One aligned training sample; 2-D rasters are [H, W], RGB is [3, H, W].

    Real benchmark frames carry no dense truth or artifact mask, so those
    fields are optional.
    """

    rgb: np.ndarray
    lidar: np.ndarray
    gt: np.ndarray
    dense_truth: Optional[np.ndarray] = None
    artifact_mask: Optional[np.ndarray] = None
    sample_id: str = ""


_LIGHT_DIR = np.array([0.25, -0.9, 0.35])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.35


def _random_primitives(spec: SceneSpec, rng: np.random.Generator) -> list:
    n = int(rng.integers(spec.object_count_min, spec.object_count_max + 1))
    prims = []
    ground_y = spec.camera.height_m
    for _ in range(n):
        z = rng.uniform(5.0, 0.7 * spec.ground_extent_m)
        # keep the object inside the horizontal view frustum at its depth
        half_view = 0.85 * z * (spec.w / 2) / spec.camera.focal_px
        x = rng.uniform(-half_view, half_view)
        albedo = tuple(rng.uniform(0.15, 0.95, size=3))
        if rng.random() < 0.5:
            r = rng.uniform(0.4, 2.2)
            prims.append(Sphere(center=(x, ground_y - r, z), radius=r, albedo=albedo))
        else:
            hs = rng.uniform(0.3, 2.0, size=3)
            prims.append(Box(center=(x, ground_y - hs[1], z), half_size=tuple(hs),
                             albedo=albedo))
    return prims


def _ray_grid(spec: SceneSpec) -> np.ndarray:
    cam = spec.camera
    cx = cam.cx if cam.cx >= 0 else spec.w / 2.0
    cy = cam.cy if cam.cy >= 0 else spec.h / 2.0
    u = (np.arange(spec.w) + 0.5 - cx) / cam.focal_px
    v = (np.arange(spec.h) + 0.5 - cy) / cam.focal_px
    du, dv = np.meshgrid(u, v)
    dirs = np.stack([du, dv, np.ones_like(du)], axis=-1)
    # pitch the camera down: rotate rays about the x axis
    th = np.deg2rad(cam.pitch_deg)
    rot = np.array([[1, 0, 0],
                    [0, np.cos(th), -np.sin(th)],
                    [0, np.sin(th), np.cos(th)]])
    return dirs @ rot.T


def _intersect_plane(dirs, point, normal):
    dn = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.dot(point, normal) / dn
    t = np.where((dn != 0) & (t > 1e-6), t, np.inf)
    n = np.broadcast_to(normal, dirs.shape)
    return t, n


def _intersect_sphere(dirs, center, radius):
    c = np.asarray(center, dtype=np.float64)
    dd = np.einsum("hwc,hwc->hw", dirs, dirs)
    dc = dirs @ c
    disc = dc * dc - dd * (np.dot(c, c) - radius * radius)
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = (dc - sq) / dd
    t = np.where((disc > 0) & (t > 1e-6), t, np.inf)
    hit = t[..., None] * dirs
    n = hit - c
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 0, n / norm, 0.0)
    return t, n


def _intersect_box(dirs, center, half_size):
    c = np.asarray(center, dtype=np.float64)
    hs = np.asarray(half_size, dtype=np.float64)
    lo, hi = c - hs, c + hs
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / dirs
        t2 = hi / dirs
    tmin_ax = np.minimum(t1, t2)
    tmax_ax = np.maximum(t1, t2)
    tnear = tmin_ax.max(axis=-1)
    tfar = tmax_ax.min(axis=-1)
    hit = (tnear <= tfar) & (tnear > 1e-6)
    t = np.where(hit, tnear, np.inf)
    axis = np.argmax(tmin_ax, axis=-1)
    n = np.zeros_like(dirs)
    idx = np.indices(axis.shape)
    n[idx[0], idx[1], axis] = -np.sign(np.take_along_axis(dirs, axis[..., None], -1))[..., 0]
    return t, n


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the scene; returns (rgb [3,H,W] in [0,1], dense depth [H,W] m).

    The camera sits at the origin looking along +z (y down); the ground
    plane and a far back wall guarantee every ray hits something, so the
    dense depth has no holes. RGB is a Lambert-shaded albedo render with a
    checkered ground, which makes object boundaries visible exactly where
    depth discontinuities occur.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0FFEE]))
    prims = spec.primitives if spec.primitives is not None else _random_primitives(spec, rng)
    ground_y = spec.camera.height_m
    for p in prims:
        if isinstance(p, (Sphere, Box)):
            extent = p.radius if isinstance(p, Sphere) else max(p.half_size)
            if p.center[2] - extent <= DEPTH_MIN:
                raise InvalidScene(f"primitive at z={p.center[2]} is behind or too close "
                                   "to the camera")

    dirs = _ray_grid(spec)
    t_all, n_all, albedo_maps = [], [], []

    # ground plane (checkered albedo) and back wall close the scene
    t, n = _intersect_plane(dirs, np.array([0.0, ground_y, 0.0]), np.array([0.0, -1.0, 0.0]))
    with np.errstate(invalid="ignore"):      # rays above the horizon: t = inf
        hitp = np.nan_to_num(t[..., None] * dirs, posinf=0.0)
    checker = ((np.floor(hitp[..., 0] / 2.0) + np.floor(hitp[..., 2] / 2.0)) % 2).astype(bool)
    ground_albedo = np.where(checker[..., None], [0.45, 0.45, 0.48], [0.30, 0.32, 0.30])
    t_all.append(t); n_all.append(n); albedo_maps.append(ground_albedo)

    t, n = _intersect_plane(dirs, np.array([0.0, 0.0, spec.ground_extent_m]),
                            np.array([0.0, 0.0, -1.0]))
    t_all.append(t); n_all.append(n)
    albedo_maps.append(np.broadcast_to([0.55, 0.62, 0.70], dirs.shape))

    for p in prims:
        if isinstance(p, Sphere):
            t, n = _intersect_sphere(dirs, p.center, p.radius)
        elif isinstance(p, Box):
            t, n = _intersect_box(dirs, p.center, p.half_size)
        else:
            raise InvalidScene(f"unknown primitive {type(p).__name__}")
        t_all.append(t); n_all.append(n)
        albedo_maps.append(np.broadcast_to(np.asarray(p.albedo, dtype=np.float64), dirs.shape))

    t_stack = np.stack(t_all)
    winner = np.argmin(t_stack, axis=0)
    t_hit = np.take_along_axis(t_stack, winner[None], 0)[0]
    if not np.all(np.isfinite(t_hit)):
        raise InvalidScene("a ray escaped the scene; ground/back wall must close it")

    n_stack = np.stack(n_all)
    a_stack = np.stack(albedo_maps)
    idx = np.indices(winner.shape)
    n_hit = n_stack[winner, idx[0], idx[1]]
    albedo = a_stack[winner, idx[0], idx[1]]

    shade = _AMBIENT + (1.0 - _AMBIENT) * np.clip(n_hit @ _LIGHT_DIR, 0.0, None)
    rgb = snap_rgb(np.moveaxis(albedo * shade[..., None], -1, 0))

    # rays are parameterized so t is exactly the planar (z) depth
    dense = snap_depth(t_hit)
    if dense.min() <= DEPTH_MIN or dense.max() >= DEPTH_MAX:
        raise InvalidScene(f"depth range [{dense.min():.2f}, {dense.max():.2f}] escapes "
                           f"({DEPTH_MIN}, {DEPTH_MAX})")
    return rgb, dense


def sample_lidar(dense_truth: np.ndarray, scan: ScanlineConfig, seed) -> np.ndarray:
    """Project scanline samples of the true depth; unsampled pixels are 0.0.

    Rows are spread evenly over the image with per-column jitter and random
    dropout; with enough lines, no jitter and no dropout this degenerates
    to the full dense map.
    """
    if scan.line_count < 1:
        raise ValueError("line_count must be >= 1")
    h, w = dense_truth.shape
    rng = np.random.default_rng(np.random.SeedSequence([_to_int(seed), 0x11DA2]))
    rows = np.linspace(0, h - 1, scan.line_count)
    lidar = np.zeros_like(dense_truth)
    for r in rows:
        jitter = rng.normal(0.0, scan.jitter_px, size=w) if scan.jitter_px > 0 else np.zeros(w)
        rr = np.clip(np.round(r + jitter).astype(int), 0, h - 1)
        keep = rng.random(w) >= scan.dropout
        cols = np.nonzero(keep)[0]
        lidar[rr[cols], cols] = dense_truth[rr[cols], cols]
    return lidar


def inject_artifacts(lidar: np.ndarray, dense_truth: np.ndarray,
                     cfg: ArtifactConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt blob-shaped groups of sampled LiDAR pixels by a depth offset.

    Offsets are snapped to the depth grid so corrupted values differ from
    the truth by exactly the drawn magnitude. The mask marks exactly the
    altered pixels; a pixel is never corrupted twice.
    """
    h, w = lidar.shape
    rng = np.random.default_rng(np.random.SeedSequence([_to_int(seed), 0xA27F]))
    out = lidar.copy()
    mask = np.zeros((h, w), dtype=bool)
    sampled = lidar > 0
    if not sampled.any():
        return out, mask
    ys, xs = np.nonzero(sampled)
    n_blobs = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        mag = float(rng.uniform(cfg.magnitude_min_m, cfg.magnitude_max_m))
        mag = round(mag * DEPTH_GRID) / DEPTH_GRID
        if mag == 0.0:
            continue
        k = rng.integers(len(ys))
        cy_, cx_ = ys[k], xs[k]
        radius = rng.uniform(cfg.blob_px_min, cfg.blob_px_max) / 2.0
        blob = ((yy - cy_) ** 2 + (xx - cx_) ** 2 <= radius * radius) & sampled & ~mask
        if not blob.any():
            continue
        vals = out[blob]
        if (vals - mag).min() <= DEPTH_MIN:
            sign = 1.0
        elif (vals + mag).max() >= DEPTH_MAX:
            sign = -1.0
        else:
            sign = 1.0 if rng.random() < 0.5 else -1.0
        out[blob] = vals + np.float32(sign * mag)
        mask |= blob
    return out, mask


def make_gt(dense_truth: np.ndarray, fill_target: float, seed) -> np.ndarray:
    """Semi-sparse ground truth: a random subset of the true depth.

    Selection probability grows toward the lower image rows (where the
    accumulated annotations of a driving dataset are densest); pixels are
    either exactly the true depth or exactly zero, so corrupted LiDAR can
    never leak in.
    """
    if not 0.0 < fill_target <= 1.0:
        raise ValueError(f"fill target must be in (0, 1], got {fill_target}")
    if fill_target >= 1.0:
        return dense_truth.copy()
    h, w = dense_truth.shape
    rng = np.random.default_rng(np.random.SeedSequence([_to_int(seed), 0x67A11]))
    row_weight = 1.0 + 0.5 * (np.arange(h) / max(h - 1, 1))
    prob = fill_target * row_weight / row_weight.mean()
    keep = rng.random((h, w)) < prob[:, None]
    return np.where(keep, dense_truth, np.float32(0.0))


def _to_int(seed) -> int:
    return int(seed) & 0xFFFFFFFF


def generate_scene_sample(spec: SceneSpec) -> SceneSample:
    """Render one scene and derive all aligned rasters from it."""
    rgb, dense = render_scene(spec)
    lidar = sample_lidar(dense, spec.scanlines, spec.seed)
    lidar, artifact_mask = inject_artifacts(lidar, dense, spec.artifacts, spec.seed)
    gt = make_gt(dense, spec.gt_fill_target, spec.seed)
    return SceneSample(rgb=rgb, lidar=lidar, gt=gt, dense_truth=dense,
                       artifact_mask=artifact_mask)


def generate_corpus(count: int, base_spec: SceneSpec, seed: int, out_dir,
                    train_fraction: float = 0.8) -> dict:
    """Write ``count`` randomized samples plus a manifest; returns statistics.

    Layout: ``<id>_rgb.png``, ``<id>_lidar.png``, ``<id>_gt.png``,
    ``<id>_dense.png``, ``<id>_amask.png`` and ``manifest.txt`` with one
    ``<id> <split>`` line per sample. Deterministic per (base_spec, seed).
    """
    from . import kittiio  # local import: kittiio depends on SceneSample

    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = kittiio.ensure_dir(out_dir)
    n_train = int(round(count * train_fraction))
    lidar_fill = []
    artifact_px = []
    gt_fill = []
    lines = []
    for i in range(count):
        spec = dataclasses.replace(base_spec, seed=(seed * 1_000_003 + i) & 0x7FFFFFFF,
                                   primitives=None)
        sample = generate_scene_sample(spec)
        sample.sample_id = f"{i:05d}"
        kittiio.write_sample(out_dir, sample.sample_id, sample)
        split = "train" if i < n_train else "val"
        lines.append(f"{sample.sample_id} {split}")
        lidar_fill.append(float((sample.lidar > 0).mean()))
        artifact_px.append(int(sample.artifact_mask.sum()))
        gt_fill.append(float((sample.gt > 0).mean()))
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {
        "manifest": str(manifest),
        "count": count,
        "train_count": n_train,
        "val_count": count - n_train,
        "lidar_fill_mean": float(np.mean(lidar_fill)),
        "gt_fill_mean": float(np.mean(gt_fill)),
        "artifact_pixels_mean": float(np.mean(artifact_px)),
    }
