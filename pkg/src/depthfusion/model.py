"""The two-branch fusion network.

The global branch is a small encoder-decoder over the concatenated RGB and
sparse LiDAR channels; it emits a guidance map, a full-resolution depth
estimate and per-pixel confidence logits. The local branch is a stack of two
small hourglass modules over the LiDAR frame plus guidance; the second
module refines the first's prediction with an additive residual and the
branch emits its own confidence logits. The fusion head combines both depth
maps per pixel with softmax-normalized confidences:

    d_out = (e^X * d_global + e^Y * d_local) / (e^X + e^Y)

computed in the equivalent form d_local + wx * (d_global - d_local) so
identical branch predictions pass through bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import nn
from .tensor import ShapeMismatch, Tensor, add, mul, record_op, sub

CHECKPOINT_MAGIC = b"DFCP"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class ModelConfig:
    """Architecture hyperparameters; field names are addressable from config files."""

    global_widths: tuple = (16, 32, 64, 128)
    local_width_base: int = 32     # narrow hourglass channels (first/last layer)
    local_width_mid: int = 64      # wide hourglass channels (middle layers)
    guidance_skip: bool = False    # feed the guidance map into hourglass 2 as well
    depth_scale: float = 20.0      # meters per internal depth unit (conditions the inputs)
    seed: int = 0
    dtype: str = "float64"

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["global_widths"] = list(self.global_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "global_widths" in d:
            d["global_widths"] = tuple(int(w) for w in d["global_widths"])
        return cls(**d)


class GlobalBranch:
    """Encoder-decoder over [rgb || lidar] producing guidance, depth and
    confidence logits, all at input resolution.

    Four stride-2 encoder convolutions, a bottleneck convolution, and a
    mirrored transposed-convolution decoder with additive long skips. The
    first convolution carries no batch norm (the zero-encoded LiDAR channel
    would skew its statistics); every other stage is conv/BN/ReLU. Depth
    I/O is in meters; internally depths are divided by ``depth_scale`` so
    activations stay O(1).
    """

    def __init__(self, config: ModelConfig, seeds):
        w = config.global_widths
        dt = config.np_dtype()
        self.depth_scale = config.depth_scale
        s = iter(seeds)
        self.enc0 = nn.Conv2d(4, w[0], stride=2, padding=1, relu=True, dtype=dt, seed=next(s))
        self.enc = []
        self.enc_bn = []
        for i in range(1, len(w)):
            self.enc.append(nn.Conv2d(w[i - 1], w[i], stride=2, padding=1, dtype=dt, seed=next(s)))
            self.enc_bn.append(nn.BatchNorm(w[i], relu=True, dtype=dt))
        self.mid = nn.Conv2d(w[-1], w[-1], stride=1, padding=1, dtype=dt, seed=next(s))
        self.mid_bn = nn.BatchNorm(w[-1], relu=True, dtype=dt)
        self.dec = []
        self.dec_bn = []
        for i in range(len(w) - 1, 0, -1):
            self.dec.append(nn.TransConv2d(w[i], w[i - 1], dtype=dt, seed=next(s)))
            self.dec_bn.append(nn.BatchNorm(w[i - 1], relu=True, dtype=dt))
        self.dec0 = nn.TransConv2d(w[0], w[0], dtype=dt, seed=next(s))
        self.dec0_bn = nn.BatchNorm(w[0], relu=True, dtype=dt)
        self.head = nn.Conv2d(w[0], 3, kh=1, kw=1, stride=1, padding=0, dtype=dt, seed=next(s))
        # depth channel starts at the prior depth (1 internal unit) rather
        # than at zero, which saves many early epochs of bias learning
        self.head.bias.data[1] = 1.0

    def named_layers(self):
        yield "enc0", self.enc0
        for i, (c, b) in enumerate(zip(self.enc, self.enc_bn), start=1):
            yield f"enc{i}", c
            yield f"enc{i}_bn", b
        yield "mid", self.mid
        yield "mid_bn", self.mid_bn
        for i, (c, b) in enumerate(zip(self.dec, self.dec_bn)):
            yield f"dec{len(self.enc) - i}", c
            yield f"dec{len(self.enc) - i}_bn", b
        yield "dec0", self.dec0
        yield "dec0_bn", self.dec0_bn
        yield "head", self.head

    def __call__(self, rgb: Tensor, lidar: Tensor, training: bool = False):
        return global_forward(self, rgb, lidar, training)


def global_forward(branch: GlobalBranch, rgb: Tensor, lidar: Tensor,
                   training: bool = False):
    """Run the global branch; returns (guidance, d_global, conf_global)."""
    if rgb.shape[1:] != lidar.shape[1:]:
        raise ShapeMismatch(f"rgb {rgb.shape} and lidar {lidar.shape} are not aligned")
    levels = len(branch.enc) + 1
    h, w = rgb.shape[2], rgb.shape[3]
    if h % (1 << levels) or w % (1 << levels):
        raise ShapeMismatch(f"input {h}x{w} must be divisible by {1 << levels}")

    x = nn.concat_channels([rgb, mul(lidar, 1.0 / branch.depth_scale)])
    skips = []
    x = branch.enc0(x)
    skips.append(x)
    for conv, bn in zip(branch.enc, branch.enc_bn):
        x = bn(conv(x), training)
        skips.append(x)
    x = branch.mid_bn(branch.mid(x), training)
    for i, (tconv, bn) in enumerate(zip(branch.dec, branch.dec_bn)):
        x = bn(tconv(x), training)
        x = add(x, skips[len(skips) - 2 - i])
    x = branch.dec0_bn(branch.dec0(x), training)
    out = branch.head(x)
    guidance = nn.slice_channels(out, 0, 1)
    d_global = mul(nn.slice_channels(out, 1, 2), branch.depth_scale)
    conf_global = nn.slice_channels(out, 2, 3)
    return guidance, d_global, conf_global


class HourglassModule:
    """One six-layer hourglass (two stride-2 descents, two stride-2 ascents)
    plus a single-channel depth head.

    The decoder sees concatenated encoder features at matching resolution;
    batch norm exists only on the transposed convolutions, mirroring the
    layer table. Returns (features, depth).
    """

    def __init__(self, in_ch: int, w0: int, w1: int, dtype, seeds):
        s = iter(seeds)
        self.conv1 = nn.Conv2d(in_ch, w0, stride=2, padding=1, relu=True, dtype=dtype, seed=next(s))
        self.conv2 = nn.Conv2d(w0, w1, stride=1, padding=1, relu=True, dtype=dtype, seed=next(s))
        self.conv3 = nn.Conv2d(w1, w1, stride=2, padding=1, relu=True, dtype=dtype, seed=next(s))
        self.conv4 = nn.Conv2d(w1, w1, stride=1, padding=1, relu=True, dtype=dtype, seed=next(s))
        self.tconv1 = nn.TransConv2d(2 * w1, w1, dtype=dtype, seed=next(s))
        self.tconv1_bn = nn.BatchNorm(w1, relu=True, dtype=dtype)
        self.tconv2 = nn.TransConv2d(2 * w1, w0, dtype=dtype, seed=next(s))
        self.tconv2_bn = nn.BatchNorm(w0, relu=True, dtype=dtype)
        self.depth_head = nn.Conv2d(w0, 1, kh=1, kw=1, stride=1, padding=0, dtype=dtype, seed=next(s))

    def named_layers(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        yield "conv3", self.conv3
        yield "conv4", self.conv4
        yield "tconv1", self.tconv1
        yield "tconv1_bn", self.tconv1_bn
        yield "tconv2", self.tconv2
        yield "tconv2_bn", self.tconv2_bn
        yield "depth_head", self.depth_head

    def __call__(self, x: Tensor, training: bool = False):
        c1 = self.conv1(x)
        c2 = self.conv2(c1)
        c3 = self.conv3(c2)
        c4 = self.conv4(c3)
        u1 = self.tconv1_bn(self.tconv1(nn.concat_channels([c4, c3])), training)
        u2 = self.tconv2_bn(self.tconv2(nn.concat_channels([u1, c2])), training)
        return u2, self.depth_head(u2)


class LocalBranch:
    """Two stacked hourglass modules over [lidar || guidance].

    The second module consumes the first's features together with its depth
    prediction and the raw LiDAR frame (plus the guidance map when
    ``guidance_skip`` is set) and learns an additive residual on that
    prediction. A confidence head on the final features emits logits Y.
    """

    def __init__(self, config: ModelConfig, seeds):
        w0, w1 = config.local_width_base, config.local_width_mid
        dt = config.np_dtype()
        self.guidance_skip = config.guidance_skip
        self.depth_scale = config.depth_scale
        seeds = list(seeds)
        self.hg1 = HourglassModule(2, w0, w1, dt, seeds[:7])
        hg2_in = w0 + 2 + (1 if config.guidance_skip else 0)
        self.hg2 = HourglassModule(hg2_in, w0, w1, dt, seeds[7:14])
        self.conf_head = nn.Conv2d(w0, 1, kh=1, kw=1, stride=1, padding=0, dtype=dt, seed=seeds[14])
        # hourglass 1 predicts around the prior depth; hourglass 2 starts
        # as a pure zero residual on top of it
        self.hg1.depth_head.bias.data[:] = 1.0

    def named_layers(self):
        for name, layer in self.hg1.named_layers():
            yield f"hg1.{name}", layer
        for name, layer in self.hg2.named_layers():
            yield f"hg2.{name}", layer
        yield "conf_head", self.conf_head

    def __call__(self, lidar: Tensor, guidance: Tensor, training: bool = False):
        return local_forward(self, lidar, guidance, training)


def local_forward(branch: LocalBranch, lidar: Tensor, guidance: Tensor,
                  training: bool = False):
    """Run the local branch; returns (d_local, conf_local)."""
    if lidar.shape != guidance.shape:
        raise ShapeMismatch(f"lidar {lidar.shape} and guidance {guidance.shape} are not aligned")
    lidar_u = mul(lidar, 1.0 / branch.depth_scale)
    feats1, d1 = branch.hg1(nn.concat_channels([lidar_u, guidance]), training)
    hg2_in = [feats1, d1, lidar_u]
    if branch.guidance_skip:
        hg2_in.append(guidance)
    feats2, residual = branch.hg2(nn.concat_channels(hg2_in), training)
    d_local = mul(add(d1, residual), branch.depth_scale)
    conf_local = branch.conf_head(feats2)
    return d_local, conf_local


def _clamp_interval(out: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Clip a convex blend into [min(a,b), max(a,b)].

    The blend below is exact in real arithmetic but float rounding can land
    an ulp outside the interval when one confidence saturates; the clip is
    inactive everywhere else, so gradients pass straight through.
    """
    out_data = np.clip(out.data, np.minimum(a.data, b.data),
                       np.maximum(a.data, b.data))

    def backward(g, needs):
        return (g.copy() if needs[0] else None), None, None

    return record_op("clamp_interval", (out, a, b), out_data, backward)


def fuse(d_global: Tensor, d_local: Tensor, conf_global: Tensor,
         conf_local: Tensor) -> Tensor:
    """Confidence-weighted per-pixel average of the two depth maps.

    Written as d_local + wx * (d_global - d_local) so equal branch
    predictions pass through bit-exactly; interval-clamped so the convex
    combination never escapes [min, max] even at float rounding edges.
    """
    for t in (d_local, conf_global, conf_local):
        if t.shape != d_global.shape:
            raise ShapeMismatch("fuse: all four maps must share one shape")
    wx, _ = nn.softmax_pair(conf_global, conf_local)
    blend = add(d_local, mul(wx, sub(d_global, d_local)))
    return _clamp_interval(blend, d_global, d_local)


@dataclasses.dataclass
class FusionNetOutput:
    """Every intermediate map needed by the multi-term loss; maps are [1,N,H,W]."""

    d_global: Tensor
    d_local: Tensor
    conf_global: Tensor
    conf_local: Tensor
    guidance: Tensor
    d_out: Tensor


class FusionNet:
    """Global branch + local branch + confidence fusion head."""

    def __init__(self, config: ModelConfig = None):
        self.config = config or ModelConfig()
        ss = np.random.SeedSequence(self.config.seed)
        children = ss.spawn(64)
        self.global_branch = GlobalBranch(self.config, children[:16])
        self.local_branch = LocalBranch(self.config, children[16:32])

    def named_layers(self):
        for name, layer in self.global_branch.named_layers():
            yield f"global.{name}", layer
        for name, layer in self.local_branch.named_layers():
            yield f"local.{name}", layer

    def named_params(self):
        for lname, layer in self.named_layers():
            for pname, p in layer.params():
                yield f"{lname}.{pname}", p

    def named_buffers(self):
        for lname, layer in self.named_layers():
            if isinstance(layer, nn.BatchNorm):
                for bname, b in layer.buffers():
                    yield f"{lname}.{bname}", b

    def parameters(self):
        return [p for _, p in self.named_params()]

    def __call__(self, rgb: Tensor, lidar: Tensor, training: bool = False) -> FusionNetOutput:
        return fusionnet_forward(self, rgb, lidar, training)


def fusionnet_forward(model: FusionNet, rgb: Tensor, lidar: Tensor,
                      training: bool = False) -> FusionNetOutput:
    """Full forward pass retaining every map the composite loss needs."""
    guidance, d_global, conf_global = global_forward(model.global_branch, rgb, lidar, training)
    d_local, conf_local = local_forward(model.local_branch, lidar, guidance, training)
    d_out = fuse(d_global, d_local, conf_global, conf_local)
    return FusionNetOutput(d_global=d_global, d_local=d_local,
                           conf_global=conf_global, conf_local=conf_local,
                           guidance=guidance, d_out=d_out)


def count_params(model_or_params) -> int:
    """Number of learnable scalars (weights, biases, BN affine terms)."""
    if hasattr(model_or_params, "named_params"):
        return sum(p.size for _, p in model_or_params.named_params())
    return sum(p.size for p in model_or_params)


def count_branch_params(branch) -> int:
    return sum(p.size for _, layer in branch.named_layers() for _, p in layer.params())


# --- checkpoint container -------------------------------------------------
#
# Layout (little-endian throughout):
#   bytes 0:4    magic "DFCP"
#   bytes 4:8    format version (u32)
#   bytes 8:16   header length in bytes (u64)
#   header       UTF-8 JSON: {"config": {...}, "tensors": [
#                  {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   data         raw tensor values at header-relative offsets, C order
#
# "tensors" covers parameters and batch-norm running statistics (the latter
# carry names ending in running_mean / running_var).


def save_checkpoint(model: FusionNet, path) -> None:
    entries = []
    blobs = []
    offset = 0
    items = list(model.named_params()) + list(model.named_buffers())
    for name, t in items:
        arr = t.data if isinstance(t, Tensor) else t
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> FusionNet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header_len = struct.unpack("<Q", f.read(8))[0]
        header = json.loads(f.read(header_len).decode("utf-8"))
        data = f.read()

    model = FusionNet(ModelConfig.from_dict(header["config"]))
    targets = dict(model.named_params())
    targets.update(model.named_buffers())
    seen = set()
    for e in header["tensors"]:
        name = e["name"]
        if name not in targets:
            raise ValueError(f"{path}: unknown tensor {name!r} in checkpoint")
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        dst = targets[name]
        dst_arr = dst.data if isinstance(dst, Tensor) else dst
        if tuple(arr.shape) != dst_arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{arr.shape} vs {dst_arr.shape}")
        dst_arr[...] = arr
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    return model
