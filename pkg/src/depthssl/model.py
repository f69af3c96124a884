"""Encoder-decoder feature extractor, superpixel feature sampling (SPS)
and the two downstream heads.

Two profiles share one code path: the full profile is a bottleneck
residual stack ending at 2048 channels with output stride 32 (so a
224 x 224 input encodes to 2048 x 7 x 7 and decodes to a
decoder_channels x 224 x 224 feature map); the tiny profile is a small
basic-block stack with output stride 16 and affine-only normalization,
which keeps CPU runs fast and training bit-reproducible.

SPS crops the decoder output at a cluster's normalized bounding box and
bilinearly resizes it to sps_size x sps_size per channel: output cell
(i, j) samples the input at the center of the (i, j)-th of sps_size^2
equal sub-cells of the box, so a box exactly covering an aligned pixel
block reproduces those activations verbatim.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .depthio import DepthFrame
from .superpix import fill_invalid

CHECKPOINT_MAGIC = b"DSSLCKPT"
CHECKPOINT_VERSION = 1
DEPTH_CLAMP_M = 6.0  # meters; normalize_depth maps [0, 6] to [0, 1]

_STAGE_STRIDES = (1, 2, 2, 2)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    encoder_widths: tuple[int, ...] = (256, 512, 1024, 2048)
    encoder_depth_per_stage: tuple[int, ...] = (3, 4, 6, 3)
    decoder_channels: int = 32
    sps_size: int = 20
    num_seg_classes: int = 8
    num_activity_classes: int = 5
    block: str = "bottleneck"  # "basic" | "bottleneck"
    norm: str = "batch"  # "batch" | "affine"
    stem: str = "deep"  # "deep" (7x7 s2 + pool s2) | "light" (3x3 s2)

    def __post_init__(self):
        if len(self.encoder_widths) != 4 or len(self.encoder_depth_per_stage) != 4:
            raise ValueError("encoder profiles use exactly four stages")
        if self.decoder_channels < 1:
            raise ValueError("decoder_channels must be >= 1")
        if self.input_size % self.output_stride != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by output stride {self.output_stride}"
            )

    @property
    def output_stride(self) -> int:
        return (4 if self.stem == "deep" else 2) * 8

    @property
    def encoder_out_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def embedding_dim(self) -> int:
        return self.sps_size * self.sps_size * self.decoder_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["encoder_depth_per_stage"] = list(self.encoder_depth_per_stage)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["encoder_depth_per_stage"] = tuple(d["encoder_depth_per_stage"])
        return ModelConfig(**d)


def full_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        input_size=160,
        encoder_widths=(8, 16, 32, 64),
        encoder_depth_per_stage=(1, 1, 1, 1),
        decoder_channels=16,
        sps_size=20,
        block="basic",
        norm="affine",
        stem="light",
    )
    base.update(overrides)
    return ModelConfig(**base)


def config_for_profile(profile: str, **overrides) -> ModelConfig:
    if profile == "full":
        return full_config(**overrides)
    if profile == "tiny":
        return tiny_config(**overrides)
    raise ValueError(f"unknown profile {profile!r}")


class ChannelAffine(nn.Module):
    """Per-channel scale and bias; the statistics-free stand-in for batch
    norm on the deterministic tiny profile."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "affine":
        return ChannelAffine(channels)
    raise ValueError(f"unknown norm {kind!r}")


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.n1 = _norm(norm, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.n2 = _norm(norm, c_out)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _norm(norm, c_out))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return self.relu(out + self.skip(x))


class BottleneckBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, norm: str):
        super().__init__()
        mid = c_out // 4
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.n1 = _norm(norm, mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.n2 = _norm(norm, mid)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.n3 = _norm(norm, c_out)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _norm(norm, c_out))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.n1(self.conv1(x)))
        out = self.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        return self.relu(out + self.skip(x))


class Encoder(nn.Module):
    """Residual encoder mapping 1 x S x S depth input to
    C_enc x S/stride x S/stride features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.encoder_widths
        if config.stem == "deep":
            self.stem = nn.Sequential(
                nn.Conv2d(1, w[0], 7, stride=2, padding=3, bias=False),
                _norm(config.norm, w[0]),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(1, w[0], 3, stride=2, padding=1, bias=False),
                _norm(config.norm, w[0]),
                nn.ReLU(inplace=True),
            )
        block_cls = BasicBlock if config.block == "basic" else BottleneckBlock
        stages = []
        c_in = w[0]
        for stage, (width, depth) in enumerate(zip(w, config.encoder_depth_per_stage)):
            blocks = []
            for b in range(depth):
                stride = _STAGE_STRIDES[stage] if b == 0 else 1
                blocks.append(block_cls(c_in, width, stride, config.norm))
                c_in = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        expected = (1, self.config.input_size, self.config.input_size)
        if tuple(x.shape[-3:]) != expected:
            raise ValueError(f"encoder input shape {tuple(x.shape[-3:])} != {expected}")
        return self.stages(self.stem(x))


class Decoder(nn.Module):
    """One stride-2 transposed convolution, then bilinear upsampling to the
    input resolution."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.deconv = nn.ConvTranspose2d(
            config.encoder_out_channels, config.decoder_channels, 4, stride=2, padding=1
        )
        self.relu = nn.ReLU(inplace=True)

    def forward(self, enc):
        out = self.relu(self.deconv(enc))
        size = self.config.input_size
        return nn.functional.interpolate(out, size=(size, size), mode="bilinear", align_corners=False)


class PretextModel(nn.Module):
    """Encoder + decoder; its dense output feeds the SPS module."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def embed(self, x, frame_idx, bboxes):
        """Embeddings for clusters of a frame batch: (P, embedding_dim)."""
        return sps_sample_batch(self.forward(x), frame_idx, bboxes, self.config.sps_size)


class SegmentationModel(nn.Module):
    """Same encoder-decoder with a 1x1 classifier on the dense features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.classifier = nn.Conv2d(config.decoder_channels, config.num_seg_classes, 1)

    def forward(self, x):
        return self.classifier(self.decoder(self.encoder(x)))


class ClassificationModel(nn.Module):
    """Encoder + global average pooling + fully connected head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.fc = nn.Linear(config.encoder_out_channels, config.num_activity_classes)

    def forward(self, x):
        feats = self.encoder(x)
        return self.fc(feats.mean(dim=(2, 3)))


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: fan-in-scaled uniform for conv/linear weights,
    zeros for biases, identity for normalization layers."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if isinstance(module, nn.Linear):
                fan_in = module.in_features
            elif isinstance(module, nn.ConvTranspose2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            else:
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
        elif isinstance(module, ChannelAffine):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize; output cell centers sample the input at
    ((i+0.5)*H/out_h - 0.5, (j+0.5)*W/out_w - 0.5), so equal sizes are a
    bit-exact identity."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    v00 = image[np.ix_(y0, x0)]
    v01 = image[np.ix_(y0, x1)]
    v10 = image[np.ix_(y1, x0)]
    v11 = image[np.ix_(y1, x1)]
    return v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx


def nearest_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize (for label masks)."""
    image = np.asarray(image)
    h, w = image.shape
    ys = np.minimum((np.floor((np.arange(out_h) + 0.5) * h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum((np.floor((np.arange(out_w) + 0.5) * w / out_w)).astype(np.int64), w - 1)
    return image[np.ix_(ys, xs)]


def normalize_depth(frame: DepthFrame, input_size: int) -> np.ndarray:
    """Network input: nearest-fill invalid pixels, bilinear-resize to
    input_size^2, clamp to [0, 6] m and scale to [0, 1].  Returns a
    (1, input_size, input_size) float32 array."""
    filled = fill_invalid(frame)
    resized = bilinear_resize(filled, input_size, input_size)
    out = np.clip(resized, 0.0, DEPTH_CLAMP_M) / DEPTH_CLAMP_M
    return out[None, :, :].astype(np.float32)


def _check_bboxes(bboxes: torch.Tensor) -> None:
    if bboxes.ndim != 2 or bboxes.shape[1] != 4:
        raise ValueError("bboxes must be (P, 4) of (u0, v0, u1, v1)")
    u0, v0, u1, v1 = bboxes.unbind(dim=1)
    eps = 1e-9
    if ((u0 < -eps) | (v0 < -eps) | (u1 > 1 + eps) | (v1 > 1 + eps)).any():
        raise ValueError("bbox coordinates must lie in [0, 1]")
    if ((u1 - u0 <= eps) | (v1 - v0 <= eps)).any():
        raise ValueError("degenerate bbox (zero area)")


def sps_sample_batch(
    dense: torch.Tensor,
    frame_idx: torch.Tensor,
    bboxes: torch.Tensor,
    sps_size: int,
) -> torch.Tensor:
    """Crop-resize P boxes out of a (B, C, H, W) feature map batch.

    ``frame_idx[p]`` selects the batch element box p samples from.  Returns
    (P, C * sps_size^2) with (channel, row, col) flattening; differentiable
    w.r.t. ``dense``.
    """
    if dense.ndim != 4:
        raise ValueError("dense must be (B, C, H, W)")
    _check_bboxes(bboxes)
    b, c, h, w = dense.shape
    p = bboxes.shape[0]
    s = sps_size
    u0, v0, u1, v1 = bboxes.to(dense.dtype).unbind(dim=1)
    steps = (torch.arange(s, dtype=dense.dtype, device=dense.device) + 0.5) / s
    xs = (u0[:, None] + steps[None, :] * (u1 - u0)[:, None]) * w - 0.5
    ys = (v0[:, None] + steps[None, :] * (v1 - v0)[:, None]) * h - 0.5
    xs = xs.clamp(0, w - 1)
    ys = ys.clamp(0, h - 1)
    x0 = xs.floor().long()
    y0 = ys.floor().long()
    x1 = torch.minimum(x0 + 1, torch.full_like(x0, w - 1))
    y1 = torch.minimum(y0 + 1, torch.full_like(y0, h - 1))
    wx = (xs - x0.to(dense.dtype))[:, None, :, None]  # (P, 1, s, 1)
    wy = (ys - y0.to(dense.dtype))[:, :, None, None]  # (P, s, 1, 1)

    # gather only the needed samples: (B*H*W, C) table indexed per corner
    table = dense.permute(0, 2, 3, 1).reshape(b * h * w, c)
    base = (frame_idx.to(torch.long) * (h * w))[:, None, None]

    def take(yy, xx):
        idx = (base + yy[:, :, None] * w + xx[:, None, :]).reshape(-1)
        return table.index_select(0, idx).reshape(p, s, s, c)

    v00 = take(y0, x0)
    v01 = take(y0, x1)
    v10 = take(y1, x0)
    v11 = take(y1, x1)
    out = v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx
    return out.permute(0, 3, 1, 2).reshape(p, c * s * s)


def sps_sample(dense: torch.Tensor, bbox_norm, sps_size: int) -> torch.Tensor:
    """Single-map, single-box SPS crop; returns the flattened embedding."""
    if dense.ndim != 3:
        raise ValueError("dense must be (C, H, W)")
    bboxes = torch.as_tensor([list(bbox_norm)], dtype=dense.dtype, device=dense.device)
    idx = torch.zeros(1, dtype=torch.long, device=dense.device)
    return sps_sample_batch(dense[None], idx, bboxes, sps_size)[0]


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    config: ModelConfig,
    epoch: int,
    metric: float,
    metric_name: str,
) -> None:
    """Versioned binary checkpoint: magic, version, JSON header, then the
    float state tensors as raw float32 little-endian in declaration order.
    Integer buffers (e.g. batch-norm step counters) are not persisted."""
    path = Path(path)
    state = model.state_dict()
    arrays = [(k, v) for k, v in state.items() if v.is_floating_point()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_class": type(model).__name__,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "epoch": int(epoch),
        "metric": float(metric),
        "metric_name": metric_name,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, tensor in arrays:
            f.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())


class CheckpointError(Exception):
    pass


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, name -> float32 array)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        weights: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated array {spec['name']!r}")
            weights[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after arrays")
    return header, weights


def load_weights_into(model: nn.Module, weights: dict[str, np.ndarray], prefix: str = "") -> int:
    """Copy checkpoint arrays into matching model tensors; returns the
    number of tensors loaded."""
    state = model.state_dict()
    loaded = 0
    with torch.no_grad():
        for name, arr in weights.items():
            if prefix:
                if not name.startswith(prefix):
                    continue
                name = name[len(prefix) :]
            if name in state and state[name].is_floating_point():
                if tuple(state[name].shape) != arr.shape:
                    raise CheckpointError(f"shape mismatch for {name}: {state[name].shape} vs {arr.shape}")
                state[name].copy_(torch.from_numpy(arr).to(state[name].dtype))
                loaded += 1
    return loaded
