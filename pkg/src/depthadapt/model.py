"""Depth regression network and the reverse-Huber supervised loss.

The encoder is a small residual net: a stride-1 stem then four stride-2
stages, so the deepest feature map ("latent") sits at 1/16 resolution
(8x10x128 for a 128x160 input).  The penultimate stage output
("trunk feature", 16x20x64) is what the feature-reconstruction regularizer
targets.  The decoder upsamples the latent back to half input resolution
and maps it to metric depth through a clamped exponential.

Parameter partition: the last `adapt_depth` encoder stages form the
adaptable head, everything earlier is the frozen trunk, and the decoder is
always frozen during adaptation.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EvalError, ShapeError

DEPTH_MIN = 0.1
DEPTH_MAX = 100.0
_LOG_DEPTH_MIN = math.log(DEPTH_MIN)
_LOG_DEPTH_MAX = math.log(DEPTH_MAX)


@dataclass(frozen=True)
class ArchConfig:
    image_size: tuple[int, int] = (128, 160)
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_strides: tuple[int, ...] = (2, 2, 2, 2)
    blocks_per_stage: int = 1
    decoder_channels: tuple[int, ...] = (64, 32, 16)

    @property
    def n_stages(self):
        return len(self.stage_channels)

    @property
    def total_stride(self):
        s = 1
        for k in self.stage_strides:
            s *= k
        return s

    def validate(self):
        if len(self.stage_strides) != self.n_stages:
            raise ConfigError("stage_channels and stage_strides must have equal length")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        h, w = self.image_size
        ts = self.total_stride
        if h % ts or w % ts:
            raise ConfigError(
                f"image size {self.image_size} not divisible by total stride {ts}"
            )
        if len(self.decoder_channels) >= len([s for s in self.stage_strides if s > 1]) + 1:
            raise ConfigError("decoder would upsample past the input resolution")


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ForwardTrace(NamedTuple):
    trunk: torch.Tensor  # penultimate stage output
    latent: torch.Tensor  # final stage output
    raw: torch.Tensor  # pre-activation log-depth
    depth: torch.Tensor  # positive metric depth, half input resolution


class DepthNet(nn.Module):
    def __init__(self, arch: ArchConfig = ArchConfig()):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.stem = nn.Sequential(
            nn.Conv2d(3, arch.stem_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(arch.stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = arch.stem_channels
        for out_ch, stride in zip(arch.stage_channels, arch.stage_strides):
            blocks = [ResidualBlock(in_ch, out_ch, stride)]
            for _ in range(arch.blocks_per_stage - 1):
                blocks.append(ResidualBlock(out_ch, out_ch, 1))
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        dec = []
        for out_ch in arch.decoder_channels:
            dec.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        self.decoder = nn.ModuleList(dec)
        self.depth_head = nn.Conv2d(in_ch, 1, 3, padding=1)

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        ts = self.arch.total_stride
        if x.shape[2] % ts or x.shape[3] % ts:
            raise ShapeError(
                f"input size {tuple(x.shape[2:])} not divisible by total stride {ts}"
            )

    def encode(self, x) -> list[torch.Tensor]:
        """Stem output followed by every stage output (n_stages + 1 tensors)."""
        self._check_input(x)
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats

    def run_stages(self, x, start: int):
        """Apply stages[start:] to a feature map (for the adaptable suffix)."""
        for stage in self.stages[start:]:
            x = stage(x)
        return x

    def decode(self, latent):
        """(raw log-depth, positive depth) from the latent."""
        h = latent
        for block in self.decoder:
            h = block(h)
        raw = self.depth_head(h)
        depth = torch.exp(torch.clamp(raw, _LOG_DEPTH_MIN, _LOG_DEPTH_MAX))
        return raw, depth

    def forward(self, x) -> ForwardTrace:
        feats = self.encode(x)
        raw, depth = self.decode(feats[-1])
        return ForwardTrace(trunk=feats[-2], latent=feats[-1], raw=raw, depth=depth)


def init_network(seed: int, arch: ArchConfig = ArchConfig()) -> DepthNet:
    arch.validate()
    torch.manual_seed(seed)
    return DepthNet(arch)


def berhu_loss(pred, gt, mask, c_factor=0.2, c_override=None):
    """Reverse-Huber loss averaged over masked pixels.

    Per-pixel term is |r| when |r| <= c, else (r^2 + c^2) / (2c), with
    c = c_factor * max over masked |r| (c stays in the graph so its
    gradient contribution is kept).  `c_override` replaces c for tests
    that want to force a single branch.
    """
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    mask = mask.to(dtype=torch.bool)
    n = mask.sum()
    if n.item() == 0:
        raise EvalError("mask has no valid pixels")
    resid = pred - gt
    abs_r = resid.abs()
    masked_abs = torch.where(mask, abs_r, abs_r.new_zeros(()))
    if c_override is None:
        c = c_factor * masked_abs.max()
    else:
        c = pred.new_tensor(float(c_override))
    # denominator guard: when every masked residual is zero c is exactly 0,
    # but then no pixel enters the quadratic branch anyway
    quad = (resid * resid + c * c) / (2.0 * torch.clamp(c, min=1e-12))
    per = torch.where(abs_r <= c, abs_r, quad)
    return torch.where(mask, per, per.new_zeros(())).sum() / n


def partition_tags(net: DepthNet, adapt_depth: int) -> dict[str, str]:
    """Map every parameter/buffer name to 'trunk', 'head', or 'decoder'."""
    n_stages = net.arch.n_stages
    if not 0 <= adapt_depth <= n_stages:
        raise ConfigError(f"adapt_depth must be in [0, {n_stages}], got {adapt_depth}")
    boundary = n_stages - adapt_depth
    tags = {}
    for name, _ in list(net.named_parameters()) + list(net.named_buffers()):
        if name.startswith("stem."):
            tags[name] = "trunk"
        elif name.startswith("stages."):
            idx = int(name.split(".")[1])
            tags[name] = "head" if idx >= boundary else "trunk"
        else:
            tags[name] = "decoder"
    return tags


def partition_params(net: DepthNet, adapt_depth: int):
    """(frozen encoder names, adaptable encoder names); decoder excluded."""
    tags = partition_tags(net, adapt_depth)
    frozen = {n for n, t in tags.items() if t == "trunk"}
    adaptable = {n for n, t in tags.items() if t == "head"}
    return frozen, adaptable


def state_arrays(module: nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Full state (params + buffers) as float32/int64 numpy arrays."""
    out = OrderedDict()
    for name, tensor in module.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().copy()
    return out


def load_state_arrays(module: nn.Module, arrays):
    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ShapeError(f"state name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    new_state = {}
    for name, arr in arrays.items():
        t = torch.from_numpy(np.asarray(arr))
        if tuple(t.shape) != tuple(state[name].shape):
            raise ShapeError(f"{name}: shape {tuple(t.shape)} != {tuple(state[name].shape)}")
        new_state[name] = t.to(dtype=state[name].dtype)
    module.load_state_dict(new_state)
