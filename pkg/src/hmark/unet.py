"""Small timestep-conditioned UNet exposing its bottleneck feature map.

The network is the standard DDPM noise predictor: an input conv, a down
path of residual blocks with strided-conv downsampling, a mid block, and
a mirrored up path with skip concatenation. What matters here is that the
forward pass is literally the composition

    forward(x, t) = up_from(down_mid(x, t))

so reading the bottleneck features, adding a residual to them, and then
completing the up path is bit-identical to a plain forward pass whenever
the residual is zero. ``down_mid`` returns the mid-block output (the
feature map with the smallest spatial dims and the largest channel count)
together with the opaque skip state required to finish the up path.

All blocks use GroupNorm + SiLU; there is no dropout or batch norm, so
the module is deterministic given its parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    time_dim: int = 128
    attn_levels: tuple[int, ...] = (2,)  # down/up levels (by index) that get attention

    @property
    def depth(self) -> int:
        return len(self.channel_mults)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * self.channel_mults[-1]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // (2 ** self.depth)

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        return (self.bottleneck_channels, self.bottleneck_size, self.bottleneck_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attn_levels"] = tuple(d["attn_levels"])
        return UNetConfig(**d)


class BottleneckFeatures(NamedTuple):
    """Mid-block output plus the down-path state needed to finish the up path."""

    h: torch.Tensor
    skips: tuple[torch.Tensor, ...]
    temb: torch.Tensor


def _norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        y = self.conv1(F.silu(self.norm1(x)))
        y = y + self.time_proj(temb)[:, :, None, None]
        y = self.conv2(F.silu(self.norm2(y)))
        return y + self.skip(x)


class SelfAttention(nn.Module):
    """Single-head self-attention over spatial positions.

    The q/k/v/proj projections are plain Linear layers on the channel axis
    so low-rank adapters can wrap them by name.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        y = self.norm(x).reshape(b, c, h * w).permute(0, 2, 1)
        q, k, v = self.q(y), self.k(y), self.v(y)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        y = self.proj(attn @ v).permute(0, 2, 1).reshape(b, c, h, w)
        return x + y


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.op = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNetModel(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        if cfg.image_size % (2 ** cfg.depth):
            raise ValueError(
                f"image_size {cfg.image_size} not divisible by 2^{cfg.depth}"
            )
        self.config = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mults]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.in_conv = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = chans[0]
        for level, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, cfg.time_dim))
            self.down_attn.append(
                SelfAttention(ch) if level in cfg.attn_levels else nn.Identity()
            )
            next_ch = chans[min(level + 1, len(chans) - 1)]
            self.downsamplers.append(Downsample(ch, next_ch))
            prev = next_ch

        mid_ch = chans[-1]
        self.mid_res1 = ResBlock(mid_ch, mid_ch, cfg.time_dim)
        self.mid_attn = SelfAttention(mid_ch)
        self.mid_res2 = ResBlock(mid_ch, mid_ch, cfg.time_dim)

        self.upsamplers = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        prev = mid_ch
        for level in reversed(range(len(chans))):
            ch = chans[level]
            self.upsamplers.append(Upsample(prev, ch))
            self.up_res.append(ResBlock(ch * 2, ch, cfg.time_dim))
            self.up_attn.append(
                SelfAttention(ch) if level in cfg.attn_levels else nn.Identity()
            )
            prev = ch

        self.out_norm = _norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)

    def _embed_time(self, t: torch.Tensor, batch: int, like: torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor(float(t))
        t = t.to(device=like.device, dtype=like.dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        return self.time_mlp(sinusoidal_embedding(t, self.config.time_dim))

    def down_mid(self, x: torch.Tensor, t) -> BottleneckFeatures:
        """Run DownBlocks then MidBlock; returns bottleneck features + skip state."""
        temb = self._embed_time(t, x.shape[0], x)
        y = self.in_conv(x)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsamplers):
            y = attn(res(y, temb))
            skips.append(y)
            y = down(y)
        h = self.mid_res2(self.mid_attn(self.mid_res1(y, temb)), temb)
        return BottleneckFeatures(h=h, skips=tuple(skips), temb=temb)

    def up_from(
        self, feats: BottleneckFeatures, delta_h: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Complete the up path from (possibly perturbed) bottleneck features."""
        h = feats.h
        if delta_h is not None:
            if delta_h.ndim == 3:
                delta_h = delta_h.unsqueeze(0)
            if delta_h.shape[1:] != h.shape[1:]:
                raise ValueError(
                    f"residual shape {tuple(delta_h.shape[1:])} != bottleneck "
                    f"shape {tuple(h.shape[1:])}"
                )
            h = h + delta_h
        y = h
        for up, res, attn, skip in zip(
            self.upsamplers, self.up_res, self.up_attn, reversed(feats.skips)
        ):
            y = up(y)
            y = attn(res(torch.cat([y, skip], dim=1), feats.temb))
        return self.out_conv(F.silu(self.out_norm(y)))

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        return self.up_from(self.down_mid(x, t))


def unet_split_forward(
    model: UNetModel, x_t: torch.Tensor, t
) -> tuple[BottleneckFeatures, torch.Tensor]:
    """Bottleneck features and the standard noise prediction, in one pass."""
    feats = model.down_mid(x_t, t)
    return feats, model.up_from(feats)
