"""Distortion suite for training augmentation and robustness evaluation.

Six families plus identity, each a pure deterministic function of
(image batch, spec). Parameter ranges:

    blur            kernel sigma      [0.3, 0.8]
    gaussian_noise  noise sigma       [0.005, 0.02]
    jpeg_like       mult-noise factor [0.01, 0.12]
    resize          scale             [0.85, 0.95]
    brightness      factor            [0.9, 1.1]
    contrast        factor            [0.9, 1.1]

Compression artifacts are *simulated* with elementwise multiplicative
noise x * (1 + eta), eta ~ U(-c, c); a real JPEG round-trip is available
as the extra kind ``jpeg_real`` for evaluation only and is never drawn
by ``sample_distortion``. Blur uses a 2*ceil(3*sigma)+1 kernel with
reflect padding, so constant images are exact fixed points. Contrast
maps x to f*x + (1-f)*mean(x) about the batch mean; resize goes down and
back up with bilinear interpolation. Outputs keep the input shape and
are clamped to [-1, 1]. All randomness comes from spec.seed.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

PARAM_RANGES: dict[str, tuple[str, float, float]] = {
    "blur": ("sigma", 0.3, 0.8),
    "gaussian_noise": ("sigma", 0.005, 0.02),
    "jpeg_like": ("factor", 0.01, 0.12),
    "resize": ("scale", 0.85, 0.95),
    "brightness": ("factor", 0.9, 1.1),
    "contrast": ("factor", 0.9, 1.1),
}

SAMPLED_KINDS = tuple(PARAM_RANGES)          # the six trained-against families
KINDS = ("identity",) + SAMPLED_KINDS
EVAL_ONLY_KINDS = ("jpeg_real",)             # real JPEG round-trip, evaluation only


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: Mapping[str, float]
    seed: int = 0

    def __post_init__(self):
        if self.kind in PARAM_RANGES:
            name, lo, hi = PARAM_RANGES[self.kind]
            if set(self.params) != {name}:
                raise ValueError(f"{self.kind} expects params {{{name!r}}}, got {set(self.params)}")
            val = self.params[name]
            if not lo <= val <= hi:
                raise ValueError(f"{self.kind} {name}={val} outside [{lo}, {hi}]")
        elif self.kind == "identity":
            if self.params:
                raise ValueError("identity takes no params")
        elif self.kind == "jpeg_real":
            q = self.params.get("quality")
            if q is None or not 1 <= q <= 100:
                raise ValueError("jpeg_real requires quality in [1, 100]")
        else:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        object.__setattr__(self, "params", dict(self.params))

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "params": self.params, "seed": self.seed},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "DistortionSpec":
        d = json.loads(text)
        return DistortionSpec(kind=d["kind"], params=d["params"], seed=d["seed"])


def identity_spec() -> DistortionSpec:
    return DistortionSpec(kind="identity", params={})


def sample_distortion(rng: np.random.Generator) -> DistortionSpec:
    """Kind uniform over the six families, param uniform within its range."""
    kind = SAMPLED_KINDS[int(rng.integers(len(SAMPLED_KINDS)))]
    name, lo, hi = PARAM_RANGES[kind]
    value = float(rng.uniform(lo, hi))
    seed = int(rng.integers(0, 2**31 - 1))
    return DistortionSpec(kind=kind, params={name: value}, seed=seed)


def _gaussian_kernel1d(sigma: float, dtype, device) -> torch.Tensor:
    radius = math.ceil(3.0 * sigma)
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64, device=device)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return (k / k.sum()).to(dtype)


def _blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    k1 = _gaussian_kernel1d(sigma, x.dtype, x.device)
    ksize = k1.numel()
    pad = ksize // 2
    c = x.shape[1]
    kh = k1.reshape(1, 1, 1, ksize).expand(c, 1, 1, ksize)
    kv = k1.reshape(1, 1, ksize, 1).expand(c, 1, ksize, 1)
    y = F.pad(x, (pad, pad, 0, 0), mode="reflect")
    y = F.conv2d(y, kh, groups=c)
    y = F.pad(y, (0, 0, pad, pad), mode="reflect")
    y = F.conv2d(y, kv, groups=c)
    return y


def _resize(x: torch.Tensor, scale: float) -> torch.Tensor:
    h, w = x.shape[-2:]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    small = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)


def _jpeg_real(x: torch.Tensor, quality: int) -> torch.Tensor:
    from PIL import Image

    outs = []
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    for img in arr:
        pil = Image.fromarray(img.permute(1, 2, 0).numpy(), mode="RGB")
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)
        outs.append(torch.from_numpy(back).permute(2, 0, 1) / 127.5 - 1.0)
    return torch.stack(outs).to(x.dtype)


def apply_distortion(x: torch.Tensor, spec: DistortionSpec) -> torch.Tensor:
    """Apply one distortion; output has the input's shape, clamped to [-1, 1]."""
    if spec.kind == "identity":
        return x
    if spec.kind == "blur":
        y = _blur(x, spec.params["sigma"])
    elif spec.kind == "gaussian_noise":
        gen = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        y = x + spec.params["sigma"] * noise
    elif spec.kind == "jpeg_like":
        gen = torch.Generator().manual_seed(spec.seed)
        c = spec.params["factor"]
        eta = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2.0 - 1.0) * c
        y = x * (1.0 + eta)
    elif spec.kind == "resize":
        y = _resize(x, spec.params["scale"])
    elif spec.kind == "brightness":
        y = spec.params["factor"] * x
    elif spec.kind == "contrast":
        f = spec.params["factor"]
        y = f * x + (1.0 - f) * x.mean()
    elif spec.kind == "jpeg_real":
        y = _jpeg_real(x, spec.params["quality"])
    else:  # unreachable after spec validation; kept for direct callers
        raise ValueError(f"unknown distortion kind {spec.kind!r}")
    return y.clamp(-1.0, 1.0)
