"""Fixed feature extractor for perceptual distance and feature statistics.

A three-stage strided conv stack whose weights are drawn once from a
seeded generator and never trained. The perceptual distance is the
classic deep-feature recipe: unit-normalize each tap along channels,
take mean squared differences, and sum over taps. At this image scale a
pretrained backbone buys nothing; any fixed nonlinear multi-scale
extractor gives the loss its contract (zero iff features match,
symmetric, monotone under growing perturbations on average).

``pooled_features`` exposes a separate global-average-pooled embedding
(the raw final tap, not the normalized ones) used for Frechet feature
distances between image sets.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_EXTRACTOR_SEED = 0x5EED


class FeatureExtractor(nn.Module):
    """Frozen random-weight conv features over [-1, 1] images."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 seed: int = DEFAULT_EXTRACTOR_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        prev = in_channels
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            convs.append(conv)
            prev = w
        self.convs = nn.ModuleList(convs)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        y = x
        for conv in self.convs:
            y = F.silu(conv(y))
            feats.append(y)
        return feats

    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C_last) embedding: final conv tap, global average pooled."""
        y = x
        for conv in self.convs[:-1]:
            y = F.silu(conv(y))
        y = self.convs[-1](y)
        return y.mean(dim=(2, 3))


def _unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((feat ** 2).sum(dim=1, keepdim=True) + eps)
    return feat / norm


def perceptual_distance(
    x: torch.Tensor, y: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    """Mean over batch of summed per-tap normalized feature MSEs."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    total = 0.0
    for fx, fy in zip(extractor.taps(x), extractor.taps(y)):
        diff = _unit_normalize(fx) - _unit_normalize(fy)
        total = total + (diff ** 2).mean(dim=(1, 2, 3))
    return total.mean()
