"""The four training loss components and their weighted total.

All cross-entropies are computed in the numerically stable
logits form (never sigmoid-then-log). The secret loss runs only over
watermarked samples and carries the encoder's self-reconstruction term
added unweighted. The total is

    lambda_wm * L_wm + lambda_secret * L_secret
    + lambda_image * L_image + lambda_lpips * L_perceptual
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .perceptual import FeatureExtractor, perceptual_distance


@dataclass(frozen=True)
class LossWeights:
    lambda_wm: float = 5.0
    lambda_secret: float = 3.0
    lambda_image: float = 1.5
    lambda_lpips: float = 2.0

    def __post_init__(self):
        for name in ("lambda_wm", "lambda_secret", "lambda_image", "lambda_lpips"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_wm, self.lambda_secret, self.lambda_image, self.lambda_lpips)


def loss_wm(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean detection BCE over samples, stable logit form."""
    logits = logits.reshape(-1)
    labels = labels.reshape(-1)
    if logits.shape != labels.shape:
        raise ValueError(f"{logits.shape[0]} logits vs {labels.shape[0]} labels")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def loss_secret(
    secret_logits: torch.Tensor,
    secrets: torch.Tensor,
    self_logits: torch.Tensor,
) -> torch.Tensor:
    """Bit-wise BCE over watermarked samples, plus the self-reconstruction term."""
    if secret_logits.shape != secrets.shape or self_logits.shape != secrets.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(secret_logits.shape)}, "
            f"secrets {tuple(secrets.shape)}, self {tuple(self_logits.shape)}"
        )
    if secrets.numel() == 0:
        warnings.warn("loss_secret over an empty watermarked set; defined as 0")
        return torch.zeros((), dtype=secret_logits.dtype)
    targets = secrets.to(secret_logits.dtype)
    decoder_term = F.binary_cross_entropy_with_logits(secret_logits, targets)
    self_term = F.binary_cross_entropy_with_logits(self_logits, targets)
    return decoder_term + self_term


def loss_image(x_wm: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Pixel MSE, mean over every element."""
    if x_wm.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_wm.shape)} vs {tuple(x.shape)}")
    return torch.mean((x_wm - x) ** 2)


def loss_perceptual(
    x: torch.Tensor, x_wm: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    if not extractor.is_frozen:
        raise RuntimeError("perceptual extractor must be frozen (non-trainable)")
    return perceptual_distance(x, x_wm, extractor)


def total_loss(components, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of (wm, secret, image, perceptual); aborts on NaN."""
    if len(components) != 4:
        raise ValueError(f"expected 4 components, got {len(components)}")
    vals = [c if torch.is_tensor(c) else torch.tensor(float(c)) for c in components]
    for name, c in zip(("wm", "secret", "image", "perceptual"), vals):
        if not torch.isfinite(c).all():
            raise FloatingPointError(
                f"non-finite loss component {name}: "
                + ", ".join(f"{n}={float(v):.6g}" for n, v in
                            zip(("wm", "secret", "image", "perceptual"), vals))
            )
    w = weights.as_tuple()
    return w[0] * vals[0] + w[1] * vals[1] + w[2] * vals[2] + w[3] * vals[3]
