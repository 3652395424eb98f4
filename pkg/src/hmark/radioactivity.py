"""Numerical checks that the bottleneck residual shifts the data distribution.

The embedding applies one reverse step to the zero-noise lift of each
image, so the map from residual to pixels is the up path wrapped in the
affine posterior update. Linearizing that map around the unwatermarked
operating point gives a per-image Jacobian; because the residual is the
same for every image carrying a given secret, the dataset-level mean
shift is approximately

    mean(embed(x, eps*delta) - embed(x, 0)) ~= eps * mean(J(x) delta)

which is exactly what a downstream model trained on the watermarked set
must absorb. ``mean_shift_check`` measures both sides and their relative
error on raw (unclamped) step outputs; ``linearity_study`` sweeps eps to
document where the linear regime ends.

``radioactivity_probe`` is the closed-box end of the story: sample from
a suspect and a benign model, run the detector, and report separation
statistics. It consumes only sampled images, never model internals.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .codec import PixelDecoder, SecretEncoder, detect, embed_with_residual, encode_secret
from .diffusion import NoiseSchedule, sample
from .metrics import bit_accuracy, roc_auc
from .unet import UNetModel


@dataclass(frozen=True)
class MeanShiftEstimate:
    empirical: torch.Tensor       # (C, H, W) mean pixel shift, measured
    predicted: torch.Tensor       # (C, H, W) mean JVP in the residual direction
    relative_error: float
    epsilon: float
    n_images: int


def upblocks_jvp(
    model: UNetModel,
    x: torch.Tensor,
    direction: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """JVP of the injected final step w.r.t. the bottleneck residual at zero.

    Evaluated at each image's unwatermarked operating point (the zero-noise
    lift); returns an image-shaped tensor per input image.
    """
    if direction.ndim == 3:
        direction = direction.unsqueeze(0)
    if direction.shape[0] == 1 and x.shape[0] > 1:
        direction = direction.expand(x.shape[0], -1, -1, -1)

    def step(delta: torch.Tensor) -> torch.Tensor:
        return embed_with_residual(model, x, delta, schedule, clamp=False)

    zeros = torch.zeros_like(direction)
    _, jvp = torch.func.jvp(step, (zeros,), (direction.contiguous(),))
    return jvp


def assert_per_secret_constancy(encoder: SecretEncoder, s) -> torch.Tensor:
    """Re-derive the residual twice; the premise of the mean-shift analysis."""
    d1, _ = encode_secret(encoder, s)
    d2, _ = encode_secret(encoder, s)
    if not torch.equal(d1, d2):
        raise AssertionError("residual is not a pure function of the secret")
    return d1


def mean_shift_check(
    model: UNetModel,
    encoder: SecretEncoder,
    data: torch.Tensor,
    s,
    epsilon: float,
    schedule: NoiseSchedule,
    batch_size: int = 64,
    error_floor: float = 1e-12,
) -> MeanShiftEstimate:
    """Empirical vs JVP-predicted dataset mean shift at residual scale eps.

    Runs in float64 regardless of the model's dtype: at small eps the
    differenced shift sits below float32 resolution, which would swamp
    the truncation behavior the comparison is after.
    """
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    delta = assert_per_secret_constancy(encoder, s).detach().double()
    model64 = copy.deepcopy(model).double().eval()
    data64 = data.double()
    emp_sum = torch.zeros(data.shape[1:], dtype=torch.float64)
    pred_sum = torch.zeros(data.shape[1:], dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, data64.shape[0], batch_size):
            x = data64[start : start + batch_size]
            d = delta.expand(x.shape[0], -1, -1, -1)
            base = embed_with_residual(model64, x, None, schedule, clamp=False)
            shifted = embed_with_residual(model64, x, epsilon * d, schedule, clamp=False)
            emp_sum += (shifted - base).sum(dim=0)
            pred_sum += (epsilon * upblocks_jvp(model64, x, d, schedule)).sum(dim=0)
    n = data.shape[0]
    empirical = emp_sum / n
    predicted = pred_sum / n
    rel = float(
        torch.linalg.vector_norm(empirical - predicted)
        / max(float(torch.linalg.vector_norm(predicted)), error_floor)
    )
    return MeanShiftEstimate(
        empirical=empirical, predicted=predicted, relative_error=rel,
        epsilon=epsilon, n_images=n,
    )


def linearity_study(
    model: UNetModel,
    encoder: SecretEncoder,
    data: torch.Tensor,
    s,
    schedule: NoiseSchedule,
    eps_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0),
) -> list[dict]:
    """(eps, relative error) table over the configured grid."""
    rows = []
    for eps in eps_grid:
        est = mean_shift_check(model, encoder, data, s, eps, schedule)
        rows.append({"epsilon": eps, "relative_error": est.relative_error,
                     "n_images": est.n_images})
    return rows


def radioactivity_probe(
    suspect: UNetModel | torch.Tensor,
    benign: UNetModel | torch.Tensor,
    decoder: PixelDecoder,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
    secret=None,
) -> dict:
    """Sample both models, detect, and report separation statistics.

    Each side may be a model (sampled here with the given seed) or an
    already-sampled image tensor, so checkpoint sweeps can reuse one
    benign batch. Only generated images cross the detection boundary.
    Returns auc over presence scores (suspect = positive), acc_wm at the
    0.5 threshold, and acc_bit of suspect samples against ``secret``.
    """
    suspect_images = suspect if torch.is_tensor(suspect) else sample(suspect, schedule, n, seed)
    benign_images = benign if torch.is_tensor(benign) else sample(benign, schedule, n, seed + 1)
    n = min(suspect_images.shape[0], benign_images.shape[0])
    suspect_images, benign_images = suspect_images[:n], benign_images[:n]
    res_s = detect(decoder, suspect_images)
    res_b = detect(decoder, benign_images)
    scores = np.concatenate([res_s.p_wm, res_b.p_wm])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    _, auc = roc_auc(scores, labels)
    acc_wm = float((res_s.detected.sum() + (~res_b.detected).sum()) / (2 * n))
    out = {"auc": auc, "acc_wm": acc_wm, "n": n}
    if secret is not None:
        out["acc_bit"] = float(np.mean([bit_accuracy(secret, row) for row in res_s.bits]))
    return out
