"""DDPM forward/reverse processes around the bottleneck-exposing UNet.

Forward (closed form):  x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
Reverse (posterior, eps parameterization):

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
              + sqrt(btilde_t) z,
    btilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t

Timesteps are 1-indexed (t in 1..T); abar(0) = 1 by convention, which
makes btilde_1 = 0, so the last reverse step adds no noise. The reverse
step optionally adds a residual to the bottleneck features before the up
path runs; with a zero/absent residual it is exactly the plain step.

Intermediate states are never clamped; only final sampled images are
clipped to [-1, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .unet import BottleneckFeatures, UNetConfig, UNetModel

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cached alpha products; arrays are 0-indexed internally."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def _check_t(self, t: int, low: int) -> None:
        if not low <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return _schedule_from_betas(np.asarray(d["betas"], dtype=np.float64))


def _schedule_from_betas(betas: np.ndarray) -> NoiseSchedule:
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if not ((betas > 0) & (betas < 1)).all():
        raise ValueError("betas must lie strictly within (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=betas.size, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear interpolation from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return _schedule_from_betas(betas)


def forward_diffuse(
    x0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward marginal q(x_t | x_0)."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def denoise_step_with_injection(
    model: UNetModel,
    x_t: torch.Tensor,
    t: int,
    delta_h: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
    feats: Optional[BottleneckFeatures] = None,
) -> torch.Tensor:
    """One reverse step x_t -> x_{t-1}, with an optional bottleneck residual.

    ``noise`` is the posterior noise z for t > 1; when omitted the step is
    the deterministic posterior mean. At t = 1 no noise is ever added.
    ``feats`` lets callers reuse an already-computed down/mid pass.
    """
    if feats is None:
        feats = model.down_mid(x_t, t)
    eps = model.up_from(feats, delta_h=delta_h)

    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    alpha_t = schedule.alpha(t)
    beta_t = schedule.beta(t)

    mean = (x_t - beta_t / math.sqrt(1.0 - abar_t) * eps) / math.sqrt(alpha_t)
    if t > 1 and noise is not None:
        var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
        mean = mean + math.sqrt(var) * noise
    return mean


@torch.no_grad()
def sample(
    model: UNetModel,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
    delta_h: Optional[torch.Tensor] = None,
    batch_size: int = 64,
) -> torch.Tensor:
    """Ancestral sampling from pure noise; residual injected only at the final step.

    Deterministic given the seed. Output is clamped to [-1, 1].
    """
    cfg = model.config
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if n == 0:
        return torch.empty((0, *shape))
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    outs = []
    remaining = n
    while remaining > 0:
        b = min(batch_size, remaining)
        x = torch.randn((b, *shape), generator=gen)
        for t in range(schedule.T, 0, -1):
            z = torch.randn((b, *shape), generator=gen) if t > 1 else None
            inject = delta_h if t == 1 else None
            x = denoise_step_with_injection(model, x, t, inject, schedule, noise=z)
            if not torch.isfinite(x).all():
                raise FloatingPointError(
                    f"non-finite activations during sampling at t={t}"
                )
        outs.append(x.clamp(-1.0, 1.0))
        remaining -= b
    if was_training:
        model.train()
    return torch.cat(outs, dim=0)


def denoising_loss(
    model: UNetModel,
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction MSE on a batch with per-sample uniform timesteps."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen)
    abar = torch.from_numpy(schedule.alpha_bars).to(x0.dtype)[t - 1]
    abar = abar.view(b, 1, 1, 1)
    x_t = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise
    eps_hat = model(x_t, t.to(x0.dtype))
    return torch.mean((eps_hat - noise) ** 2)


def train_backbone(
    model: UNetModel,
    data: torch.Tensor,
    schedule: NoiseSchedule,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    eval_data: Optional[torch.Tensor] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Standard DDPM training of the noise predictor; returns per-epoch records."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    order_rng = np.random.default_rng(seed)
    n = data.shape[0]
    history = []
    model.train()
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = data[order[start : start + batch_size]]
            loss = denoising_loss(model, batch, schedule, gen)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"backbone loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if eval_data is not None:
            with torch.no_grad():
                model.eval()
                eval_gen = torch.Generator().manual_seed(seed + 1)
                rec["eval_loss"] = float(
                    denoising_loss(model, eval_data, schedule, eval_gen)
                )
                model.train()
        if log_fn:
            log_fn(rec)
        history.append(rec)
    model.eval()
    return history


def save_backbone(
    path, model: UNetModel, schedule: NoiseSchedule, extra: Optional[dict] = None
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "backbone",
        "unet_config": model.config.to_dict(),
        "schedule": schedule.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_backbone(path) -> tuple[UNetModel, NoiseSchedule, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
    model = UNetModel(UNetConfig.from_dict(payload["unet_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = NoiseSchedule.from_dict(payload["schedule"])
    return model, schedule, payload.get("extra", {})


def write_diffusion_config(path, config: UNetConfig, schedule_args: dict, seed: int) -> None:
    """Human-readable key-value config for the backbone (JSON)."""
    doc = {
        "timesteps": schedule_args["T"],
        "beta_start": schedule_args["beta_start"],
        "beta_end": schedule_args["beta_end"],
        "image_size": config.image_size,
        "base_channels": config.base_channels,
        "channel_mults": list(config.channel_mults),
        "seed": seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
