"""Joint encoder/decoder training against a frozen diffusion backbone.

Per batch: draw one random secret, embed it through the backbone's final
reverse step, push the watermarked images through a random distortion
with probability p_distort, then run the decoder on the (possibly
distorted) watermarked batch and on the clean batch. The four loss
components combine as the weighted total; only encoder and decoder
parameters update.

The image and perceptual losses compare the *undistorted* watermarked
images with the originals: the distortion exists to toughen the decoder,
not to charge the encoder for corruption it cannot control. Fidelity is
also what the acceptance metrics measure.

All randomness flows through named streams spawned from the master seed
(batch order / secrets / distortions / eval), so identical seeds give
identical training logs. A non-finite loss aborts the run after writing
a last-good checkpoint of the previous epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codec import (
    CodecConfig,
    PixelDecoder,
    SecretEncoder,
    calibrate_encoder_scale,
    detect,
    embed_with_residual,
    save_codec,
)
from .diffusion import NoiseSchedule
from .distortions import DistortionSpec, apply_distortion, sample_distortion
from .losses import LossWeights, loss_image, loss_perceptual, loss_secret, loss_wm, total_loss
from .metrics import bit_accuracy
from .perceptual import FeatureExtractor
from .unet import UNetModel


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 3e-4
    p_distort: float = 1.0
    secret_bits: int = 8
    embed_strength: float = 0.025   # calibrated initial pixel RMS of the mark
    eval_every: int = 1
    checkpoint_every: int = 10
    # optional convergence gate: stop once both eval accuracies hold the
    # targets for `early_stop_patience` consecutive evals
    early_stop_acc_wm: Optional[float] = None
    early_stop_acc_bit: Optional[float] = None
    early_stop_patience: int = 2

    def __post_init__(self):
        if not 0.0 <= self.p_distort <= 1.0:
            raise ValueError("p_distort must lie in [0, 1]")
        if self.secret_bits < 1:
            raise ValueError("secret_bits must be >= 1")


@dataclass
class CleanLabelCounters:
    """Instrumentation: the decoder must see both branches every step."""

    wm_batches: int = 0
    clean_batches: int = 0
    steps: int = 0

    @property
    def balanced(self) -> bool:
        return self.wm_batches == self.clean_batches == self.steps


def training_step_loss(
    model: UNetModel,
    encoder: SecretEncoder,
    decoder: PixelDecoder,
    extractor: FeatureExtractor,
    x: torch.Tensor,
    secrets: np.ndarray,
    distortion: Optional[DistortionSpec],
    schedule: NoiseSchedule,
    weights: LossWeights,
    counters: Optional[CleanLabelCounters] = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """One deterministic training-step loss; pure given all arguments.

    ``secrets`` is one secret per image, (N, B); a single (B,) secret is
    broadcast across the batch. Exposed separately so gradient checks can
    difference the exact function the trainer optimizes.
    """
    n = x.shape[0]
    dtype = next(encoder.parameters()).dtype
    s_arr = np.asarray(secrets, dtype=np.float64)
    if s_arr.ndim == 1:
        s_arr = np.broadcast_to(s_arr, (n, s_arr.shape[0]))
    s_tensor = torch.from_numpy(np.ascontiguousarray(s_arr)).to(dtype)
    delta, self_logits = encoder(s_tensor)
    x_wm = embed_with_residual(model, x, delta, schedule)
    x_decoder_in = apply_distortion(x_wm, distortion) if distortion is not None else x_wm

    det_wm, sec_wm = decoder(x_decoder_in)
    det_clean, _ = decoder(x)
    if counters is not None:
        counters.wm_batches += 1
        counters.clean_batches += 1
        counters.steps += 1

    l_wm = loss_wm(det_wm, torch.ones(n)) + loss_wm(det_clean, torch.zeros(n))
    l_secret = loss_secret(sec_wm, s_tensor, self_logits)
    l_image = loss_image(x_wm, x)
    l_lpips = loss_perceptual(x, x_wm, extractor)
    total = total_loss((l_wm, l_secret, l_image, l_lpips), weights)
    parts = {
        "loss_wm": float(l_wm.detach()),
        "loss_secret": float(l_secret.detach()),
        "loss_image": float(l_image.detach()),
        "loss_lpips": float(l_lpips.detach()),
        "loss_total": float(total.detach()),
    }
    return total, parts


@torch.no_grad()
def eval_codec(
    model: UNetModel,
    encoder: SecretEncoder,
    decoder: PixelDecoder,
    schedule: NoiseSchedule,
    eval_data: torch.Tensor,
    seed: int,
    batch_size: int = 32,
    distorted: bool = False,
) -> dict[str, float]:
    """Held-out detection/bit accuracy (identity view) and embedding MSE."""
    rng = np.random.default_rng(seed)
    secret_bits = encoder.config.secret_bits
    hits_wm, hits_clean, total = 0, 0, 0
    bit_accs, mses = [], []
    for start in range(0, eval_data.shape[0], batch_size):
        x = eval_data[start : start + batch_size]
        s = rng.integers(0, 2, size=(x.shape[0], secret_bits))
        delta, _ = encoder(torch.from_numpy(s.astype(np.float32)))
        x_wm = embed_with_residual(model, x, delta, schedule)
        mses.append(float(torch.mean((x_wm - x) ** 2)))
        if distorted:
            spec = sample_distortion(rng)
            x_wm = apply_distortion(x_wm, spec)
        res_wm = detect(decoder, x_wm)
        res_clean = detect(decoder, x)
        hits_wm += int(res_wm.detected.sum())
        hits_clean += int((~res_clean.detected).sum())
        total += x.shape[0]
        bit_accs.extend(bit_accuracy(s[i], row) for i, row in enumerate(res_wm.bits))
    return {
        "acc_wm": (hits_wm + hits_clean) / (2 * total),
        "acc_bit": float(np.mean(bit_accs)),
        "mse": float(np.mean(mses)),
    }


def train_codec(
    data: torch.Tensor,
    model: UNetModel,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    weights: LossWeights,
    seed: int,
    eval_data: Optional[torch.Tensor] = None,
    extractor: Optional[FeatureExtractor] = None,
    out_dir=None,
    log_fn=None,
    counters: Optional[CleanLabelCounters] = None,
) -> tuple[SecretEncoder, PixelDecoder, list[dict]]:
    """Stage-1 training; returns (encoder, decoder, per-epoch log records)."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    extractor = extractor or FeatureExtractor(in_channels=model.config.in_channels)

    codec_cfg = CodecConfig(
        secret_bits=cfg.secret_bits,
        bottleneck_shape=model.config.bottleneck_shape,
        image_size=model.config.image_size,
        in_channels=model.config.in_channels,
    )
    seeds = np.random.SeedSequence(seed).spawn(4)
    order_rng = np.random.default_rng(seeds[0])
    secrets_rng = np.random.default_rng(seeds[1])
    distort_rng = np.random.default_rng(seeds[2])
    eval_seed = int(np.random.default_rng(seeds[3]).integers(2**31 - 1))

    torch.manual_seed(seed)
    encoder = SecretEncoder(codec_cfg)
    decoder = PixelDecoder(codec_cfg)
    calibrate_encoder_scale(
        model, encoder, data[: min(64, data.shape[0])], schedule,
        target_pixel_rms=cfg.embed_strength, seed=seed,
    )
    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()), lr=cfg.learning_rate
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "training_log.jsonl").open("w")

    counters = counters if counters is not None else CleanLabelCounters()
    history: list[dict] = []
    last_good: Optional[dict] = None
    n = data.shape[0]
    step = 0
    stop_streak = 0

    def emit(rec: dict) -> None:
        history.append(rec)
        if log_file:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()
        if log_fn:
            log_fn(rec)

    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(n)
            sums: dict[str, float] = {}
            batches = 0
            for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
                x = data[order[start : start + cfg.batch_size]]
                secrets = secrets_rng.integers(
                    0, 2, size=(x.shape[0], cfg.secret_bits)
                ).astype(np.uint8)
                spec = None
                if float(distort_rng.uniform()) < cfg.p_distort:
                    spec = sample_distortion(distort_rng)
                try:
                    total, parts = training_step_loss(
                        model, encoder, decoder, extractor, x, secrets, spec,
                        schedule, weights, counters,
                    )
                except FloatingPointError:
                    if out_dir is not None and last_good is not None:
                        encoder.load_state_dict(last_good["encoder"])
                        decoder.load_state_dict(last_good["decoder"])
                        save_codec(out_dir / "codec_lastgood.pt", encoder, decoder,
                                   extra={"aborted_at_step": step})
                    raise
                opt.zero_grad()
                total.backward()
                opt.step()
                step += 1
                batches += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v

            rec = {
                "epoch": epoch,
                "step": step,
                "lr": cfg.learning_rate,
                "seed": seed,
                **{k: v / max(batches, 1) for k, v in sums.items()},
            }
            last_good = {
                "encoder": {k: v.clone() for k, v in encoder.state_dict().items()},
                "decoder": {k: v.clone() for k, v in decoder.state_dict().items()},
            }
            if eval_data is not None and (epoch + 1) % cfg.eval_every == 0:
                ev = eval_codec(model, encoder, decoder, schedule, eval_data, eval_seed)
                rec.update({f"eval_{k}": v for k, v in ev.items()})
                if cfg.early_stop_acc_wm is not None and cfg.early_stop_acc_bit is not None:
                    hit = (ev["acc_wm"] >= cfg.early_stop_acc_wm
                           and ev["acc_bit"] >= cfg.early_stop_acc_bit)
                    stop_streak = stop_streak + 1 if hit else 0
            emit(rec)
            if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
                save_codec(out_dir / f"codec_epoch_{epoch:04d}.pt", encoder, decoder,
                           extra={"epoch": epoch})
            if stop_streak >= cfg.early_stop_patience:
                break
    finally:
        if log_file:
            log_file.close()

    encoder.eval()
    decoder.eval()
    if out_dir is not None:
        save_codec(out_dir / "codec_final.pt", encoder, decoder,
                   extra={"epochs_run": len(history), "seed": seed})
    return encoder, decoder, history


def codec_gradient_check(
    model: UNetModel,
    encoder: SecretEncoder,
    decoder: PixelDecoder,
    extractor: FeatureExtractor,
    x: torch.Tensor,
    secret: np.ndarray,
    distortion: Optional[DistortionSpec],
    schedule: NoiseSchedule,
    weights: LossWeights,
    n_coords: int = 100,
    fd_step: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between autograd and central finite differences.

    All modules must be float64. Coordinates are drawn uniformly over the
    encoder+decoder parameter vector. The central differences at h and h/2
    are Richardson-extrapolated, cancelling the h^2 truncation term so
    even coordinates with near-zero gradients resolve cleanly.
    """
    rng = rng or np.random.default_rng(0)
    params = [p for p in list(encoder.parameters()) + list(decoder.parameters())]

    def loss_value() -> float:
        total, _ = training_step_loss(
            model, encoder, decoder, extractor, x, secret, distortion, schedule, weights
        )
        return float(total.detach())

    for p in params:
        p.grad = None
    total, _ = training_step_loss(
        model, encoder, decoder, extractor, x, secret, distortion, schedule, weights
    )
    total.backward()
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    cum = np.cumsum(sizes)
    worst = 0.0
    for flat_idx in rng.choice(int(cum[-1]), size=n_coords, replace=False):
        pi = int(np.searchsorted(cum, flat_idx, side="right"))
        local = int(flat_idx - (cum[pi - 1] if pi else 0))
        p = params[pi]

        def central(h: float) -> float:
            with torch.no_grad():
                orig = p.reshape(-1)[local].item()
                p.reshape(-1)[local] = orig + h
                up = loss_value()
                p.reshape(-1)[local] = orig - h
                down = loss_value()
                p.reshape(-1)[local] = orig
            return (up - down) / (2 * h)

        fd = (4.0 * central(fd_step / 2) - central(fd_step)) / 3.0
        analytic = float(grads[pi].reshape(-1)[local])
        denom = max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, abs(fd - analytic) / denom)
    return worst
