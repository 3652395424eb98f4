"""Downstream finetuning of a diffusion model on an image directory.

Two scripts: ``unet_full`` updates every weight (lr 2e-4, EMA on by
default) and ``lora`` trains rank-r adapters on the attention projections
(lr 1e-4). Both run the plain noise-prediction objective with linear
warmup, checkpointing every ``checkpoint_every`` steps.

Checkpoints are written as ordinary backbone-format files holding the
*effective* sampling weights (LoRA merged in, or the EMA shadow), so the
evaluation side needs nothing but images sampled from them - it never
touches adapter internals, keeping the closed-box boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, denoising_loss, save_backbone
from .lora import LoRAConfig, LoRAHandle, attach_lora
from .unet import UNetConfig, UNetModel

SCRIPT_DEFAULTS = {
    "unet_full": {"lr": 2e-4, "use_ema": True},
    "lora": {"lr": 1e-4, "use_ema": False},
}


@dataclass(frozen=True)
class FinetuneConfig:
    script: str = "lora"
    steps: int = 9000
    batch_size: int = 16
    lr: float | None = None             # None -> script default
    warmup_steps: int = 500
    checkpoint_every: int = 500
    use_ema: bool | None = None         # None -> script default
    ema_decay: float = 0.999
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    seed: int = 0

    def __post_init__(self):
        if self.script not in SCRIPT_DEFAULTS:
            raise ValueError(f"unknown finetune script {self.script!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr is not None else SCRIPT_DEFAULTS[self.script]["lr"]

    @property
    def effective_ema(self) -> bool:
        return self.use_ema if self.use_ema is not None else SCRIPT_DEFAULTS[self.script]["use_ema"]


class _EMA:
    def __init__(self, model: UNetModel, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    def update(self, model: UNetModel) -> None:
        with torch.no_grad():
            for n, p in model.named_parameters():
                self.shadow[n].mul_(self.decay).add_(p.detach(), alpha=1 - self.decay)

    def state_dict_over(self, model: UNetModel) -> dict:
        out = {n: b.clone() for n, b in model.state_dict().items()}
        out.update({n: v.clone() for n, v in self.shadow.items()})
        return out


def _effective_state(model: UNetModel, handle: LoRAHandle | None, ema: _EMA | None) -> dict:
    if handle is not None:
        return handle.merged_state_dict()
    if ema is not None:
        return ema.state_dict_over(model)
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def finetune(
    model: UNetModel,
    data: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: FinetuneConfig,
    out_dir,
) -> tuple[UNetModel, list[Path]]:
    """Returns (effective finetuned model, checkpoint paths, final step included).

    A NaN loss aborts with the checkpoints written so far left on disk.
    For the lora script the passed-in model is restored to its base state
    on exit; the finetuned weights live in the returned model/checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.steps == 0:
        return model, []

    handle = None
    ema = None
    if cfg.script == "lora":
        handle = attach_lora(model, cfg.lora, seed=cfg.seed)
        params = list(handle.parameters())
    else:
        params = list(model.parameters())
        for p in params:
            p.requires_grad_(True)
    if cfg.effective_ema:
        ema = _EMA(model, cfg.ema_decay)

    opt = torch.optim.Adam(params, lr=cfg.effective_lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    n = data.shape[0]
    order = order_rng.permutation(n)
    cursor = 0

    def save_ckpt(step: int) -> Path:
        state = _effective_state(model, handle, ema)
        snapshot = UNetModel(UNetConfig.from_dict(model.config.to_dict()))
        snapshot.load_state_dict(state)
        path = out_dir / f"step_{step:06d}.pt"
        save_backbone(path, snapshot, schedule, extra={
            "script": cfg.script, "step": step,
            "rank": cfg.lora.rank if cfg.script == "lora" else None,
        })
        return path

    checkpoints: list[Path] = []
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch_size > n:
                order = order_rng.permutation(n)
                cursor = 0
            batch = data[order[cursor : cursor + cfg.batch_size]]
            cursor += cfg.batch_size

            warm = min(1.0, step / max(cfg.warmup_steps, 1))
            for group in opt.param_groups:
                group["lr"] = cfg.effective_lr * warm

            loss = denoising_loss(model, batch, schedule, gen)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"finetune loss diverged at step {step}; "
                    f"last checkpoint: {checkpoints[-1] if checkpoints else 'none'}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                ema.update(model)

            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                checkpoints.append(save_ckpt(step))
        final = UNetModel(UNetConfig.from_dict(model.config.to_dict()))
        final.load_state_dict(_effective_state(model, handle, ema))
        final.eval()
    finally:
        model.eval()
        if handle is not None:
            handle.detach()

    (out_dir / "finetune_config.json").write_text(
        json.dumps({**asdict(cfg), "lora": asdict(cfg.lora)}, indent=2, sort_keys=True, default=str)
        + "\n"
    )
    return final, checkpoints
