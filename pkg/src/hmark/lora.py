"""Low-rank adapters over the UNet's attention projections.

Each targeted ``nn.Linear`` W is wrapped so the effective weight becomes
W + (alpha/rank) * B @ A with A (rank x d_in) Gaussian-initialized and
B (d_out x rank) zero-initialized, so a freshly attached model computes
exactly what the base model does. Base weights are frozen; only A/B
train. Detaching puts the original modules back untouched.

``merged_state_dict`` folds adapters into plain base-format weights so a
finetuned checkpoint stays loadable as an ordinary backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .unet import SelfAttention, UNetModel

DEFAULT_TARGETS = ("q", "k", "v", "proj")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 32
    alpha: float | None = None          # None -> alpha = rank (scale 1)
    target_layers: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    @property
    def scale(self) -> float:
        return (self.alpha if self.alpha is not None else self.rank) / self.rank


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        self.scale = scale
        d_out, d_in = base.weight.shape
        a = torch.randn(rank, d_in, generator=gen) / (d_in ** 0.5)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_a.T) @ self.lora_b.T)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_b @ self.lora_a)


class LoRAHandle:
    """Bookkeeping for attached adapters: training params, detach, merge."""

    def __init__(self, model: UNetModel, config: LoRAConfig):
        self.model = model
        self.config = config
        self.sites: list[tuple[nn.Module, str, LoRALinear, nn.Linear]] = []
        self._grad_flags: dict[str, bool] = {}

    def parameters(self):
        for _, _, wrapper, _ in self.sites:
            yield wrapper.lora_a
            yield wrapper.lora_b

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def detach(self) -> UNetModel:
        """Remove adapters, restoring the exact base modules and grad flags."""
        for parent, name, _, original in self.sites:
            setattr(parent, name, original)
        self.sites.clear()
        for pname, param in self.model.named_parameters():
            if pname in self._grad_flags:
                param.requires_grad_(self._grad_flags[pname])
        return self.model

    def merged_state_dict(self) -> dict[str, torch.Tensor]:
        """Base-format state dict with adapter updates folded in."""
        wrappers = {id(w): w for _, _, w, _ in self.sites}
        out = {}

        def walk(module: nn.Module, prefix: str):
            if id(module) in wrappers:
                w = wrappers[id(module)]
                out[prefix + "weight"] = w.merged_weight().detach().clone()
                if w.base.bias is not None:
                    out[prefix + "bias"] = w.base.bias.detach().clone()
                return
            for pname, param in module.named_parameters(recurse=False):
                out[prefix + pname] = param.detach().clone()
            for bname, buf in module.named_buffers(recurse=False):
                out[prefix + bname] = buf.detach().clone()
            for cname, child in module.named_children():
                walk(child, prefix + cname + ".")

        walk(self.model, "")
        return out


def attach_lora(model: UNetModel, config: LoRAConfig, seed: int = 0) -> LoRAHandle:
    """Freeze the model and wrap every attention projection named in the config."""
    handle = LoRAHandle(model, config)
    handle._grad_flags = {n: p.requires_grad for n, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    attn_modules = [m for m in model.modules() if isinstance(m, SelfAttention)]
    if not attn_modules:
        raise ValueError("model has no attention blocks to adapt")
    for attn in attn_modules:
        for name in config.target_layers:
            target = getattr(attn, name, None)
            if not isinstance(target, nn.Linear):
                raise ValueError(
                    f"unknown target layer {name!r}; attention blocks expose "
                    f"{sorted(n for n, m in attn.named_children() if isinstance(m, nn.Linear))}"
                )
            wrapper = LoRALinear(target, config.rank, config.scale, gen)
            setattr(attn, name, wrapper)
            handle.sites.append((attn, name, wrapper, target))
    return handle
