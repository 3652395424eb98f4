import numpy as np
import pytest
import torch

from hmark.diffusion import load_backbone, make_schedule
from hmark.finetune import FinetuneConfig, finetune
from hmark.lora import LoRAConfig, attach_lora
from hmark.unet import SelfAttention, UNetModel

from conftest import tiny_unet_config


@pytest.fixture
def model():
    torch.manual_seed(7)
    return UNetModel(tiny_unet_config())


class TestAttachLora:
    def test_fresh_adapters_are_identity(self, model):
        x = torch.randn(2, 3, 16, 16)
        before = model(x, 3)
        handle = attach_lora(model, LoRAConfig(rank=4))
        after = model(x, 3)
        handle.detach()
        assert torch.equal(before, after)

    def test_trainable_count_matches_formula(self, model):
        cfg = LoRAConfig(rank=8)
        handle = attach_lora(model, cfg)
        expected = 0
        for _, _, wrapper, original in handle.sites:
            d_out, d_in = original.weight.shape
            expected += cfg.rank * (d_in + d_out)
        assert handle.trainable_parameter_count() == expected
        # base weights frozen, adapters trainable
        trainable = [p for p in model.parameters() if p.requires_grad]
        assert sum(p.numel() for p in trainable) == expected
        handle.detach()

    def test_detach_restores_exactly(self, model):
        x = torch.randn(1, 3, 16, 16)
        before = model(x, 1)
        state_before = {k: v.clone() for k, v in model.state_dict().items()}
        handle = attach_lora(model, LoRAConfig(rank=4))
        # perturb adapters so the adapted model genuinely differs
        with torch.no_grad():
            for p in handle.parameters():
                p.add_(0.5)
        assert not torch.equal(model(x, 1), before)
        handle.detach()
        assert torch.equal(model(x, 1), before)
        assert set(model.state_dict()) == set(state_before)
        for k, v in model.state_dict().items():
            assert torch.equal(v, state_before[k])

    def test_unknown_target_rejected(self, model):
        with pytest.raises(ValueError, match="unknown target layer"):
            attach_lora(model, LoRAConfig(rank=4, target_layers=("q", "bogus")))

    def test_identity_at_init_for_every_rank(self, model):
        x = torch.randn(1, 3, 16, 16)
        base = model(x, 2)
        for rank in (8, 16, 32):
            handle = attach_lora(model, LoRAConfig(rank=rank))
            assert torch.equal(model(x, 2), base)
            handle.detach()

    def test_merged_state_dict_reproduces_adapted_model(self, model):
        handle = attach_lora(model, LoRAConfig(rank=4), seed=3)
        with torch.no_grad():
            for p in handle.parameters():
                p.normal_(std=0.05)
        x = torch.randn(2, 3, 16, 16)
        adapted_out = model(x, 4)
        merged = UNetModel(model.config)
        merged.load_state_dict(handle.merged_state_dict())
        handle.detach()
        assert torch.allclose(merged(x, 4), adapted_out, atol=1e-6)


class TestFinetune:
    @pytest.fixture
    def toy_data(self):
        g = torch.Generator().manual_seed(5)
        ramp = torch.linspace(-0.6, 0.6, 16).reshape(1, 1, 16, 1)
        return (ramp + 0.05 * torch.randn(48, 3, 16, 16, generator=g)).clamp(-1, 1)

    def test_zero_steps_leaves_model_unchanged(self, model, toy_data, tmp_path):
        sched = make_schedule(8, 1e-4, 0.05)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        result, ckpts = finetune(model, toy_data, sched, FinetuneConfig(steps=0), tmp_path)
        assert result is model and ckpts == []
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_lora_run_checkpoints_and_restores_base(self, model, toy_data, tmp_path):
        sched = make_schedule(8, 1e-4, 0.05)
        base_state = {k: v.clone() for k, v in model.state_dict().items()}
        cfg = FinetuneConfig(
            script="lora", steps=6, batch_size=8, checkpoint_every=3,
            warmup_steps=2, lora=LoRAConfig(rank=4), seed=1,
        )
        tuned, ckpts = finetune(model, toy_data, sched, cfg, tmp_path)
        assert [p.name for p in ckpts] == ["step_000003.pt", "step_000006.pt"]
        # in-memory model restored to base after detach
        for k, v in model.state_dict().items():
            assert torch.equal(v, base_state[k])
        # returned model differs from base (adapters trained)
        loaded, _, extra = load_backbone(ckpts[-1])
        assert extra["script"] == "lora" and extra["step"] == 6
        x = torch.randn(1, 3, 16, 16)
        assert torch.allclose(loaded(x, 2), tuned(x, 2), atol=1e-7)

    def test_training_reduces_loss_direction(self, model, toy_data, tmp_path):
        from hmark.diffusion import denoising_loss

        sched = make_schedule(8, 1e-4, 0.05)
        gen = torch.Generator().manual_seed(9)
        model.eval()
        with torch.no_grad():
            before = float(denoising_loss(model, toy_data, sched, gen))
        cfg = FinetuneConfig(script="unet_full", steps=30, batch_size=16,
                             checkpoint_every=30, warmup_steps=5, lr=1e-3,
                             use_ema=False, seed=2)
        tuned, _ = finetune(model, toy_data, sched, cfg, tmp_path)
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            after = float(denoising_loss(tuned, toy_data, sched, gen))
        assert after < before

    def test_checkpoint_determinism(self, toy_data, tmp_path):
        sched = make_schedule(8, 1e-4, 0.05)
        outs = []
        for run in range(2):
            torch.manual_seed(7)
            m = UNetModel(tiny_unet_config())
            cfg = FinetuneConfig(script="lora", steps=4, batch_size=8,
                                 checkpoint_every=4, warmup_steps=2,
                                 lora=LoRAConfig(rank=4), seed=3)
            _, ckpts = finetune(m, toy_data, sched, cfg, tmp_path / f"run{run}")
            outs.append(torch.load(ckpts[-1], weights_only=False)["state_dict"])
        for k in outs[0]:
            assert torch.equal(outs[0][k], outs[1][k]), k

    def test_ema_checkpoint_uses_shadow_weights(self, model, toy_data, tmp_path):
        sched = make_schedule(8, 1e-4, 0.05)
        cfg = FinetuneConfig(script="unet_full", steps=4, batch_size=8,
                             checkpoint_every=4, warmup_steps=1, lr=5e-3,
                             ema_decay=0.5, seed=4)
        assert cfg.effective_ema
        tuned, ckpts = finetune(model, toy_data, sched, cfg, tmp_path)
        loaded, _, _ = load_backbone(ckpts[-1])
        # shadow differs from the live (non-EMA) weights after large-lr steps
        live = model.state_dict()
        shadow = loaded.state_dict()
        diffs = [not torch.equal(live[k], shadow[k]) for k in live]
        assert any(diffs)

    def test_unknown_script_rejected(self):
        with pytest.raises(ValueError):
            FinetuneConfig(script="dreambooth")
