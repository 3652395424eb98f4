"""Paired-run directional checks (reduced scale, seeded).

Slow: each case trains small models for real. Directions, not absolute
levels, are asserted.
"""

import numpy as np
import pytest
import torch

from hmark.data import synth_images
from hmark.diffusion import denoising_loss, make_schedule, train_backbone
from hmark.finetune import FinetuneConfig, finetune
from hmark.lora import LoRAConfig
from hmark.losses import LossWeights
from hmark.train_codec import TrainConfig, eval_codec, train_codec
from hmark.unet import UNetConfig, UNetModel

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def small_backbone():
    torch.manual_seed(0)
    cfg = UNetConfig(image_size=32, base_channels=16, channel_mults=(1, 2, 4),
                     time_dim=64, attn_levels=(2,))
    model = UNetModel(cfg)
    schedule = make_schedule(50, 5e-3, 0.09)
    train = synth_images(512, 32, seed=40)
    holdout = synth_images(192, 32, seed=41)
    train_backbone(model, train, schedule, epochs=3, batch_size=64, lr=3e-4, seed=1)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, schedule, train, holdout


def test_distortion_training_improves_distorted_bit_accuracy(small_backbone):
    model, schedule, train, holdout = small_backbone
    results = {}
    for p_distort in (0.0, 1.0):
        cfg = TrainConfig(epochs=10, batch_size=16, secret_bits=8,
                          p_distort=p_distort, eval_every=100)
        encoder, decoder, _ = train_codec(train, model, schedule, cfg,
                                          LossWeights(), seed=5)
        accs = [
            eval_codec(model, encoder, decoder, schedule, holdout,
                       seed=60 + rep, distorted=True)["acc_bit"]
            for rep in range(3)
        ]
        results[p_distort] = float(np.mean(accs))
    assert results[1.0] > results[0.0], results


def test_higher_lora_rank_fits_at_least_as_well(small_backbone):
    model, schedule, train, _ = small_backbone
    data = synth_images(256, 32, seed=42)
    losses = {}
    for rank in (8, 32):
        work = UNetModel(model.config)
        work.load_state_dict(model.state_dict())
        cfg = FinetuneConfig(script="lora", steps=200, batch_size=16,
                             warmup_steps=20, checkpoint_every=200,
                             lora=LoRAConfig(rank=rank), seed=3)
        tuned, _ = finetune(work, data, schedule, cfg, out_dir=f"/tmp/lora_rank_{rank}")
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            losses[rank] = float(denoising_loss(tuned, data, schedule, gen))
    # equal-steps capacity ordering, within a small noise band
    assert losses[32] <= losses[8] * 1.05, losses
