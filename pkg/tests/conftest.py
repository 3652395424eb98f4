import numpy as np
import pytest
import torch

from hmark.diffusion import make_schedule
from hmark.unet import UNetConfig, UNetModel


def tiny_unet_config(image_size=16, base=8):
    return UNetConfig(
        image_size=image_size,
        base_channels=base,
        channel_mults=(1, 2),
        time_dim=32,
        attn_levels=(1,),
    )


@pytest.fixture
def tiny_unet():
    torch.manual_seed(0)
    return UNetModel(tiny_unet_config())


@pytest.fixture
def tiny_schedule():
    return make_schedule(T=10, beta_start=1e-4, beta_end=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
