"""Calibration probe: stage-1 learning speed at desk scale."""
import json, time
import numpy as np
import torch

from hmark.data import synth_images
from hmark.diffusion import make_schedule, train_backbone
from hmark.losses import LossWeights
from hmark.train_codec import TrainConfig, train_codec
from hmark.unet import UNetConfig, UNetModel

t0 = time.time()
torch.manual_seed(1)
ucfg = UNetConfig(image_size=32, base_channels=32, channel_mults=(1, 2, 4),
                  time_dim=128, attn_levels=(2,))
model = UNetModel(ucfg)
schedule = make_schedule(200, 5e-3, 0.09)
train = synth_images(1024, 32, seed=10)
holdout = synth_images(256, 32, seed=11)
print(f"[{time.time()-t0:.0f}s] data ready", flush=True)

hist = train_backbone(model, train, schedule, epochs=3, batch_size=64, lr=2e-4,
                      seed=2, eval_data=holdout[:128],
                      log_fn=lambda r: print(f"[{time.time()-t0:.0f}s] backbone {r}", flush=True))

cfg = TrainConfig(epochs=12, batch_size=16, secret_bits=8, eval_every=1)
def log(rec):
    keys = ("epoch", "loss_wm", "loss_secret", "loss_image", "eval_acc_wm", "eval_acc_bit", "eval_mse")
    print(f"[{time.time()-t0:.0f}s] codec " + " ".join(f"{k}={rec.get(k):.4g}" if isinstance(rec.get(k), float) else f"{k}={rec.get(k)}" for k in keys), flush=True)
train_codec(train, model, schedule, cfg, LossWeights(), seed=3,
            eval_data=holdout, log_fn=log)
print(f"[{time.time()-t0:.0f}s] done", flush=True)
