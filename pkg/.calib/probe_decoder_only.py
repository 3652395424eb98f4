"""Diagnostic: can the decoder learn bits from a FROZEN random encoder?"""
import time
import numpy as np
import torch
import torch.nn.functional as F

from hmark.data import synth_images
from hmark.diffusion import make_schedule, train_backbone
from hmark.codec import CodecConfig, SecretEncoder, PixelDecoder, calibrate_encoder_scale, embed_with_residual, detect
from hmark.distortions import sample_distortion, apply_distortion
from hmark.unet import UNetConfig, UNetModel

t0 = time.time()
torch.manual_seed(1)
ucfg = UNetConfig(image_size=32, base_channels=32, channel_mults=(1,2,4), time_dim=128, attn_levels=(2,))
model = UNetModel(ucfg)
schedule = make_schedule(200, 1e-4, 0.09)
train = synth_images(1024, 32, seed=10)
holdout = synth_images(256, 32, seed=11)
# quick backbone
train_backbone(model, train, schedule, epochs=2, batch_size=64, lr=2e-4, seed=2)
for p in model.parameters(): p.requires_grad_(False)
print(f"[{time.time()-t0:.0f}s] backbone done", flush=True)

ccfg = CodecConfig(secret_bits=8, bottleneck_shape=ucfg.bottleneck_shape)
torch.manual_seed(3)
enc = SecretEncoder(ccfg)
scale = calibrate_encoder_scale(model, enc, train[:64], schedule, target_pixel_rms=0.03, seed=0)
for p in enc.parameters(): p.requires_grad_(False)
# confirm response
with torch.no_grad():
    base = embed_with_residual(model, train[:64], None, schedule, clamp=False)
    s = torch.from_numpy(np.random.default_rng(5).integers(0,2,(64,8)).astype(np.float32))
    d, _ = enc(s)
    resp = embed_with_residual(model, train[:64], d, schedule, clamp=False) - base
    print(f"scale={scale:.1f} pixel response rms={float(resp.pow(2).mean().sqrt()):.4f}", flush=True)

for DISTORT in (False, True):
    torch.manual_seed(4)
    dec = PixelDecoder(ccfg)
    opt = torch.optim.Adam(dec.parameters(), lr=3e-4)
    rng = np.random.default_rng(7)
    drng = np.random.default_rng(8)
    for epoch in range(8):
        order = rng.permutation(1024)
        for start in range(0, 1024-15, 16):
            x = train[order[start:start+16]]
            s = torch.from_numpy(rng.integers(0,2,(16,8)).astype(np.float32))
            with torch.no_grad():
                delta, _ = enc(s)
                xw = embed_with_residual(model, x, delta, schedule)
                if DISTORT:
                    xw = apply_distortion(xw, sample_distortion(drng))
            det_w, sec_w = dec(xw)
            det_c, _ = dec(x)
            loss = (F.binary_cross_entropy_with_logits(det_w, torch.ones(16))
                    + F.binary_cross_entropy_with_logits(det_c, torch.zeros(16))
                    + 3.0 * F.binary_cross_entropy_with_logits(sec_w, s))
            opt.zero_grad(); loss.backward(); opt.step()
        # eval
        with torch.no_grad():
            se = torch.from_numpy(np.random.default_rng(9).integers(0,2,(256,8)).astype(np.float32))
            de, _ = enc(se)
            hw = embed_with_residual(model, holdout, de, schedule)
            res = detect(dec, hw)
            accbit = float((torch.from_numpy(res.bits.astype(np.float32)) == se).float().mean())
            accwm = float(res.detected.mean())
        print(f"[{time.time()-t0:.0f}s] distort={DISTORT} epoch={epoch} acc_wm(wm)={accwm:.3f} acc_bit={accbit:.3f}", flush=True)
