"""Dataset synthesis, lossless image I/O, and per-directory manifests.

Images live on disk as PNG (lossless, so distortion experiments are not
contaminated by storage compression) in flat directories, each holding a
single ``manifest.json`` that records every image's provenance: its role
(orig / wm / adv / benign / clean), the secret it carries (if any), the
seeds involved, and the file it was derived from.

The synthetic dataset is procedural 32x32-style RGB content: a smooth
two-color gradient background plus a soft-edged disk and bar with random
geometry and colors. Low-frequency, continuous-parameter content keeps a
small denoiser learnable on CPU while leaving the generative task
non-trivial.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1


def synth_images(n: int, image_size: int, seed: int) -> torch.Tensor:
    """(n, 3, S, S) float32 batch in [-1, 1]."""
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / max(s - 1, 1)
    out = np.empty((n, 3, s, s), dtype=np.float64)
    for i in range(n):
        c0, c1 = rng.uniform(-0.85, 0.85, size=(2, 3))
        wx, wy = rng.normal(size=2)
        norm = np.hypot(wx, wy) + 1e-9
        g = (xx * wx + yy * wy) / norm
        g = (g - g.min()) / (np.ptp(g) + 1e-9)
        img = c0[:, None, None] * (1 - g) + c1[:, None, None] * g

        # soft disk
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        r = rng.uniform(0.12, 0.3)
        col = rng.uniform(-0.9, 0.9, size=3)
        dist = np.hypot(xx - cx, yy - cy)
        mask = 1.0 / (1.0 + np.exp((dist - r) / 0.02))
        img = img * (1 - mask) + col[:, None, None] * mask

        # soft axis-aligned bar
        x0 = rng.uniform(0.1, 0.6)
        width = rng.uniform(0.08, 0.25)
        col2 = rng.uniform(-0.9, 0.9, size=3)
        horizontal = rng.integers(2)
        coord = yy if horizontal else xx
        bar = 1.0 / (1.0 + np.exp((np.abs(coord - x0 - width / 2) - width / 2) / 0.015))
        img = img * (1 - 0.85 * bar) + col2[:, None, None] * 0.85 * bar

        out[i] = img
    return torch.from_numpy(np.clip(out, -1.0, 1.0)).float()


def tensor_to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).numpy()


def uint8_to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0


def save_image_batch(directory, batch: torch.Tensor, prefix: str = "img",
                     start: int = 0) -> list[str]:
    """Write each image as PNG; returns the relative file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    arr = tensor_to_uint8(batch)
    for i in range(arr.shape[0]):
        name = f"{prefix}_{start + i:05d}.png"
        Image.fromarray(arr[i].transpose(1, 2, 0), mode="RGB").save(directory / name)
        names.append(name)
    return names


def load_image(path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def load_images(directory, names) -> torch.Tensor:
    directory = Path(directory)
    return torch.stack([load_image(directory / n) for n in names])


def list_images(directory) -> list[str]:
    return sorted(p.name for p in Path(directory).glob("*.png"))


def write_manifest(directory, role: str, records: list[dict], extra: dict | None = None) -> None:
    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "role": role,
        "records": records,
        "extra": extra or {},
    }
    path = Path(directory) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest version in {directory}")
    return doc


def make_records(names: list[str], role: str, secret: str | None = None,
                 sources: list[str] | None = None, seed: int | None = None) -> list[dict]:
    records = []
    for i, name in enumerate(names):
        rec = {"file": name, "role": role}
        if secret is not None:
            rec["secret"] = secret
        if sources is not None:
            rec["source"] = sources[i]
        if seed is not None:
            rec["seed"] = seed
        records.append(rec)
    return records
