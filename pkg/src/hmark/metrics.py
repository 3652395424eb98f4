"""Detection/recovery metrics, fidelity measures, and the evaluation harness.

Classification metrics are pure functions of confusion counts; undefined
ratios (zero denominators) are reported as None, distinct from 0. ROC is
a sweep over the unique scores with trapezoidal area, which equals the
rank statistic P(score+ > score-) + 0.5 P(=) under ties.

SSIM uses the standard constants (k1=0.01, k2=0.03, L=1) with an 11x11
Gaussian window (sigma 1.5) evaluated on fully interior windows only, on
images mapped to [0, 1]. The Frechet feature distance is

    ||mu_a - mu_b||^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^{1/2})

over pooled features of the fixed extractor, with a ridge on both
covariances; the matrix square root escalates the ridge and warns if it
fails to produce a finite real result.

``evaluate_run`` mirrors the distortion-table layout: one row per
distortion family (identity first), then an average row. Evaluation-time
distortion parameters are resampled per image from the run seed, and
every applied spec lands in the report manifest, so reports are
reproducible from their manifests.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .bch import BCHParams, bch_decode, format_bitstring, parse_bitstring
from .codec import PixelDecoder, detect
from .data import load_image, read_manifest
from .distortions import (
    PARAM_RANGES,
    SAMPLED_KINDS,
    DistortionSpec,
    apply_distortion,
    identity_spec,
)
from .perceptual import FeatureExtractor, perceptual_distance


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


def classification_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    if c.total == 0:
        raise ValueError("empty confusion table")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else None
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassificationMetrics(accuracy, precision, recall, f1)


def bit_accuracy(s, s_hat) -> float:
    a = np.asarray(s).ravel()
    b = np.asarray(s_hat).ravel()
    if a.shape != b.shape:
        raise ValueError(f"bit length mismatch {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


def roc_auc(scores, labels) -> tuple[np.ndarray, float]:
    """(curve points as (fpr, tpr) rows, AUC). Requires both classes."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs both classes present")
    points = [(0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        points.append((float(np.mean(neg >= thr)), float(np.mean(pos >= thr))))
    points.append((1.0, 1.0))
    pts = np.asarray(points)
    return pts, float(np.trapezoid(pts[:, 1], pts[:, 0]))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g1 = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    g2 = g1[:, None] * g1[None, :]
    return g2 / g2.sum()


def ssim(x: torch.Tensor, y: torch.Tensor, k1: float = 0.01, k2: float = 0.03,
         window_size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over interior windows, channels, and batch; inputs in [0, 1]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < window_size or x.shape[-2] < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} window")
    x = x.to(torch.float64)
    y = y.to(torch.float64)
    c = x.shape[1]
    w = _gaussian_window(window_size, sigma).reshape(1, 1, window_size, window_size)
    w = w.expand(c, 1, window_size, window_size)

    def wmean(t):
        return F.conv2d(t, w, groups=c)

    mu_x, mu_y = wmean(x), wmean(y)
    var_x = wmean(x * x) - mu_x ** 2
    var_y = wmean(y * y) - mu_y ** 2
    cov = wmean(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


@dataclass(frozen=True)
class FidelityMetrics:
    mse: float
    ssim: float
    perceptual: float


def fidelity_metrics(x: torch.Tensor, y: torch.Tensor,
                     extractor: FeatureExtractor) -> FidelityMetrics:
    """MSE on [-1, 1] pixels, SSIM on [0, 1], perceptual via the frozen extractor."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(torch.mean((x - y) ** 2))
    s = ssim((x + 1) / 2, (y + 1) / 2)
    p = float(perceptual_distance(x, y, extractor))
    return FidelityMetrics(mse=mse, ssim=s, perceptual=p)


def frechet_from_features(fa: np.ndarray, fb: np.ndarray, ridge: float = 1e-6) -> float:
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.size == 0 or fb.size == 0:
        raise ValueError("both feature sets must be non-empty")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    dim = fa.shape[1]
    cov_a = np.cov(fa, rowvar=False).reshape(dim, dim) + ridge * np.eye(dim)
    cov_b = np.cov(fb, rowvar=False).reshape(dim, dim) + ridge * np.eye(dim)
    current = ridge
    for _ in range(6):
        sqrt_ab, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
        if np.isfinite(sqrt_ab).all():
            imag_scale = np.abs(sqrt_ab.imag).max() if np.iscomplexobj(sqrt_ab) else 0.0
            if imag_scale < 1e-6 * max(np.abs(sqrt_ab.real).max(), 1.0):
                trace_term = np.trace(cov_a + cov_b - 2 * sqrt_ab.real)
                return float(np.sum((mu_a - mu_b) ** 2) + trace_term)
        current *= 10
        warnings.warn(f"matrix sqrt unstable; raising covariance ridge to {current:g}")
        cov_a = cov_a + current * np.eye(dim)
        cov_b = cov_b + current * np.eye(dim)
    raise FloatingPointError("matrix square root failed despite ridge escalation")


def frechet_feature_distance(set_a: torch.Tensor, set_b: torch.Tensor,
                             extractor: FeatureExtractor, ridge: float = 1e-6) -> float:
    with torch.no_grad():
        fa = extractor.pooled_features(set_a).numpy()
        fb = extractor.pooled_features(set_b).numpy()
    return frechet_from_features(fa, fb, ridge=ridge)


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

EVAL_ROW_ORDER = ("identity",) + SAMPLED_KINDS


@dataclass
class MetricsReport:
    rows: list[dict]
    average: dict
    manifest: dict
    fidelity: Optional[dict] = None
    skipped_images: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "average": self.average,
            "manifest": self.manifest,
            "fidelity": self.fidelity,
            "skipped_images": self.skipped_images,
            "extra": self.extra,
        }


def _spec_for(kind: str, rng: np.random.Generator) -> DistortionSpec:
    if kind == "identity":
        return identity_spec()
    name, lo, hi = PARAM_RANGES[kind]
    return DistortionSpec(
        kind=kind,
        params={name: float(rng.uniform(lo, hi))},
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def decoder_checkpoint_id(decoder: PixelDecoder) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(decoder.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()[:16]


def evaluate_run(
    image_dir,
    decoder: PixelDecoder,
    distortions: Sequence[str | DistortionSpec] = EVAL_ROW_ORDER,
    seed: int = 0,
    ecc: Optional[BCHParams] = None,
    secret_bits_effective: Optional[int] = None,
    batch_size: int = 64,
) -> MetricsReport:
    """Per-distortion detection/recovery table over a manifested image directory.

    The directory manifest labels each image ``wm`` (with its secret) or
    ``clean``. Each row resamples its distortion parameters per image from
    the run seed unless a concrete spec is given. With ``ecc`` set, decoded
    codewords are error-corrected before bit accuracy, which is then
    measured on the first ``secret_bits_effective`` data bits.
    """
    image_dir = Path(image_dir)
    manifest = read_manifest(image_dir)
    records = manifest["records"]

    images, labels, secrets = [], [], []
    skipped = 0
    for rec in records:
        try:
            images.append(load_image(image_dir / rec["file"]))
        except Exception:
            skipped += 1
            continue
        labels.append(1 if rec["role"] == "wm" else 0)
        secrets.append(rec.get("secret"))
    if not images:
        raise ValueError(f"no readable images in {image_dir}")
    x_all = torch.stack(images)
    labels_arr = np.asarray(labels)

    rows = []
    row_specs: dict[str, list[str]] = {}
    for row_idx, row in enumerate(distortions):
        fixed_spec = row if isinstance(row, DistortionSpec) else None
        kind = row.kind if fixed_spec else row
        rng = np.random.default_rng((seed, 1000 + row_idx))
        distorted, specs = [], []
        for i in range(x_all.shape[0]):
            spec = fixed_spec or _spec_for(kind, rng)
            specs.append(spec.to_json())
            distorted.append(apply_distortion(x_all[i : i + 1], spec)[0])
        row_specs[kind] = specs
        xd = torch.stack(distorted)

        p_wm = np.empty(xd.shape[0])
        bits = []
        for start in range(0, xd.shape[0], batch_size):
            res = detect(decoder, xd[start : start + batch_size])
            p_wm[start : start + res.p_wm.shape[0]] = res.p_wm
            bits.append(res.bits)
        bits = np.concatenate(bits, axis=0)
        detected = p_wm > 0.5

        tp = int(np.sum(detected & (labels_arr == 1)))
        tn = int(np.sum(~detected & (labels_arr == 0)))
        fp = int(np.sum(detected & (labels_arr == 0)))
        fn = int(np.sum(~detected & (labels_arr == 1)))
        cm = classification_metrics(ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn))

        accs = []
        for i in np.flatnonzero(labels_arr == 1):
            truth = parse_bitstring(secrets[i])
            predicted = bits[i]
            if ecc is not None:
                decoded, _, _ = bch_decode(ecc, predicted)
                nbits = secret_bits_effective or decoded.size
                accs.append(bit_accuracy(truth[:nbits], decoded[:nbits]))
            else:
                accs.append(bit_accuracy(truth, predicted))
        acc_bit = _mean_or_none(accs)

        n_clean = int(np.sum(labels_arr == 0))
        fpr = fp / n_clean if n_clean else None
        try:
            _, auc = roc_auc(p_wm, labels_arr)
        except ValueError:
            auc = None
        rows.append({
            "distortion": kind,
            "acc_wm": cm.accuracy,
            "acc_bit": acc_bit,
            "precision": cm.precision,
            "recall": cm.recall,
            "f1": cm.f1,
            "fpr": fpr,
            "auc": auc,
            "n_wm": int(np.sum(labels_arr == 1)),
            "n_clean": n_clean,
        })

    metric_keys = ("acc_wm", "acc_bit", "precision", "recall", "f1", "fpr", "auc")
    average = {k: _mean_or_none([r[k] for r in rows]) for k in metric_keys}
    average["distortion"] = "average"

    report_manifest = {
        "image_dir": str(image_dir),
        "seed": seed,
        "checkpoint_id": decoder_checkpoint_id(decoder),
        "ecc": None if ecc is None else {"m": ecc.m, "n": ecc.n, "k": ecc.k, "t": ecc.t},
        "distortion_specs": row_specs,
        "n_records": len(records),
    }
    return MetricsReport(
        rows=rows, average=average, manifest=report_manifest, skipped_images=skipped
    )
