"""Four-stage experiment orchestration over a single output root.

    stage 1   dataset synthesis, backbone pretraining (both auto-built,
              stamped prerequisites), then codec training
    stage 2   embed the fixed secret across the protected set -> wm/
              plus a held-out mixed eval set and fidelity numbers
    stage 3   adversary finetune on wm/ (and, when enabled, a control
              finetune on the clean originals for false-attribution runs)
    stage 4   closed-box evaluation: sample suspect/benign/control models,
              detect, emit reports, trend data, and plots

Every stage directory carries a content stamp derived from the
stage-relevant config subset and its prerequisites' stamps; re-running a
completed stage with unchanged inputs is a no-op, and any change
upstream invalidates everything downstream. Reports embed the config
hash, so numbers trace back to manifests and configuration.

Stage 4 reads only image directories produced by sampling - never model
internals - which keeps the detector honest to closed-box access.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .bch import bch_build, bch_encode, format_bitstring, parse_bitstring
from .codec import (
    SecretEncoder,
    PixelDecoder,
    detect,
    embed,
    load_codec,
    random_secret,
    save_codec,
)
from .data import (
    list_images,
    load_images,
    make_records,
    read_manifest,
    save_image_batch,
    synth_images,
    write_manifest,
)
from .diffusion import (
    NoiseSchedule,
    load_backbone,
    make_schedule,
    sample,
    save_backbone,
    train_backbone,
    write_diffusion_config,
)
from .finetune import FinetuneConfig, finetune
from .lora import LoRAConfig
from .losses import LossWeights
from .metrics import (
    MetricsReport,
    bit_accuracy,
    evaluate_run,
    fidelity_metrics,
    roc_auc,
)
from .perceptual import FeatureExtractor
from .plots import roc_plot, trend_plot, sweep_plot
from .radioactivity import radioactivity_probe
from .train_codec import TrainConfig, train_codec
from .unet import UNetConfig, UNetModel

OUTPUT_ROOT_ENV = "HMARK_OUTPUT_ROOT"
STAMP_NAME = ".stamp"

DEFAULT_SEEDS = {
    "data": 101,
    "backbone": 202,
    "stage1": 303,
    "stage2": 404,
    "stage3": 505,
    "stage4": 606,
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class MissingPrerequisite(RuntimeError):
    """A stage was requested before its input stage completed."""


@dataclass
class ExperimentConfig:
    output_root: str = ""
    # backbone / schedule
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    time_dim: int = 128
    attn_levels: tuple[int, ...] = (2,)
    timesteps: int = 200
    beta_start: float = 5e-3
    beta_end: float = 0.09
    # dataset sizes
    n_train: int = 4096
    n_orig: int = 1024
    n_holdout: int = 512
    n_generated_train: int = 1024
    # backbone pretraining
    backbone_epochs: int = 10
    backbone_batch: int = 64
    backbone_lr: float = 2e-4
    # stage-1 codec training
    secret_bits: int = 8
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 3e-4
    p_distort: float = 1.0
    embed_strength: float = 0.025
    lambda_wm: float = 5.0
    lambda_secret: float = 3.0
    lambda_image: float = 1.5
    lambda_lpips: float = 2.0
    early_stop_acc_wm: Optional[float] = None
    early_stop_acc_bit: Optional[float] = None
    # stage 2
    secret: str = "10110010"
    ecc_m: Optional[int] = None
    ecc_t: Optional[int] = None
    # stage 3
    finetune_script: str = "lora"
    lora_rank: int = 32
    lora_alpha: Optional[float] = None
    finetune_steps: int = 9000
    finetune_batch: int = 16
    finetune_lr: Optional[float] = None
    warmup_steps: int = 500
    checkpoint_every: int = 500
    clean_control: bool = True
    # stage 4
    eval_n: int = 256
    # seeds, one named stream per stage
    seeds: dict = field(default_factory=lambda: dict(DEFAULT_SEEDS))

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attn_levels = tuple(self.attn_levels)
        merged = dict(DEFAULT_SEEDS)
        merged.update(self.seeds or {})
        self.seeds = merged
        if not self.output_root:
            self.output_root = os.environ.get(OUTPUT_ROOT_ENV, "")
        if self.ecc_enabled:
            code = bch_build(self.ecc_m, self.ecc_t)
            if self.secret_bits != code.n:
                raise ConfigError(
                    f"ecc mode needs secret_bits == n = {code.n}, got {self.secret_bits}"
                )
            if len(parse_bitstring(self.secret)) > code.k:
                raise ConfigError(f"secret longer than k={code.k} data bits")
        else:
            if len(parse_bitstring(self.secret)) != self.secret_bits:
                raise ConfigError(
                    f"secret length {len(parse_bitstring(self.secret))} != "
                    f"secret_bits {self.secret_bits}"
                )

    # -- serialization -----------------------------------------------------
    @property
    def ecc_enabled(self) -> bool:
        return self.ecc_m is not None and self.ecc_t is not None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attn_levels"] = list(self.attn_levels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_root")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    # -- derived objects ----------------------------------------------------
    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_mults=self.channel_mults,
            time_dim=self.time_dim,
            attn_levels=self.attn_levels,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            p_distort=self.p_distort,
            secret_bits=self.secret_bits,
            embed_strength=self.embed_strength,
            early_stop_acc_wm=self.early_stop_acc_wm,
            early_stop_acc_bit=self.early_stop_acc_bit,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_wm, self.lambda_secret,
                           self.lambda_image, self.lambda_lpips)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        return FinetuneConfig(
            script=self.finetune_script,
            steps=self.finetune_steps,
            batch_size=self.finetune_batch,
            lr=self.finetune_lr,
            warmup_steps=self.warmup_steps,
            checkpoint_every=self.checkpoint_every,
            lora=LoRAConfig(rank=self.lora_rank, alpha=self.lora_alpha),
            seed=seed,
        )

    def embedded_payload(self) -> np.ndarray:
        """The bit vector actually fed to the encoder (codeword in ECC mode)."""
        raw = parse_bitstring(self.secret)
        if not self.ecc_enabled:
            return raw
        return bch_encode(bch_build(self.ecc_m, self.ecc_t), raw)

    def root(self) -> Path:
        if not self.output_root:
            raise ConfigError(f"no output root configured (set {OUTPUT_ROOT_ENV} or config)")
        return Path(self.output_root)


# ---------------------------------------------------------------------------
# stamps
# ---------------------------------------------------------------------------

def _stamp_value(parts: dict) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


def _read_stamp(directory: Path) -> Optional[str]:
    p = directory / STAMP_NAME
    return p.read_text().strip() if p.exists() else None


def _write_stamp(directory: Path, value: str) -> None:
    (directory / STAMP_NAME).write_text(value + "\n")


def _subset(cfg: ExperimentConfig, keys: tuple[str, ...]) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in keys}


_DATA_KEYS = ("image_size", "n_train", "n_orig", "n_holdout")
_BACKBONE_KEYS = ("image_size", "base_channels", "channel_mults", "time_dim",
                  "attn_levels", "timesteps", "beta_start", "beta_end",
                  "backbone_epochs", "backbone_batch", "backbone_lr")
_STAGE1_KEYS = ("secret_bits", "epochs", "batch_size", "learning_rate", "p_distort", "embed_strength",
                "lambda_wm", "lambda_secret", "lambda_image", "lambda_lpips",
                "early_stop_acc_wm", "early_stop_acc_bit", "n_generated_train")
_STAGE2_KEYS = ("secret", "ecc_m", "ecc_t")
_STAGE3_KEYS = ("finetune_script", "lora_rank", "lora_alpha", "finetune_steps",
                "finetune_batch", "finetune_lr", "warmup_steps", "checkpoint_every",
                "clean_control")
_STAGE4_KEYS = ("eval_n",)


# ---------------------------------------------------------------------------
# stage builders
# ---------------------------------------------------------------------------

def _ensure_data(cfg: ExperimentConfig, force: bool = False) -> str:
    root = cfg.root()
    data_dir = root / "data"
    stamp = _stamp_value({**_subset(cfg, _DATA_KEYS), "seed": cfg.seeds["data"]})
    if not force and _read_stamp(data_dir) == stamp:
        return stamp
    seed = cfg.seeds["data"]
    for name, n, offset in (("train", cfg.n_train, 0),
                            ("orig", cfg.n_orig, 1),
                            ("holdout", cfg.n_holdout, 2)):
        d = data_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.png"):
            old.unlink()
        batch = synth_images(n, cfg.image_size, seed + offset)
        names = save_image_batch(d, batch)
        write_manifest(d, role=name, records=make_records(names, role="clean", seed=seed + offset))
    _write_stamp(data_dir, stamp)
    return stamp


def _ensure_backbone(cfg: ExperimentConfig, force: bool = False) -> str:
    root = cfg.root()
    data_stamp = _ensure_data(cfg, force=False)
    bdir = root / "backbone"
    stamp = _stamp_value({**_subset(cfg, _BACKBONE_KEYS),
                          "seed": cfg.seeds["backbone"], "data": data_stamp})
    if not force and _read_stamp(bdir) == stamp:
        return stamp
    bdir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seeds["backbone"])
    model = UNetModel(cfg.unet_config())
    schedule = cfg.schedule()
    train = load_images(root / "data" / "train", list_images(root / "data" / "train"))
    holdout = load_images(root / "data" / "holdout", list_images(root / "data" / "holdout"))
    log_path = bdir / "train_log.jsonl"
    with log_path.open("w") as fh:
        train_backbone(
            model, train, schedule,
            epochs=cfg.backbone_epochs, batch_size=cfg.backbone_batch,
            lr=cfg.backbone_lr, seed=cfg.seeds["backbone"],
            eval_data=holdout[: min(256, holdout.shape[0])],
            log_fn=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"),
        )
    save_backbone(bdir / "backbone.pt", model, schedule,
                  extra={"config_hash": cfg.config_hash()})
    write_diffusion_config(
        bdir / "config.json", cfg.unet_config(),
        {"T": cfg.timesteps, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        cfg.seeds["backbone"],
    )
    _write_stamp(bdir, stamp)
    return stamp


def _stage1(cfg: ExperimentConfig, force: bool) -> str:
    root = cfg.root()
    backbone_stamp = _ensure_backbone(cfg, force=False)
    sdir = root / "stage1"
    stamp = _stamp_value({**_subset(cfg, _STAGE1_KEYS),
                          "seed": cfg.seeds["stage1"], "backbone": backbone_stamp})
    if not force and _read_stamp(sdir) == stamp:
        return stamp
    sdir.mkdir(parents=True, exist_ok=True)
    model, schedule, _ = load_backbone(root / "backbone" / "backbone.pt")

    gen_dir = sdir / "gen_train"
    gen_dir.mkdir(exist_ok=True)
    for old in gen_dir.glob("*.png"):
        old.unlink()
    generated = sample(model, schedule, cfg.n_generated_train, seed=cfg.seeds["stage1"] + 7)
    gen_names = save_image_batch(gen_dir, generated)
    write_manifest(gen_dir, role="gen_train",
                   records=make_records(gen_names, role="clean", seed=cfg.seeds["stage1"] + 7))

    train = load_images(root / "data" / "train", list_images(root / "data" / "train"))
    holdout = load_images(root / "data" / "holdout", list_images(root / "data" / "holdout"))
    pool = torch.cat([train, generated], dim=0)
    train_codec(
        pool, model, schedule, cfg.train_config(), cfg.loss_weights(),
        seed=cfg.seeds["stage1"], eval_data=holdout, out_dir=sdir,
    )
    _write_stamp(sdir, stamp)
    return stamp


def _require(path: Path, stage: str, needed_by: str) -> None:
    if not path.exists():
        raise MissingPrerequisite(
            f"stage {needed_by} requires {stage} artifacts at {path}; run that stage first"
        )


def _stage2(cfg: ExperimentConfig, force: bool) -> str:
    root = cfg.root()
    sdir = root / "stage2"
    _require(root / "stage1" / "codec_final.pt", "1", "2")
    stage1_stamp = _read_stamp(root / "stage1")
    stamp = _stamp_value({**_subset(cfg, _STAGE2_KEYS),
                          "seed": cfg.seeds["stage2"], "stage1": stage1_stamp})
    if not force and _read_stamp(sdir) == stamp:
        return stamp
    sdir.mkdir(parents=True, exist_ok=True)
    model, schedule, _ = load_backbone(root / "backbone" / "backbone.pt")
    encoder, decoder, _ = load_codec(root / "stage1" / "codec_final.pt")
    payload = cfg.embedded_payload()
    payload_text = format_bitstring(payload)

    # D_wm: the protected originals, one fixed secret across the dataset
    wm_dir = sdir / "wm"
    wm_dir.mkdir(exist_ok=True)
    for old in wm_dir.glob("*.png"):
        old.unlink()
    orig_names = list_images(root / "data" / "orig")
    orig = load_images(root / "data" / "orig", orig_names)
    wm_batches = []
    with torch.no_grad():
        for start in range(0, orig.shape[0], 64):
            wm_batches.append(embed(model, encoder, orig[start:start + 64], payload, schedule))
    wm = torch.cat(wm_batches)
    wm_names = save_image_batch(wm_dir, wm, prefix="wm")
    write_manifest(
        wm_dir, role="wm",
        records=make_records(wm_names, role="wm", secret=payload_text,
                             sources=[f"data/orig/{n}" for n in orig_names],
                             seed=cfg.seeds["stage2"]),
        extra={"secret": cfg.secret, "embedded_payload": payload_text,
               "ecc": {"m": cfg.ecc_m, "t": cfg.ecc_t} if cfg.ecc_enabled else None},
    )

    # held-out mixed eval set with per-batch random secrets
    eval_dir = sdir / "eval"
    eval_dir.mkdir(exist_ok=True)
    for old in eval_dir.glob("*.png"):
        old.unlink()
    holdout_names = list_images(root / "data" / "holdout")
    holdout = load_images(root / "data" / "holdout", holdout_names)
    rng = np.random.default_rng(cfg.seeds["stage2"])
    records = []
    idx = 0
    with torch.no_grad():
        for start in range(0, holdout.shape[0], 32):
            x = holdout[start:start + 32]
            s = random_secret(rng, cfg.secret_bits)
            xw = embed(model, encoder, x, s, schedule)
            names = save_image_batch(eval_dir, xw, prefix="wm", start=idx)
            records += make_records(names, role="wm", secret=format_bitstring(s))
            names = save_image_batch(eval_dir, x, prefix="clean", start=idx)
            records += make_records(names, role="clean")
            idx += x.shape[0]
    write_manifest(eval_dir, role="eval", records=records,
                   extra={"source": "data/holdout", "seed": cfg.seeds["stage2"]})

    extractor = FeatureExtractor(in_channels=3)
    fid = fidelity_metrics(orig, wm, extractor)
    (sdir / "fidelity.json").write_text(json.dumps({
        "mse": fid.mse, "ssim": fid.ssim, "perceptual": fid.perceptual,
        "n_pairs": int(orig.shape[0]),
        "full_scale_reference_8bit": {"mse": 1.49e-4, "ssim": 0.9725, "perceptual": 0.0511},
        "config_hash": cfg.config_hash(),
    }, indent=2, sort_keys=True) + "\n")

    report = evaluate_run(eval_dir, decoder, seed=cfg.seeds["stage2"])
    report.extra["config_hash"] = cfg.config_hash()
    (sdir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    _write_stamp(sdir, stamp)
    return stamp


def _stage3(cfg: ExperimentConfig, force: bool) -> str:
    root = cfg.root()
    sdir = root / "stage3"
    _require(root / "stage2" / "wm", "2", "3")
    stage2_stamp = _read_stamp(root / "stage2")
    stamp = _stamp_value({**_subset(cfg, _STAGE3_KEYS),
                          "seed": cfg.seeds["stage3"], "stage2": stage2_stamp})
    if not force and _read_stamp(sdir) == stamp:
        return stamp
    sdir.mkdir(parents=True, exist_ok=True)

    wm = load_images(root / "stage2" / "wm", list_images(root / "stage2" / "wm"))
    ck_dir = sdir / "checkpoints"
    for old in ck_dir.glob("*.pt") if ck_dir.exists() else []:
        old.unlink()
    model, schedule, _ = load_backbone(root / "backbone" / "backbone.pt")
    finetune(model, wm, schedule, cfg.finetune_config(cfg.seeds["stage3"]), ck_dir)

    if cfg.clean_control:
        orig = load_images(root / "data" / "orig", list_images(root / "data" / "orig"))
        ctl_dir = sdir / "control_checkpoints"
        for old in ctl_dir.glob("*.pt") if ctl_dir.exists() else []:
            old.unlink()
        model_c, schedule_c, _ = load_backbone(root / "backbone" / "backbone.pt")
        finetune(model_c, orig, schedule_c,
                 cfg.finetune_config(cfg.seeds["stage3"] + 1), ctl_dir)
    _write_stamp(sdir, stamp)
    return stamp


def _write_samples(imgs: torch.Tensor, directory: Path, role: str,
                   secret_text=None, seed: int = 0) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("*.png"):
        old.unlink()
    names = save_image_batch(directory, imgs, prefix=role)
    write_manifest(directory, role=role,
                   records=make_records(names, role="wm" if role == "adv" else "clean",
                                        secret=secret_text, seed=seed))


def _stage4(cfg: ExperimentConfig, force: bool) -> str:
    root = cfg.root()
    sdir = root / "stage4"
    _require(root / "stage3" / "checkpoints", "3", "4")
    stage3_stamp = _read_stamp(root / "stage3")
    stamp = _stamp_value({**_subset(cfg, _STAGE4_KEYS),
                          "seed": cfg.seeds["stage4"], "stage3": stage3_stamp})
    if not force and _read_stamp(sdir) == stamp:
        return stamp
    sdir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds["stage4"]
    payload = cfg.embedded_payload()
    payload_text = format_bitstring(payload)
    ecc = bch_build(cfg.ecc_m, cfg.ecc_t) if cfg.ecc_enabled else None
    raw_secret = parse_bitstring(cfg.secret)

    base_model, schedule, _ = load_backbone(root / "backbone" / "backbone.pt")
    _, decoder, _ = load_codec(root / "stage1" / "codec_final.pt")
    checkpoints = sorted((root / "stage3" / "checkpoints").glob("step_*.pt"))
    if not checkpoints:
        raise MissingPrerequisite("stage 3 produced no checkpoints")

    # one benign batch, shared across the checkpoint sweep
    benign_images = sample(base_model, schedule, cfg.eval_n, seed + 2)

    # per-checkpoint trend via the closed-box probe
    trend = []
    final_adv_images = None
    for i, ck in enumerate(checkpoints):
        m, _, extra = load_backbone(ck)
        suspect_images = sample(m, schedule, cfg.eval_n, seed + 10 + i)
        probe = radioactivity_probe(suspect_images, benign_images, decoder, schedule,
                                    n=cfg.eval_n, seed=seed + 10 + i,
                                    secret=payload)
        trend.append({"step": extra["step"], **probe})
        if ck == checkpoints[-1]:
            final_adv_images = suspect_images
    (sdir / "trend.json").write_text(json.dumps(trend, indent=1, sort_keys=True) + "\n")
    trend_plot(trend, sdir / "trend.png")

    # final checkpoint: sampled image directories + distortion table
    adv_dir = sdir / "samples" / "adv"
    benign_dir = sdir / "samples" / "benign"
    _write_samples(final_adv_images, adv_dir, "adv", secret_text=payload_text,
                   seed=seed + 10 + len(checkpoints) - 1)
    _write_samples(benign_images, benign_dir, "benign", seed=seed + 2)

    mixed_dir = sdir / "samples" / "mixed"
    mixed_dir.mkdir(parents=True, exist_ok=True)
    for old in mixed_dir.glob("*.png"):
        old.unlink()
    records = []
    for src, rec_role, secret_text in ((adv_dir, "wm", payload_text), (benign_dir, "clean", None)):
        for name in list_images(src):
            data = (src / name).read_bytes()
            (mixed_dir / f"{rec_role}_{name}").write_bytes(data)
            rec = {"file": f"{rec_role}_{name}", "role": rec_role}
            if secret_text:
                rec["secret"] = secret_text
            records.append(rec)
    write_manifest(mixed_dir, role="stage4_eval", records=records)

    report = evaluate_run(mixed_dir, decoder, seed=seed, ecc=ecc,
                          secret_bits_effective=raw_secret.size if ecc else None)
    report.extra["config_hash"] = cfg.config_hash()
    report.extra["final_checkpoint"] = checkpoints[-1].name

    # identity-row ROC over the mixed set
    mixed = load_images(mixed_dir, [r["file"] for r in records])
    res = detect(decoder, mixed)
    labels = np.array([1 if r["role"] == "wm" else 0 for r in records])
    roc_points, auc = roc_auc(res.p_wm, labels)
    report.extra["identity_auc"] = auc
    roc_plot(roc_points.tolist(), auc, sdir / "roc.png")

    # benign-vs-benign null calibration (independent second benign batch)
    benign_images_2 = sample(base_model, schedule, cfg.eval_n, seed + 50)
    null_probe = radioactivity_probe(benign_images_2, benign_images, decoder, schedule,
                                     n=cfg.eval_n, seed=seed + 50)
    report.extra["benign_vs_benign_auc"] = null_probe["auc"]

    # false-attribution control: model finetuned on clean originals
    if cfg.clean_control and (root / "stage3" / "control_checkpoints").exists():
        ctl_cks = sorted((root / "stage3" / "control_checkpoints").glob("step_*.pt"))
        ctl_model, _, _ = load_backbone(ctl_cks[-1])
        clean_dir = sdir / "samples" / "clean"
        _write_samples(sample(ctl_model, schedule, cfg.eval_n, seed + 3),
                       clean_dir, "clean", seed=seed + 3)
        clean_imgs = load_images(clean_dir, list_images(clean_dir))
        res_clean = detect(decoder, clean_imgs)
        benign_imgs = load_images(benign_dir, list_images(benign_dir))
        res_benign = detect(decoder, benign_imgs)
        control = {
            "fpr": float(np.mean(res_clean.detected)),
            "acc_wm": float(np.mean(~res_clean.detected)),
            "acc_bit_vs_secret": float(np.mean(
                [bit_accuracy(payload, row) for row in res_clean.bits])),
            "decoder_bias_acc_bit": float(np.mean(
                [bit_accuracy(payload, row) for row in res_benign.bits])),
            "n": int(clean_imgs.shape[0]),
        }
        (sdir / "clean_control.json").write_text(
            json.dumps(control, indent=1, sort_keys=True) + "\n")
        report.extra["clean_control"] = control

    (sdir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    _write_stamp(sdir, stamp)
    return stamp


_STAGES = {1: _stage1, 2: _stage2, 3: _stage3, 4: _stage4}


def run_stage(cfg: ExperimentConfig, stage: int, force: bool = False) -> Path:
    """Run one pipeline stage (idempotent); returns the stage directory."""
    if stage not in _STAGES:
        raise ConfigError(f"stage must be 1..4, got {stage}")
    root = cfg.root()
    root.mkdir(parents=True, exist_ok=True)
    cfg.save(root / "config.json")
    _STAGES[stage](cfg, force)
    return root / f"stage{stage}"


def run_all(cfg: ExperimentConfig, force: bool = False) -> Path:
    for stage in (1, 2, 3, 4):
        run_stage(cfg, stage, force=force)
    return cfg.root()


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = {
    # axis -> (config field, first stage the axis invalidates)
    "secret_bits": ("secret_bits", 1),
    "dwm_size": ("n_orig", 1),       # changes the dataset itself
    "lora_rank": ("lora_rank", 3),
    "finetune_steps": ("finetune_steps", 3),
}


def _link_tree(src: Path, dst: Path) -> None:
    if dst.exists():
        return
    dst.mkdir(parents=True, exist_ok=True)
    for item in src.rglob("*"):
        rel = item.relative_to(src)
        if item.is_dir():
            (dst / rel).mkdir(parents=True, exist_ok=True)
        else:
            target = dst / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            try:
                os.link(item, target)
            except OSError:
                target.write_bytes(item.read_bytes())


def _default_secret_for_bits(bits: int, base_secret: str) -> str:
    raw = parse_bitstring(base_secret)
    if raw.size >= bits:
        return format_bitstring(raw[:bits])
    reps = int(np.ceil(bits / raw.size))
    return format_bitstring(np.tile(raw, reps)[:bits])


def sweep(cfg: ExperimentConfig, axis: str, values: list, force: bool = False) -> dict:
    """One run per axis value, shared seeds elsewhere; consolidated report.

    Stages unaffected by the axis are hard-linked from the base run so a
    rank sweep does not retrain the codec. Per-value failures are isolated
    and recorded, not propagated.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; one of {sorted(SWEEP_AXES)}")
    field_name, first_stage = SWEEP_AXES[axis]
    base_root = cfg.root()
    results = []
    for value in values:
        sub = ExperimentConfig.from_dict(cfg.to_dict())
        setattr(sub, field_name, value)
        if axis == "secret_bits" and not sub.ecc_enabled:
            sub.secret = _default_secret_for_bits(value, cfg.secret)
        sub.output_root = str(base_root / "sweeps" / axis / str(value))
        sub.__post_init__()
        entry = {"axis": axis, "value": value, "root": sub.output_root}
        try:
            shared = {1: [], 2: ["data", "backbone"], 3: ["data", "backbone", "stage1", "stage2"],
                      4: ["data", "backbone", "stage1", "stage2", "stage3"]}[first_stage]
            for name in shared:
                if (base_root / name).exists():
                    _link_tree(base_root / name, Path(sub.output_root) / name)
            run_all(sub, force=force)
            report = json.loads((Path(sub.output_root) / "stage4" / "report.json").read_text())
            entry["acc_wm"] = report["average"]["acc_wm"]
            entry["acc_bit"] = report["average"]["acc_bit"]
            entry["identity_auc"] = report["extra"]["identity_auc"]
            trend = json.loads((Path(sub.output_root) / "stage4" / "trend.json").read_text())
            entry["trend"] = trend
        except Exception as e:  # noqa: BLE001 - per-value isolation is the contract
            entry["error"] = f"{type(e).__name__}: {e}"
        results.append(entry)

    out_dir = base_root / "sweeps" / axis
    out_dir.mkdir(parents=True, exist_ok=True)
    consolidated = {"axis": axis, "values": values, "results": results,
                    "config_hash": cfg.config_hash()}
    (out_dir / "sweep_report.json").write_text(
        json.dumps(consolidated, indent=1, sort_keys=True) + "\n")
    ok = [r for r in results if "error" not in r]
    if ok:
        sweep_plot([r["value"] for r in ok],
                   {"acc_wm": [r["acc_wm"] for r in ok],
                    "acc_bit": [r["acc_bit"] for r in ok]},
                   axis, out_dir / "sweep.png")
    return consolidated
