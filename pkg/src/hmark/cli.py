"""Command-line entry points.

    hmark train-codec --config cfg.json            # stage 1 (+ data, backbone)
    hmark embed --config cfg.json                  # stage 2
    hmark embed --input DIR --secret 10110010 \
                --backbone B.pt --codec C.pt --out DIR
    hmark finetune --config cfg.json [--script lora --rank 32 --steps N]
    hmark finetune --data DIR --backbone B.pt --out DIR [--script ...]
    hmark detect --input DIR --codec C.pt --report out.json
    hmark report --config cfg.json [--require-auc 0.85 ...]   # stage 4
    hmark sweep --config cfg.json --axis lora_rank --values 8,16,32
    hmark bch encode|decode --m 5 --t 3 --bits 1011...

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 acceptance-threshold failure (report gates).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .bch import BCHError, bch_build, bch_decode, bch_encode, format_bitstring, parse_bitstring
from .codec import detect, embed, load_codec
from .data import list_images, load_images, make_records, save_image_batch, write_manifest
from .diffusion import load_backbone
from .finetune import FinetuneConfig, finetune
from .lora import LoRAConfig
from .pipeline import (
    ConfigError,
    ExperimentConfig,
    MissingPrerequisite,
    run_stage,
    sweep,
)


class ThresholdFailure(Exception):
    """A required metric gate was not met (CI exit code 3)."""


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config required for this mode")
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "out", None):
        cfg.output_root = args.out
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc = cfg.to_dict()
        if key.startswith("seeds."):
            doc["seeds"][key.split(".", 1)[1]] = value
        elif key in doc:
            doc[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
        cfg = ExperimentConfig.from_dict(doc)
    return cfg


def _cmd_train_codec(args) -> int:
    cfg = _load_config(args)
    out = run_stage(cfg, 1, force=args.force)
    print(f"stage 1 artifacts: {out}")
    return 0


def _cmd_embed(args) -> int:
    if args.input:
        for name in ("backbone", "codec", "out", "secret"):
            if not getattr(args, name):
                raise ConfigError(f"standalone embed requires --{name}")
        model, schedule, _ = load_backbone(args.backbone)
        encoder, _, _ = load_codec(args.codec)
        secret = parse_bitstring(args.secret)
        names = list_images(args.input)
        if not names:
            raise ConfigError(f"no images in {args.input}")
        images = load_images(args.input, names)
        out_dir = Path(args.out)
        written = []
        with torch.no_grad():
            for start in range(0, images.shape[0], 64):
                batch = embed(model, encoder, images[start:start + 64], secret, schedule)
                written += save_image_batch(out_dir, batch, prefix="wm", start=start)
        write_manifest(out_dir, role="wm",
                       records=make_records(written, role="wm",
                                            secret=format_bitstring(secret),
                                            sources=[f"{args.input}/{n}" for n in names]))
        print(f"embedded {len(written)} images into {out_dir}")
        return 0
    cfg = _load_config(args)
    out = run_stage(cfg, 2, force=args.force)
    print(f"stage 2 artifacts: {out}")
    return 0


def _cmd_finetune(args) -> int:
    if args.data:
        if not (args.backbone and args.out):
            raise ConfigError("standalone finetune requires --backbone and --out")
        model, schedule, _ = load_backbone(args.backbone)
        names = list_images(args.data)
        if not names:
            raise ConfigError(f"no images in {args.data}")
        images = load_images(args.data, names)
        fcfg = FinetuneConfig(
            script=args.script, steps=args.steps,
            lora=LoRAConfig(rank=args.rank), seed=args.seed,
        )
        _, ckpts = finetune(model, images, schedule, fcfg, args.out)
        print(f"wrote {len(ckpts)} checkpoints to {args.out}")
        return 0
    cfg = _load_config(args)
    if args.script:
        cfg.finetune_script = args.script
    if args.rank:
        cfg.lora_rank = args.rank
    if args.steps:
        cfg.finetune_steps = args.steps
    out = run_stage(cfg, 3, force=args.force)
    print(f"stage 3 artifacts: {out}")
    return 0


def _cmd_detect(args) -> int:
    _, decoder, _ = load_codec(args.codec)
    names = list_images(args.input)
    if not names:
        raise ConfigError(f"no images in {args.input}")
    images = load_images(args.input, names)
    per_image = []
    for start in range(0, images.shape[0], 64):
        res = detect(decoder, images[start:start + 64])
        for i in range(len(res)):
            per_image.append({
                "file": names[start + i],
                "p_wm": float(res.p_wm[i]),
                "detected": bool(res.detected[i]),
                "bits": format_bitstring(res.bits[i]),
            })
    doc = {
        "input": str(args.input),
        "n_images": len(per_image),
        "n_detected": sum(r["detected"] for r in per_image),
        "results": per_image,
    }
    Path(args.report).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"detected {doc['n_detected']}/{doc['n_images']}; report at {args.report}")
    return 0


def _cmd_report(args) -> int:
    cfg = _load_config(args)
    out = run_stage(cfg, 4, force=args.force)
    report = json.loads((out / "report.json").read_text())
    print(f"stage 4 report: {out / 'report.json'}")
    for row in report["rows"] + [report["average"]]:
        acc_bit = row["acc_bit"]
        print(f"  {row['distortion']:<16} acc_wm={row['acc_wm']:.4f} "
              f"acc_bit={acc_bit if acc_bit is None else f'{acc_bit:.4f}'}")
    failures = []
    if args.require_auc is not None and report["extra"]["identity_auc"] < args.require_auc:
        failures.append(f"identity_auc {report['extra']['identity_auc']:.4f} < {args.require_auc}")
    if args.require_acc_bit is not None and report["average"]["acc_bit"] < args.require_acc_bit:
        failures.append(f"avg acc_bit {report['average']['acc_bit']:.4f} < {args.require_acc_bit}")
    if args.require_fpr_max is not None:
        control = report["extra"].get("clean_control")
        if control is None:
            failures.append("no clean control in report for --require-fpr-max")
        elif control["fpr"] > args.require_fpr_max:
            failures.append(f"control FPR {control['fpr']:.4f} > {args.require_fpr_max}")
    if failures:
        raise ThresholdFailure("; ".join(failures))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [json.loads(v) for v in args.values.split(",")]
    result = sweep(cfg, args.axis, values, force=args.force)
    print(json.dumps({k: v for k, v in result.items() if k != "results"}, indent=1))
    for entry in result["results"]:
        status = entry.get("error", "ok")
        print(f"  {args.axis}={entry['value']}: {status}")
    return 0


def _cmd_bch(args) -> int:
    code = bch_build(args.m, args.t)
    bits = parse_bitstring(args.bits)
    if args.bch_op == "encode":
        print(format_bitstring(bch_encode(code, bits)))
    else:
        data, corrected, ok = bch_decode(code, bits)
        print(json.dumps({"data": format_bitstring(data), "corrected": corrected, "ok": ok}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmark", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config JSON")
            p.add_argument("--out", help="override output root")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--force", action="store_true", help="ignore completion stamps")

    p = sub.add_parser("train-codec", help="stage 1: train encoder/decoder")
    common(p)
    p.set_defaults(func=_cmd_train_codec)

    p = sub.add_parser("embed", help="stage 2, or standalone directory embedding")
    common(p)
    p.add_argument("--input", help="standalone: directory of images to watermark")
    p.add_argument("--secret", help="standalone: bit-string or 0x-hex secret")
    p.add_argument("--backbone", help="standalone: backbone checkpoint")
    p.add_argument("--codec", help="standalone: codec checkpoint")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("finetune", help="stage 3, or standalone finetuning")
    common(p)
    p.add_argument("--script", choices=("unet_full", "lora"))
    p.add_argument("--rank", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--data", help="standalone: training image directory")
    p.add_argument("--backbone", help="standalone: base checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("detect", help="run the detector over a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("report", help="stage 4: evaluate and emit reports/plots")
    common(p)
    p.add_argument("--require-auc", type=float, help="gate: min identity AUC")
    p.add_argument("--require-acc-bit", type=float, help="gate: min average bit accuracy")
    p.add_argument("--require-fpr-max", type=float, help="gate: max clean-control FPR")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bch", help="stand-alone BCH encode/decode")
    p.add_argument("bch_op", choices=("encode", "decode"))
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--bits", required=True, help="big-endian 0/1 string")
    p.set_defaults(func=_cmd_bch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MissingPrerequisite, BCHError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except ThresholdFailure as e:
        print(f"threshold failure: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
