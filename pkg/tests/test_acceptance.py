"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-4 are self-contained and fast. Criteria 5-10 evaluate the
trained desk-scale artifacts, which build once through the pipeline into
the acceptance cache (HMARK_ACCEPTANCE_CACHE, default .acceptance_cache/)
and are reused by stamp on later runs. Expect several CPU-hours on the
first invocation; deselect with `-m "not acceptance"` for quick suites.
"""

import json
import time
from hashlib import sha256
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_config import (
    build_ecc_pair,
    build_main,
    ecc_bch31_config,
    ecc_raw16_config,
    main_config,
)
from hmark.bch import bch_build, bch_decode, bch_encode, gf_build, parse_bitstring
from hmark.codec import load_codec, embed_with_residual
from hmark.data import list_images, load_images, read_manifest
from hmark.diffusion import load_backbone
from hmark.distortions import SAMPLED_KINDS
from hmark.losses import LossWeights
from hmark.metrics import (
    ConfusionCounts,
    bit_accuracy,
    classification_metrics,
    frechet_from_features,
    roc_auc,
    ssim,
)
from hmark.pipeline import run_stage
from hmark.radioactivity import mean_shift_check, upblocks_jvp
from hmark.train_codec import codec_gradient_check

pytestmark = pytest.mark.acceptance


def check(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- self-contained criteria -------------------------------------------------


def test_criterion_1_bch_exactness():
    t0 = time.time()
    code = bch_build(5, 3)
    assert (code.n, code.k, code.t) == (31, 16, 3)

    for msg in range(65536):
        data = np.array([(msg >> (15 - i)) & 1 for i in range(16)], dtype=np.uint8)
        decoded, corrected, ok = bch_decode(code, bch_encode(code, data))
        assert ok and corrected == 0 and (decoded == data).all(), msg

    rng = np.random.default_rng(2024)
    data = rng.integers(0, 2, size=16).astype(np.uint8)
    cw = bch_encode(code, data)
    failures = 0
    for p1 in range(31):
        noisy = cw.copy()
        noisy[p1] ^= 1
        d, _, ok = bch_decode(code, noisy)
        failures += not (ok and (d == data).all())
        for p2 in range(p1 + 1, 31):
            noisy2 = cw.copy()
            noisy2[[p1, p2]] ^= 1
            d, _, ok = bch_decode(code, noisy2)
            failures += not (ok and (d == data).all())
    for _ in range(10_000):
        data = rng.integers(0, 2, size=16).astype(np.uint8)
        noisy = bch_encode(code, data)
        noisy[rng.choice(31, size=3, replace=False)] ^= 1
        d, corrected, ok = bch_decode(code, noisy)
        failures += not (ok and corrected == 3 and (d == data).all())

    elapsed = time.time() - t0
    check(1, failures == 0 and elapsed <= 120,
          f"exhaustive roundtrip + weight<=3 correction, {failures} failures, {elapsed:.1f}s")


def test_criterion_2_gf32_exactness():
    t0 = time.time()
    gf = gf_build(5)
    order_ok = gf.pow_alpha(31) == 1 and all(gf.pow_alpha(j) != 1 for j in range(1, 31))
    inverse_ok = all(gf.mul(a, gf.inv(a)) == 1 for a in range(1, 32))
    elapsed = time.time() - t0
    check(2, order_ok and inverse_ok and elapsed <= 1.0,
          f"alpha order 31, 31 inverse pairs, {elapsed:.3f}s")


def test_criterion_3_metric_oracles():
    t0 = time.time()
    m = classification_metrics(ConfusionCounts(tp=100, fp=2, fn=0, tn=98))
    cm_ok = (
        round(m.accuracy * 100, 2) == 99.00
        and round(m.precision * 100, 2) == 98.04
        and round(m.recall * 100, 2) == 100.00
        and round(m.f1 * 100, 2) == 99.01
    )

    rng = np.random.default_rng(7)
    auc_worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.normal(size=n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        _, auc = roc_auc(scores, labels)
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = (pos[:, None] > neg[None, :]).mean() + 0.5 * (pos[:, None] == neg[None, :]).mean()
        auc_worst = max(auc_worst, abs(auc - pairs))
    auc_ok = auc_worst <= 1e-10

    ssim_worst = 0.0
    for _ in range(5):
        x = rng.uniform(0, 1, size=(12, 13))
        y = np.clip(x + rng.normal(scale=0.08, size=(12, 13)), 0, 1)
        got = ssim(torch.from_numpy(x)[None, None], torch.from_numpy(y)[None, None])
        from test_metrics import ssim_double_loop_oracle

        ssim_worst = max(ssim_worst, abs(got - ssim_double_loop_oracle(x, y)))
    ssim_ok = ssim_worst <= 1e-6

    from test_metrics import frechet_eigen_oracle

    frechet_worst = 0.0
    for _ in range(20):
        fa = rng.normal(size=(50, 5))
        fb = rng.normal(size=(50, 5)) + rng.normal(scale=0.4, size=5)
        frechet_worst = max(
            frechet_worst,
            abs(frechet_from_features(fa, fb) - frechet_eigen_oracle(fa, fb)),
        )
    frechet_ok = frechet_worst <= 1e-6

    elapsed = time.time() - t0
    check(3, cm_ok and auc_ok and ssim_ok and frechet_ok and elapsed <= 60,
          f"confusion tuple exact, AUC dev {auc_worst:.1e}, SSIM dev {ssim_worst:.1e}, "
          f"Frechet dev {frechet_worst:.1e}, {elapsed:.1f}s")


def test_criterion_4_gradient_correctness():
    from test_train_codec import micro_setup, toy_images

    t0 = time.time()
    model, encoder, decoder, extractor, schedule = micro_setup(torch.float64)
    n_codec = sum(p.numel() for p in encoder.parameters()) + sum(
        p.numel() for p in decoder.parameters()
    )
    x = toy_images(4, dtype=torch.float64)
    secrets = np.random.default_rng(11).integers(0, 2, size=(4, 4)).astype(np.uint8)
    worst = codec_gradient_check(
        model, encoder, decoder, extractor, x, secrets, None, schedule,
        LossWeights(), n_coords=100, rng=np.random.default_rng(17),
    )
    elapsed = time.time() - t0
    check(4, n_codec <= 5000 and worst <= 1e-4 and elapsed <= 120,
          f"{n_codec} codec params, max rel grad error {worst:.2e} over 100 coords, {elapsed:.1f}s")


# -- artifact-backed criteria -------------------------------------------------


@pytest.fixture(scope="session")
def main_run():
    cfg = build_main()
    return cfg, Path(cfg.output_root)


@pytest.fixture(scope="session")
def ecc_runs():
    raw16, bch31 = build_ecc_pair()
    return raw16, bch31


@pytest.mark.slow
def test_criterion_5_linearization(main_run):
    cfg, root = main_run
    t0 = time.time()
    model, schedule, _ = load_backbone(root / "backbone" / "backbone.pt")
    encoder, _, _ = load_codec(root / "stage1" / "codec_final.pt")
    holdout = load_images(root / "data" / "holdout", list_images(root / "data" / "holdout"))
    assert holdout.shape[0] >= 512
    secret = parse_bitstring(cfg.secret)

    est = mean_shift_check(model, encoder, holdout, secret, 1e-2, schedule)
    est_half = mean_shift_check(model, encoder, holdout, secret, 5e-3, schedule)

    model64 = model.double()
    x = holdout[:8].double()
    from hmark.codec import encode_secret

    delta = encode_secret(encoder, secret)[0].detach().double()
    jvp = upblocks_jvp(model64, x, delta, schedule)
    h = 1e-3
    with torch.no_grad():
        d = delta.unsqueeze(0).expand(8, -1, -1, -1)
        fd = (
            embed_with_residual(model64, x, h * d, schedule, clamp=False)
            - embed_with_residual(model64, x, -h * d, schedule, clamp=False)
        ) / (2 * h)
    jvp_err = float((fd - jvp).norm() / jvp.norm())
    elapsed = time.time() - t0

    ok = (
        est.relative_error <= 0.05
        and est_half.relative_error <= est.relative_error + 1e-9
        and jvp_err <= 1e-4
        and elapsed <= 600
    )
    check(5, ok,
          f"mean-shift rel err {est.relative_error:.4f} at eps=1e-2 over "
          f"{est.n_images} images ({est_half.relative_error:.4f} at eps/2), "
          f"JVP vs FD {jvp_err:.2e}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_stage2_quality(main_run):
    cfg, root = main_run
    report = json.loads((root / "stage2" / "report.json").read_text())
    rows = {r["distortion"]: r for r in report["rows"]}
    identity = rows["identity"]
    six = [rows[k] for k in SAMPLED_KINDS]
    fidelity = json.loads((root / "stage2" / "fidelity.json").read_text())

    acc_wm = identity["acc_wm"]
    acc_bit = identity["acc_bit"]
    acc_bit_six = float(np.mean([r["acc_bit"] for r in six]))
    mse = fidelity["mse"]
    ok = acc_wm >= 0.95 and acc_bit >= 0.90 and acc_bit_six >= 0.80 and mse <= 1e-3
    check(6, ok,
          f"held-out identity acc_wm={acc_wm:.4f} (>=0.95) acc_bit={acc_bit:.4f} (>=0.90), "
          f"six-distortion acc_bit={acc_bit_six:.4f} (>=0.80), embed MSE={mse:.2e} (<=1e-3)")


@pytest.mark.slow
def test_criterion_7_radioactivity(main_run):
    cfg, root = main_run
    trend = json.loads((root / "stage4" / "trend.json").read_text())
    report = json.loads((root / "stage4" / "report.json").read_text())

    final_auc = trend[-1]["auc"]
    accs = [t["acc_bit"] for t in trend]
    non_decreasing = all(nxt >= prev - 0.03 for prev, nxt in zip(accs, accs[1:]))
    null_auc = report["extra"]["benign_vs_benign_auc"]
    ok = final_auc >= 0.85 and non_decreasing and 0.4 <= null_auc <= 0.6
    check(7, ok,
          f"final generated-vs-benign AUC={final_auc:.4f} (>=0.85), acc_bit trend "
          f"{[round(a, 3) for a in accs]} within -3% band: {non_decreasing}, "
          f"benign-vs-benign AUC={null_auc:.4f} (0.5 +/- 0.1)")


@pytest.mark.slow
def test_criterion_8_ecc_gain(ecc_runs):
    raw16, bch31 = ecc_runs
    rep_raw = json.loads((Path(raw16.output_root) / "stage4" / "report.json").read_text())
    rep_ecc = json.loads((Path(bch31.output_root) / "stage4" / "report.json").read_text())
    acc_raw = rep_raw["average"]["acc_bit"]
    acc_ecc = rep_ecc["average"]["acc_bit"]
    check(8, acc_ecc >= acc_raw,
          f"stage-4 acc_bit with BCH(31,16)={acc_ecc:.4f} >= raw 16-bit {acc_raw:.4f}")


@pytest.mark.slow
def test_criterion_9_false_attribution(main_run):
    cfg, root = main_run
    control = json.loads((root / "stage4" / "clean_control.json").read_text())
    fpr = control["fpr"]

    # per-image bit accuracies vs the run secret, on clean-finetuned
    # generations and on base-model generations (the decoder's bias level)
    _, decoder, _ = load_codec(root / "stage1" / "codec_final.pt")
    from hmark.codec import detect

    payload = cfg.embedded_payload()
    accs = {}
    for name in ("clean", "benign"):
        d = root / "stage4" / "samples" / name
        imgs = load_images(d, list_images(d))
        res = detect(decoder, imgs)
        accs[name] = np.array([bit_accuracy(payload, row) for row in res.bits])
    a, b = accs["clean"], accs["benign"]
    se = float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))
    z = abs(float(a.mean() - b.mean())) / max(se, 1e-9)

    ok = fpr <= 0.10 and z <= 3.0
    check(9, ok,
          f"clean-finetuned FPR={fpr:.4f} (<=0.10), acc_bit {a.mean():.4f} vs decoder "
          f"bias {b.mean():.4f} (z={z:.2f} <= 3)")


def _dir_digest(directory: Path) -> str:
    h = sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != ".stamp":
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.slow
def test_criterion_10_reproducibility(main_run, tmp_path_factory):
    cfg, root = main_run
    # (a) full-scale: stage 2 rerun must be byte-identical
    before = _dir_digest(root / "stage2")
    run_stage(cfg, 2, force=True)
    after = _dir_digest(root / "stage2")
    stage2_ok = before == after

    # (b) all four stages at micro scale, forced rerun byte-identity
    from test_pipeline import micro_config

    micro_root = tmp_path_factory.mktemp("repro")
    mcfg = micro_config(micro_root)
    digests = []
    for attempt in range(2):
        for stage in (1, 2, 3, 4):
            run_stage(mcfg, stage, force=True)
        digests.append(tuple(
            _dir_digest(micro_root / name)
            for name in ("data", "backbone", "stage1", "stage2", "stage3", "stage4")
        ))
    micro_ok = digests[0] == digests[1]
    check(10, stage2_ok and micro_ok,
          f"stage-2 rerun byte-identical: {stage2_ok}; "
          f"micro 4-stage forced rerun byte-identical: {micro_ok}")
