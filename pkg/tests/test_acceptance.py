"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints
(see ``conftest.pytest_terminal_summary``). Criteria 7-10 drive the real
command line through the whole pipeline twice with the fixed config below.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from fusedseg import cli, losses, metrics
from fusedseg.bench.report import read_records
from fusedseg.degrade import KINDS, SEVERITY_TABLE, DegradationSpec, apply_degradation, make_spec, modality_menu
from fusedseg.fusion import CheckpointBundle, FreezeMap, audit, fuse, load_checkpoint, save_checkpoint
from fusedseg.model import ModelConfig, SamModel, group_of
from fusedseg.svdadapt import decompose, install_adapters, reconstruct
from fusedseg.train import TrainConfig, build_batch, train_loop

from .oracles import dice_bruteforce, fd_relative_error, iou_bruteforce, nsd_bruteforce, random_masks
from .test_degrade import NEUTRAL, TABLE_1

RESULTS = {}

# fixed seeds and tolerances for the end-to-end criteria
ACCEPTANCE_CONFIG = {
    "seed": 0,
    "data": {"n_train": 200, "n_val": 15, "n_test": 25, "n_ood": 25},
    "parents": {"epochs": 10, "a_prompt_mode": "mixed", "init_seeds": [1, 2], "train_seed": 0},
    "train": {"epochs": 10, "seed": 5},
    "eval": {"prompt_modes": ["points"], "k_list": [3], "sweep_k_list": [1, 2, 3, 5], "seed": 7, "ood": True},
}
MARGIN_OVER_PARENTS = 0.02
CLEAN_TOLERANCE = 0.03
REPORT_FILES = ("records.csv", "aggregates.json", "deltas.csv", "cdf.csv", "manifest.json")


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# --- 1 ------------------------------------------------------------------------


def test_criterion_01_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = [(random_masks(rng), random_masks(rng)) for _ in range(200)]
    mism = {"dice": 0, "iou": 0, "nsd": 0}
    worst_identity = 0.0
    for p, g in pairs:
        mism["dice"] += metrics.dice(p, g) != dice_bruteforce(p, g)
        mism["iou"] += metrics.iou(p, g) != iou_bruteforce(p, g)
        mism["nsd"] += metrics.nsd(p, g, 2.0) != nsd_bruteforce(p, g, 2.0)
        i = metrics.iou(p, g)
        worst_identity = max(worst_identity, abs(metrics.dice(p, g) - 2 * i / (1 + i)))
    dt = time.perf_counter() - t0
    ok = sum(mism.values()) == 0 and worst_identity <= 1e-12 and dt < 10
    record(1, ok, f"mismatches={mism} max|dice-2iou/(1+iou)|={worst_identity:.1e} runtime={dt:.1f}s")


# --- 2 ------------------------------------------------------------------------


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    worst = {"dice": 0.0, "focal": 0.0, "mfc": 0.0, "tc": 0.0, "svd": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = torch.from_numpy(rng.normal(0, 2, (2, 1, 6, 6)))
        g = torch.from_numpy((rng.random((2, 1, 6, 6)) < 0.4).astype(np.float64))
        anchor = torch.from_numpy(rng.normal(size=(2, 1, 6, 6)))
        tok, tok_anchor = torch.from_numpy(rng.normal(size=(2, 8))), torch.from_numpy(rng.normal(size=(2, 8)))
        errs = {
            "dice": fd_relative_error(lambda x: losses.dice_loss(torch.sigmoid(x), g), z),
            "focal": fd_relative_error(lambda x: losses.focal_loss(x, g), z),
            "mfc": fd_relative_error(lambda x: losses.mfc_loss(x, anchor), z),
            "tc": fd_relative_error(lambda x: losses.tc_loss(x, tok_anchor), tok),
        }
        f = decompose(torch.from_numpy(rng.normal(size=(4, 3, 3, 3))))
        probe = torch.from_numpy(rng.normal(size=(4, 3, 3, 3)))
        errs["svd"] = fd_relative_error(
            lambda s: (reconstruct(f.U, s, f.V, f.original_shape) * probe).sum() ** 2, f.sigma)
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and dt < 60
    record(2, ok, "max rel err " + " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" runtime={dt:.1f}s")


# --- 3 ------------------------------------------------------------------------


def _full_rank(shape):
    c_out, c_in, k, _ = shape
    return min(c_out, c_in * k * k)


def test_criterion_03_freeze_invariants(tiny_medical):
    details, ok = [], True
    for svd_mode in (False, True):
        model = SamModel(ModelConfig(), seed=0)
        if svd_mode:
            install_adapters(model)
        before = {n: t.detach().clone().numpy().tobytes() for n, t in model.state_dict().items()}
        train_loop(model, tiny_medical, TrainConfig(epochs=10, seed=0, svd_mode=svd_mode))
        after = {n: t.detach().numpy().tobytes() for n, t in model.state_dict().items()}
        frozen = [n for n in before if n.startswith(("encoder.", "prompt_encoder.")) or n.endswith((".U", ".V"))]
        drift = [n for n in frozen if before[n] != after[n]]
        moved = [n for n in before if n.startswith("decoder.") and before[n] != after[n]]
        ok &= not drift and bool(moved)
        details.append(f"{'svd' if svd_mode else 'plain'}: {len(frozen)} frozen tensors, {len(drift)} drifted")
    plain = SamModel(ModelConfig(), seed=0)
    svd = SamModel(ModelConfig(), seed=0)
    install_adapters(svd)
    delta = audit(svd, FreezeMap.default(svd=True)).trainable - audit(plain, FreezeMap.default()).trainable
    params = dict(plain.named_parameters())
    expected = sum(_full_rank(tuple(params[a.target].shape)) for a in svd.svd.values())
    ok &= delta == expected
    record(3, ok, "; ".join(details) + f"; trainable delta {delta} vs sum r {expected}")


# --- 4 ------------------------------------------------------------------------


def test_criterion_04_identity_pair_floor(tiny_medical):
    model = SamModel(ModelConfig(), seed=0)
    vals = []
    for train_mode in (True, False):
        model.train(train_mode)
        batch = build_batch(tiny_medical, [0, 1, 2, 3], TrainConfig(seed=1), epoch=0, degrade=False)
        pair = model.forward_pair(batch["x_c"], batch["x_d"], batch["prompts"])
        rep = losses.pair_loss(pair, batch["mask"])
        vals += [float(rep.mfc.detach()), float(rep.tc.detach())]
    record(4, all(v == 0.0 for v in vals), f"L_mfc, L_tc at x_d = x_c (train, eval): {vals}")


# --- 5 ------------------------------------------------------------------------


def test_criterion_05_degradation_conformance():
    checks = {}
    x = np.full((3, 256, 256), 0.5)
    sigma = SEVERITY_TABLE["gaussian_noise"]["sigma"][2]
    out = apply_degradation(x, make_spec("gaussian_noise", 2, 0), clip=False)
    checks["gaussian sigma"] = abs((out - x).std(ddof=1) / sigma - 1) <= 0.05
    p = SEVERITY_TABLE["salt_pepper"]["fraction"][2]
    out = apply_degradation(x, make_spec("salt_pepper", 2, 1))
    frac = ((out[0] == 0) | (out[0] == 1)).mean()
    checks["salt-pepper fraction"] = abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / out[0].size)
    lam = SEVERITY_TABLE["poisson"]["peak"][2]
    out = apply_degradation(x, make_spec("poisson", 2, 2), clip=False)
    checks["poisson var/mean"] = abs(out.var(ddof=1) / out.mean() * lam - 1) <= 0.10
    img = np.random.default_rng(3).random((3, 32, 32))
    checks["zero-strength identity"] = all(
        np.max(np.abs(apply_degradation(img, DegradationSpec(k, 0, dict(NEUTRAL[k]), 4)) - img)) <= 1e-6
        for k in KINDS)
    checks["modality menu golden"] = all(
        set(modality_menu(m)) == rows | {"gaussian_noise", "gaussian_blur", "contrast", "brightness"}
        and len(modality_menu(m)) == len(rows) + 4
        for m, rows in TABLE_1.items())
    failed = [k for k, v in checks.items() if not v]
    record(5, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks pass" + (f"; failed {failed}" if failed else ""))


# --- 6 ------------------------------------------------------------------------


def test_criterion_06_checkpoint_and_fusion(tmp_path):
    a = CheckpointBundle.from_model(SamModel(ModelConfig(), seed=1), parent="A")
    b = CheckpointBundle.from_model(SamModel(ModelConfig(), seed=2), parent="B")
    pa = save_checkpoint(a, tmp_path / "a.ckpt")
    reloaded = load_checkpoint(pa)
    round_trip = save_checkpoint(reloaded, tmp_path / "a2.ckpt").read_bytes() == pa.read_bytes()
    round_trip &= all(a.tensors[n].tobytes() == reloaded.tensors[n].tobytes() for n in a.tensors)
    f = fuse(a, b)
    wrong = [n for n, v in f.tensors.items()
             if v.tobytes() != (b if group_of(n) == "decoder" else a).tensors[n].tobytes()]
    exact = not wrong and set(f.tensors) == set(a.tensors)
    record(6, round_trip and exact, f"round trip byte-exact={round_trip}; fused tensors off-plan={len(wrong)}")


# --- 7-10: end-to-end ---------------------------------------------------------


def _run_pipeline(root, cfg_path, with_svd=False):
    c = ["--config", str(cfg_path)]
    steps = [
        ["make-parents", *c, "--out", str(root / "parents")],
        ["fuse", "--encoder", str(root / "parents/parentA.ckpt"), "--decoder", str(root / "parents/parentB.ckpt"),
         "--out", str(root / "fused/fused.ckpt")],
        ["train", *c, "--init", str(root / "fused/fused.ckpt"), "--out", str(root / "trained")],
        ["eval", *c, "--ckpt", f"parent_A={root / 'parents/parentA.ckpt'}",
         "--ckpt", f"parent_B={root / 'parents/parentB.ckpt'}", "--ckpt", f"fused={root / 'trained/trained.ckpt'}",
         "--out", str(root / "eval")],
        ["report", "--records", str(root / "eval/records.csv"), "--out", str(root / "report")],
        ["sweep", *c, "--ckpt", f"fused={root / 'trained/trained.ckpt'}", "--out", str(root / "sweep")],
    ]
    if with_svd:
        steps += [
            ["train", *c, "--set", "train.svd_mode=true", "--init", str(root / "fused/fused.ckpt"),
             "--out", str(root / "trained_svd")],
            ["eval", *c, "--set", "eval.ood=false", "--ckpt", f"decoder_only={root / 'trained/trained.ckpt'}",
             "--ckpt", f"svd={root / 'trained_svd/trained.ckpt'}", "--out", str(root / "eval_svd")],
        ]
    for argv in steps:
        code = cli.main(argv)
        assert code == 0, f"{argv[0]} exited {code}"


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg_path = root / "acceptance.json"
    cfg_path.write_text(json.dumps(ACCEPTANCE_CONFIG))
    t0 = time.perf_counter()
    _run_pipeline(root / "run1", cfg_path, with_svd=True)
    t1 = time.perf_counter()
    _run_pipeline(root / "run2", cfg_path)
    t2 = time.perf_counter()
    return root, t1 - t0, t2 - t1


def _mean(records, model, clean, ood=False):
    vals = [r["dice"] for r in records if r["model"] == model and r["prompt_mode"] == "points" and r["k"] == 3
            and (r["degradation"] == "clean") == clean and r["ood"] == ood]
    return float(np.mean(vals))


def test_criterion_07_directional_fusion(pipeline_runs):
    root, runtime, _ = pipeline_runs
    recs = read_records(root / "run1/eval/records.csv")
    d = {m: (_mean(recs, m, True), _mean(recs, m, False)) for m in ("parent_A", "parent_B", "fused")}
    margin_a = d["fused"][1] - d["parent_A"][1]
    margin_b = d["fused"][1] - d["parent_B"][1]
    clean_gap = d["fused"][0] - d["parent_A"][0]
    ok = margin_a >= MARGIN_OVER_PARENTS and margin_b >= MARGIN_OVER_PARENTS and abs(clean_gap) <= CLEAN_TOLERANCE
    ood = {m: _mean(recs, m, False, ood=True) for m in d}
    detail = (" ".join(f"{m}: clean={c:.3f} degraded={g:.3f}" for m, (c, g) in d.items())
              + f" | degraded margin vs A={margin_a:+.3f} vs B={margin_b:+.3f} clean gap vs A={clean_gap:+.3f}"
              + f" | OOD degraded " + " ".join(f"{m}={v:.3f}" for m, v in ood.items())
              + f" | run time {runtime / 60:.1f} min")
    record(7, ok and runtime <= 30 * 60, detail)


def test_criterion_08_prompt_saturation(pipeline_runs):
    root = pipeline_runs[0]
    rows = (root / "run1/sweep/sweep.csv").read_text().splitlines()[1:]
    dice = {int(r.split(",")[1]): float(r.split(",")[2]) for r in rows}
    ok = dice[3] >= dice[1] and dice[5] - dice[3] < dice[3] - dice[1]
    record(8, ok, " ".join(f"K={k}:{v:.4f}" for k, v in sorted(dice.items()))
           + f" | gain 1->3={dice[3] - dice[1]:+.4f} 3->5={dice[5] - dice[3]:+.4f}")


def test_criterion_09_svd_tradeoff_artifact(pipeline_runs):
    root = pipeline_runs[0]
    recs = read_records(root / "run1/eval_svd/records.csv")
    vals = {m: (_mean(recs, m, True), _mean(recs, m, False)) for m in ("decoder_only", "svd")}
    artifact = {m: {"clean_dice": c, "degraded_dice": g} for m, (c, g) in vals.items()}
    out = root / "run1/eval_svd/svd_tradeoff.json"
    out.write_text(json.dumps(artifact, indent=2, sort_keys=True))
    # a report artifact, not a gate: passes whenever the comparison was produced
    record(9, out.exists(), "reported (not gated): " + " ".join(
        f"{m}: clean={c:.3f} degraded={g:.3f}" for m, (c, g) in vals.items()))


def test_criterion_10_end_to_end_determinism(pipeline_runs):
    root = pipeline_runs[0]
    diffs = []
    for sub in ("eval", "report"):
        for name in REPORT_FILES:
            if (root / "run1" / sub / name).read_bytes() != (root / "run2" / sub / name).read_bytes():
                diffs.append(f"{sub}/{name}")
    if (root / "run1/sweep/sweep.csv").read_bytes() != (root / "run2/sweep/sweep.csv").read_bytes():
        diffs.append("sweep/sweep.csv")
    for ck in ("parents/parentA.ckpt", "parents/parentB.ckpt", "fused/fused.ckpt", "trained/trained.ckpt"):
        if (root / "run1" / ck).read_bytes() != (root / "run2" / ck).read_bytes():
            diffs.append(ck)
    record(10, not diffs, "all report files, sweep and checkpoints byte-identical across reruns" if not diffs
           else f"differing files: {diffs}")
