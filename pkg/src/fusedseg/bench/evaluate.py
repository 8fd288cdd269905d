"""Benchmark execution: clean and every applicable (kind, severity) per sample.

Prompts and degradations are keyed by (seed, dataset, sample) only, so every
model and every K sees identical inputs (paired evaluation).
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from ..degrade import SEVERITIES, apply_degradation, make_spec, modality_menu, sample_degradation
from ..model import PromptSet
from ..train import predict_masks, sample_box_prompt, sample_point_prompts
from .synthetic import check_disjoint, generate_dataset

CLEAN = "clean"
_PROMPT, _DEGRADE, _SWEEP = 31, 37, 41


class SamPredictor:
    """Wraps a model for benchmarking; ``robust_mode`` picks the decoder path."""

    def __init__(self, model, robust_mode=True, name="model", checkpoint_hash=""):
        self.model = model
        self.robust_mode = robust_mode
        self.name = name
        self.checkpoint_hash = checkpoint_hash

    def __call__(self, images, prompts, masks):
        return predict_masks(self.model, images, prompts, self.robust_mode)


class OraclePredictor:
    """Reference bounds: ``"perfect"`` returns the ground truth, ``"empty"`` nothing."""

    def __init__(self, kind="perfect", name=None):
        if kind not in ("perfect", "empty"):
            raise ValueError(f"unknown oracle kind {kind!r}")
        self.kind = kind
        self.name = name or f"oracle_{kind}"
        self.checkpoint_hash = ""

    def __call__(self, images, prompts, masks):
        m = np.asarray(masks).astype(np.uint8)
        return m.copy() if self.kind == "perfect" else np.zeros_like(m)


@dataclass
class EvalReport:
    records: list[metrics.MetricRecord]
    aggregates: dict = field(default_factory=dict)
    deltas: list[dict] = field(default_factory=list)
    cdf: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def refresh(self) -> "EvalReport":
        self.aggregates = compute_aggregates(self.records)
        self.deltas = compute_deltas(self.records)
        self.cdf = compute_cdf(self.records)
        return self


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def _prompts_for(samples, mode, k, seed):
    ps = []
    for s in samples:
        rng = _rng(seed, _PROMPT, _key(s.sample_id))
        if mode == "box":
            ps.append(sample_box_prompt(s.mask, rng, jitter=0.05))
        else:
            ps.append(sample_point_prompts(s.mask, k, rng))
    return PromptSet.stack(ps)


def degradation_grid(samples, seed):
    """Per-sample list of ``(kind, severity, image)`` including the clean image."""
    grid = []
    for s in samples:
        rows = [(CLEAN, 0, s.image)]
        for ki, kind in enumerate(modality_menu(s.modality)):
            for sev in SEVERITIES:
                spec_seed = int(_rng(seed, _DEGRADE, _key(s.sample_id), _key(kind), sev).integers(0, 2**63 - 1))
                rows.append((kind, sev, apply_degradation(s.image, make_spec(kind, sev, spec_seed))))
        grid.append(rows)
    return grid


def run_benchmark(predictors, datasets, metric_config=None, prompt_modes=("points",), k_list=(3,),
                  seed=0, ood=False, manifest=None) -> EvalReport:
    """Evaluate every predictor on every sample, clean and under each applicable degradation.

    ``datasets`` is a list of sample lists (see
    :func:`~fusedseg.bench.synthetic.generate_dataset`).
    """
    cfg = metrics.MetricConfig() if metric_config is None else metric_config
    records = []
    for samples in datasets:
        grid = degradation_grid(samples, seed)
        n_rows = len(grid[0])
        for mode in prompt_modes:
            for k in (k_list if mode == "points" else (0,)):
                prompts = _prompts_for(samples, mode, k, seed)
                for row in range(n_rows):
                    images = np.stack([g[row][2] for g in grid])
                    masks = np.stack([s.mask for s in samples])
                    for pred_fn in predictors:
                        preds = pred_fn(images, prompts, masks)
                        for s, g, p in zip(samples, grid, preds):
                            d, i, n = metrics.score(p, s.mask, cfg)
                            records.append(metrics.MetricRecord(
                                sample_id=s.sample_id, dataset=s.dataset, modality=s.modality,
                                degradation=g[row][0], severity=g[row][1], prompt_mode=mode, k=k,
                                dice=d, iou=i, nsd=n, model=pred_fn.name, family=s.family, ood=ood,
                            ))
    records.sort(key=_record_order)
    man = {
        "seed": seed,
        "metric_config": {"nsd_tau": cfg.nsd_tau, "surface_connectivity": cfg.surface_connectivity},
        "prompt_modes": list(prompt_modes),
        "k_list": list(k_list),
        "models": {p.name: getattr(p, "checkpoint_hash", "") for p in predictors},
        "datasets": sorted({s.dataset for ds in datasets for s in ds}),
        "ood": ood,
    }
    man.update(manifest or {})
    return EvalReport(records, manifest=man).refresh()


def _record_order(r):
    return (r.model, r.dataset, r.sample_id, r.prompt_mode, r.k, r.degradation != CLEAN, r.degradation, r.severity)


# --- derived tables --------------------------------------------------------


def compute_aggregates(records) -> dict:
    deg = [r for r in records if r.degradation != CLEAN]
    clean = [r for r in records if r.degradation == CLEAN]
    return {
        "by_dataset_degradation": metrics.aggregate(deg, ("model", "prompt_mode", "k", "dataset", "degradation")),
        "by_degradation": metrics.aggregate(deg, ("model", "prompt_mode", "k", "degradation")),
        "by_modality": metrics.aggregate(deg, ("model", "prompt_mode", "k", "modality")),
        "by_dataset": metrics.aggregate(deg, ("model", "prompt_mode", "k", "dataset")),
        "by_prompt": metrics.aggregate(deg, ("model", "prompt_mode", "k")),
        "clean_by_dataset": metrics.aggregate(clean, ("model", "prompt_mode", "k", "dataset")),
        "clean_by_prompt": metrics.aggregate(clean, ("model", "prompt_mode", "k")),
    }


def compute_deltas(records) -> list[dict]:
    """Clean vs degraded mean Dice per (model, prompt, K, dataset) and overall; delta = degraded - clean."""
    out = []
    for scope in (("model", "prompt_mode", "k", "dataset"), ("model", "prompt_mode", "k")):
        clean = {tuple(r[k] for k in scope): r for r in
                 metrics.aggregate([x for x in records if x.degradation == CLEAN], scope)}
        deg = {tuple(r[k] for k in scope): r for r in
               metrics.aggregate([x for x in records if x.degradation != CLEAN], scope)}
        for key in sorted(set(clean) & set(deg), key=lambda t: tuple(str(v) for v in t)):
            row = dict(zip(scope, key))
            row.setdefault("dataset", "overall")
            row["clean_dice"] = clean[key]["dice_mean"]
            row["degraded_dice"] = deg[key]["dice_mean"]
            row["delta"] = row["degraded_dice"] - row["clean_dice"]
            out.append(row)
    return out


def compute_cdf(records) -> list[dict]:
    """Empirical CDFs of degraded Dice at per-sample and per-(dataset, degradation) granularity."""
    out = []
    deg = [r for r in records if r.degradation != CLEAN]
    groups = sorted({(r.model, r.prompt_mode, r.k) for r in deg}, key=lambda t: tuple(str(v) for v in t))
    for model, mode, k in groups:
        sel = [r for r in deg if (r.model, r.prompt_mode, r.k) == (model, mode, k)]
        per_cell = metrics.aggregate(sel, ("dataset", "degradation"))
        for granularity, values in (("sample", [r.dice for r in sel]),
                                    ("dataset_degradation", [c["dice_mean"] for c in per_cell])):
            for v, f in metrics.empirical_cdf(values):
                out.append({"model": model, "prompt_mode": mode, "k": k, "granularity": granularity,
                            "dice": v, "fraction": f})
    return out


def mean_dice(report: EvalReport, model: str, clean: bool, prompt_mode="points", k=3) -> float:
    vals = [r.dice for r in report.records
            if r.model == model and r.prompt_mode == prompt_mode and r.k == k
            and (r.degradation == CLEAN) == clean]
    return float(np.mean(vals))


# --- sweeps ----------------------------------------------------------------


def prompt_sensitivity_sweep(predictor, samples, k_list=(1, 2, 3, 5), seed=0) -> list[dict]:
    """Mean degraded Dice per K with one fixed degradation per sample.

    Point sets are nested: the K-point prompt is the first K of one draw
    of ``max(k_list)`` points.
    """
    images, full = [], []
    kmax = max(k_list)
    for s in samples:
        spec = sample_degradation(s.modality, _rng(seed, _SWEEP, _key(s.sample_id)))
        images.append(apply_degradation(s.image, spec))
        full.append(sample_point_prompts(s.mask, kmax, _rng(seed, _SWEEP, _key(s.sample_id), 1)).points[0])
    images = np.stack(images)
    masks = np.stack([s.mask for s in samples])
    rows = []
    for k in k_list:
        prompts = PromptSet.from_points(np.stack([f[:k] for f in full]))
        preds = predictor(images, prompts, masks)
        d = [metrics.dice(p, m) for p, m in zip(preds, masks)]
        mean, std = metrics.mean_std(d)
        rows.append({"model": predictor.name, "k": int(k), "dice_mean": mean, "dice_std": std, "n": len(d)})
    return rows


def ood_split_eval(predictors, train_specs, held_out_specs, seed=0, **kw) -> EvalReport:
    """Benchmark on held-out style/family combinations; records are flagged ``ood``."""
    check_disjoint(train_specs, held_out_specs)
    datasets = [generate_dataset(s) for s in held_out_specs]
    return run_benchmark(predictors, datasets, seed=seed, ood=True, **kw)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
