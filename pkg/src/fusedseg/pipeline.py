"""Experiment configuration and the pipeline stages behind the command line.

An experiment is one JSON document; every stage reads the sections it needs
and records the resolved document (plus input hashes) in ``manifest.json``.
File names, never absolute paths, go into manifests so reruns in different
directories produce identical bytes.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .bench.evaluate import SamPredictor, file_digest, ood_split_eval, prompt_sensitivity_sweep, run_benchmark
from .bench.report import _csv_bytes, _json_bytes, emit_report
from .bench.synthetic import generate_dataset, medical_suite, natural_suite, ood_suite
from .exceptions import ConfigurationError
from .fusion import FusionPlan, fuse, load_checkpoint, save_checkpoint
from .metrics import MetricConfig
from .model import ModelConfig
from .train import TrainConfig, make_parent_checkpoints, parent_a_config, parent_b_config, train_loop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_val: int = 15
    n_test: int = 25
    n_ood: int = 25
    image_size: int = 64
    medical_train_seed: int = 1000
    medical_val_seed: int = 2000
    medical_test_seed: int = 3000
    natural_train_seed: int = 4000
    natural_val_seed: int = 5000
    ood_seed: int = 6000


@dataclass(frozen=True)
class ParentConfig:
    epochs: int = 10
    # parent A's training prompts; "mixed" alternates boxes and points per batch
    a_prompt_mode: str = "mixed"
    init_seeds: tuple[int, int] = (1, 2)
    train_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    prompt_modes: tuple[str, ...] = ("points",)
    k_list: tuple[int, ...] = (3,)
    sweep_k_list: tuple[int, ...] = (1, 2, 3, 5)
    nsd_tau: float = 2.0
    seed: int = 7
    ood: bool = False
    overlays: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    parents: ParentConfig = field(default_factory=ParentConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, seed=5))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = {}
            if "seed" in d:
                kw["seed"] = _typed("seed", d["seed"], int)
            if "model" in d:
                _check_types("model", d["model"], ModelConfig())
                kw["model"] = ModelConfig.from_dict(d["model"])
            if "train" in d:
                _check_types("train", d["train"], TrainConfig())
                kw["train"] = TrainConfig.from_dict(d["train"])
            for name, klass in (("data", DataConfig), ("parents", ParentConfig), ("eval", EvalConfig)):
                if name in d:
                    kw[name] = _build(name, klass, d[name])
            return cls(**kw)
        except TypeError as e:
            raise ConfigurationError(str(e)) from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _no_unknown(section, d, klass):
    if not isinstance(d, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(klass)}
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _typed(name, v, typ):
    if typ is float and isinstance(v, int) and not isinstance(v, bool):
        return float(v)
    if typ in (int, float) and isinstance(v, bool):
        raise ConfigurationError(f"{name}: expected {typ.__name__}, got bool")
    if not isinstance(v, typ):
        raise ConfigurationError(f"{name}: expected {typ.__name__}, got {type(v).__name__}")
    return v


def _check_types(section, d, defaults):
    _no_unknown(section, d, type(defaults))
    for k, v in d.items():
        ref = getattr(defaults, k)
        name = f"{section}.{k}"
        if is_dataclass(ref):
            _check_types(name, v, ref)
        elif isinstance(ref, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigurationError(f"{name}: expected a list")
            for x in v:
                _typed(name, x, type(ref[0]))
        else:
            _typed(name, v, type(ref))


def _build(section, klass, d):
    _no_unknown(section, d, klass)
    defaults = klass()
    kw = {}
    for k, v in d.items():
        ref = getattr(defaults, k)
        if isinstance(ref, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigurationError(f"{section}.{k}: expected a list")
            kw[k] = tuple(_typed(f"{section}.{k}", x, type(ref[0])) for x in v)
        else:
            kw[k] = _typed(f"{section}.{k}", v, type(ref))
    return klass(**kw)


def parse_value(text: str):
    """Interpret an override value as JSON, falling back to a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides to a config dict; keys must already exist."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path=None, overrides=(), seed=None) -> ExperimentConfig:
    doc = ExperimentConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from None
        doc = _merge(doc, user)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return ExperimentConfig.from_dict(doc)


def _merge(base, user):
    if not isinstance(user, dict):
        raise ConfigurationError("config file must hold a JSON object")
    out = dict(base)
    for k, v in user.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {k!r}")
        out[k] = _merge(base[k], v) if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


# --- stages ------------------------------------------------------------------


def _s(cfg: ExperimentConfig, seed: int) -> int:
    # the top-level seed offsets every stage seed, so one flag reseeds the whole experiment
    return seed + 100_003 * cfg.seed


def medical_splits(cfg: ExperimentConfig):
    d = cfg.data
    train = [s for sp in medical_suite(d.n_train, _s(cfg, d.medical_train_seed), d.image_size) for s in generate_dataset(sp)]
    val = [s for sp in medical_suite(d.n_val, _s(cfg, d.medical_val_seed), d.image_size) for s in generate_dataset(sp)]
    test = [generate_dataset(sp) for sp in medical_suite(d.n_test, _s(cfg, d.medical_test_seed), d.image_size)]
    return train, val, test


def natural_splits(cfg: ExperimentConfig):
    d = cfg.data
    train = [s for sp in natural_suite(d.n_train, _s(cfg, d.natural_train_seed), d.image_size) for s in generate_dataset(sp)]
    val = [s for sp in natural_suite(d.n_val, _s(cfg, d.natural_val_seed), d.image_size) for s in generate_dataset(sp)]
    return train, val


def write_manifest(out_dir, cfg: ExperimentConfig | None, stage: str, inputs=None, outputs=None, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = {
        "stage": stage,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "inputs": {Path(p).name: file_digest(p) for p in (inputs or [])},
        "outputs": {Path(p).name: file_digest(p) for p in (outputs or [])},
    }
    man.update(extra or {})
    path = out / "manifest.json"
    path.write_bytes(_json_bytes(man))
    return path


def stage_make_parents(cfg: ExperimentConfig, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    med_tr, med_va, _ = medical_splits(cfg)
    nat_tr, nat_va = natural_splits(cfg)
    base = TrainConfig.from_dict({**cfg.train.to_dict(), "epochs": cfg.parents.epochs,
                                  "seed": _s(cfg, cfg.parents.train_seed)})
    cfg_a = TrainConfig.from_dict({**parent_a_config(base).to_dict(), "prompt_mode": cfg.parents.a_prompt_mode})
    cfg_b = parent_b_config(base)
    seeds = tuple(_s(cfg, s) for s in cfg.parents.init_seeds)
    a, b = make_parent_checkpoints(cfg.model, med_tr, nat_tr, cfg_a, cfg_b, seeds=seeds,
                                   medical_val=med_va, natural_val=nat_va)
    pa = save_checkpoint(a, out / "parentA.ckpt")
    pb = save_checkpoint(b, out / "parentB.ckpt")
    write_manifest(out, cfg, "make-parents", outputs=[pa, pb],
                   extra={"parent_train": {"A": cfg_a.to_dict(), "B": cfg_b.to_dict()}})
    return pa, pb


def stage_fuse(encoder_ckpt, decoder_ckpt, out_path, plan: dict | None = None) -> Path:
    a = load_checkpoint(encoder_ckpt)
    b = load_checkpoint(decoder_ckpt)
    fused = fuse(a, b, FusionPlan(plan) if plan else None)
    out = save_checkpoint(fused, out_path)
    write_manifest(Path(out_path).parent, None, "fuse", inputs=[encoder_ckpt, decoder_ckpt], outputs=[out],
                   extra={"plan": fused.meta["plan"]})
    return out


def stage_train(cfg: ExperimentConfig, init_ckpt, out_dir) -> Path:
    """Decoder fine-tuning (or the configured freeze setting) on the medical split; writes ``trained.ckpt``."""
    out = Path(out_dir)
    bundle = load_checkpoint(init_ckpt)
    model = bundle.to_model()
    med_tr, med_va, _ = medical_splits(cfg)
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": _s(cfg, cfg.train.seed)})
    res = train_loop(model, med_tr, tcfg, val_dataset=med_va, label="trained")
    best = res.best_bundle
    if best is None:
        from .fusion import CheckpointBundle

        best = CheckpointBundle.from_model(model, parent="trained", seed=tcfg.seed,
                                           robust_decoding=tcfg.robust_mode, train=tcfg.to_dict())
    best.meta["init_checkpoint"] = file_digest(init_ckpt)
    path = save_checkpoint(best, out / "trained.ckpt")
    history = [{"epoch": s.epoch, "val_dice": s.val_dice, **s.losses} for s in res.stats]
    (out / "history.json").write_bytes(_json_bytes(history))
    write_manifest(out, cfg, "train", inputs=[init_ckpt], outputs=[path],
                   extra={"best_val_dice": res.best_val_dice})
    return path


def _predictors(named_ckpts):
    preds = []
    for name, path in named_ckpts:
        b = load_checkpoint(path)
        preds.append(SamPredictor(b.to_model(), bool(b.meta.get("robust_decoding", True)), name, b.digest()))
    return preds


def stage_eval(cfg: ExperimentConfig, named_ckpts, out_dir):
    """Benchmark ``[(name, path), ...]`` on the medical test split (and the OOD split if enabled)."""
    out = Path(out_dir)
    preds = _predictors(named_ckpts)
    _, _, test = medical_splits(cfg)
    mc = MetricConfig(nsd_tau=cfg.eval.nsd_tau)
    extra = {"config": cfg.to_dict(), "checkpoints": {n: file_digest(p) for n, p in named_ckpts}}
    rep = run_benchmark(preds, test, mc, cfg.eval.prompt_modes, cfg.eval.k_list, _s(cfg, cfg.eval.seed),
                        manifest=extra)
    if cfg.eval.ood:
        d = cfg.data
        held_out = ood_suite(d.n_ood, _s(cfg, d.ood_seed), d.image_size)
        train_specs = medical_suite(d.n_train, _s(cfg, d.medical_train_seed), d.image_size)
        ood = ood_split_eval(preds, train_specs, held_out, seed=_s(cfg, cfg.eval.seed), metric_config=mc,
                             prompt_modes=cfg.eval.prompt_modes, k_list=cfg.eval.k_list)
        rep.records.extend(ood.records)
        rep.refresh()
    emit_report(rep, out, overlays=_overlays(preds, test, cfg))
    return rep


def _overlays(preds, test, cfg):
    from .bench.evaluate import _prompts_for

    n = cfg.eval.overlays
    if n <= 0:
        return []
    samples = [s for ds in test for s in ds][:n]
    prompts = _prompts_for(samples, "points", cfg.eval.k_list[0], _s(cfg, cfg.eval.seed))
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    out = []
    for p in preds:
        for s, m in zip(samples, p(images, prompts, masks)):
            out.append((f"{p.name}_{s.sample_id}", s.image, m, s.mask))
    return out


def stage_sweep(cfg: ExperimentConfig, named_ckpts, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, test = medical_splits(cfg)
    samples = [s for ds in test for s in ds]
    rows = []
    for p in _predictors(named_ckpts):
        rows.extend(prompt_sensitivity_sweep(p, samples, cfg.eval.sweep_k_list, _s(cfg, cfg.eval.seed)))
    path = out / "sweep.csv"
    path.write_bytes(_csv_bytes(["model", "k", "dice_mean", "dice_std", "n"], rows))
    write_manifest(out, cfg, "sweep", inputs=[p for _, p in named_ckpts], outputs=[path])
    return path


def stage_report(records_csv, out_dir, manifest_path=None):
    """Rebuild every derived table from a raw records.csv."""
    from .bench.evaluate import EvalReport
    from .bench.report import read_records
    from .metrics import MetricRecord

    records = [MetricRecord(**r) for r in read_records(records_csv)]
    manifest = {}
    if manifest_path is not None and Path(manifest_path).exists():
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        manifest.pop("records_schema_version", None)
        manifest.pop("records_columns", None)
    rep = EvalReport(records, manifest=manifest).refresh()
    emit_report(rep, out_dir)
    return rep


__all__ = [
    "DataConfig", "EvalConfig", "ExperimentConfig", "ParentConfig", "apply_overrides", "load_config",
    "medical_splits", "natural_splits", "stage_eval", "stage_fuse", "stage_make_parents", "stage_report",
    "stage_sweep", "stage_train", "write_manifest",
]
