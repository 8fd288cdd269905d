"""Clean/degraded pair training, prompt sampling and parent fabrication."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .degrade import apply_degradation, sample_degradation
from .exceptions import ConfigurationError, NumericError
from .fusion import CheckpointBundle, FreezeMap, apply_freeze_map, save_checkpoint
from .losses import LossReport, LossWeights, pair_loss, seg_only_loss
from .model import ModelConfig, PromptSet, SamModel
from .svdadapt import DEFAULT_TARGETS, install_adapters

log = logging.getLogger(__name__)

# stream tags for derived RNGs
_DEGRADE, _PROMPT, _SHUFFLE, _VAL, _MODE = 11, 13, 17, 19, 23


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 5e-4
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    image_size: int = 64
    svd_mode: bool = False
    svd_targets: tuple[str, ...] = DEFAULT_TARGETS
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    prompt_k: int = 3
    # "points", "box" or "mixed" (per-batch coin flip between the two)
    prompt_mode: str = "points"
    box_jitter: float = 0.05
    # False trains the plain decoder path on clean images with segmentation loss only
    paired: bool = True
    robust_mode: bool = True
    # "decoder" freezes encoder and prompt encoder; "none" trains everything
    freeze: str = "decoder"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.prompt_k < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and prompt_k >= 1 are required")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigurationError("learning_rate and eps must be positive")
        if self.prompt_mode not in ("points", "box", "mixed"):
            raise ConfigurationError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.freeze not in ("decoder", "none"):
            raise ConfigurationError(f"unknown freeze setting {self.freeze!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["svd_targets"] = list(self.svd_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "loss_weights" in kw and isinstance(kw["loss_weights"], dict):
            kw["loss_weights"] = LossWeights(**kw["loss_weights"])
        for k in ("betas", "svd_targets"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass
class EpochStats:
    epoch: int
    steps: int
    losses: dict[str, float]
    val_dice: float | None
    wall_time: float
    skipped_empty: int = 0


@dataclass
class TrainResult:
    model: SamModel
    stats: list[EpochStats]
    checkpoints: list[Path]
    best_val_dice: float | None = None
    best_bundle: CheckpointBundle | None = None


# --- prompts ---------------------------------------------------------------


def sample_point_prompts(mask, k: int, rng: np.random.Generator) -> PromptSet:
    """``k`` foreground points drawn uniformly without replacement (labels 1).

    Draws with replacement only when the mask has fewer than ``k`` pixels.
    An empty mask falls back to a full-frame box.
    """
    m = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        log.warning("empty mask: falling back to a full-frame box prompt")
        h, w = m.shape
        return PromptSet.from_box([0, 0, w, h])
    idx = rng.choice(ys.size, size=k, replace=ys.size < k)
    pts = np.stack([xs[idx], ys[idx]], axis=1).astype(np.float64)
    return PromptSet.from_points(pts)


def tight_box(mask) -> np.ndarray:
    """``(x_min, y_min, x_max, y_max)`` with exclusive max edges."""
    ys, xs = np.nonzero(np.asarray(mask).astype(bool))
    if ys.size == 0:
        raise ConfigurationError("cannot box an empty mask")
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def sample_box_prompt(mask, rng: np.random.Generator, jitter: float = 0.05) -> PromptSet:
    """Tight box with each edge moved by up to ``jitter * image_size`` pixels.

    The box is clipped to the image and always keeps the foreground pixel
    nearest the tight-box centre inside it.
    """
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    box = tight_box(m)
    if jitter > 0:
        box = box + rng.uniform(-jitter, jitter, 4) * np.array([w, h, w, h])
        box = np.clip(box, 0, [w, h, w, h])
        ys, xs = np.nonzero(m)
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        j = int(np.argmin((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2))
        box[0], box[1] = min(box[0], xs[j]), min(box[1], ys[j])
        box[2], box[3] = max(box[2], xs[j] + 1), max(box[3], ys[j] + 1)
    return PromptSet.from_box(box)


# --- batching --------------------------------------------------------------


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _prompt_for(mask, mode, k, rng, jitter):
    if mode == "box" and np.asarray(mask).any():
        return sample_box_prompt(mask, rng, jitter)
    return sample_point_prompts(mask, k, rng)


def build_batch(samples, indices, cfg: TrainConfig, epoch: int, degrade: bool = True):
    """Tensors and prompts for one batch; randomness keyed by (seed, epoch, index)."""
    mode = cfg.prompt_mode
    if mode == "mixed":
        mode = "box" if _rng(cfg.seed, _MODE, epoch, indices[0]).random() < 0.5 else "points"
    x_c, x_d, masks, prompts = [], [], [], []
    for i in indices:
        s = samples[i]
        x_c.append(s.image)
        if degrade:
            spec = sample_degradation(s.modality, _rng(cfg.seed, _DEGRADE, epoch, i))
            x_d.append(apply_degradation(s.image, spec))
        else:
            x_d.append(s.image)
        masks.append(s.mask)
        prompts.append(_prompt_for(s.mask, mode, cfg.prompt_k, _rng(cfg.seed, _PROMPT, epoch, i), cfg.box_jitter))
    return {
        "x_c": torch.from_numpy(np.stack(x_c).astype(np.float32)),
        "x_d": torch.from_numpy(np.stack(x_d).astype(np.float32)),
        "mask": torch.from_numpy(np.stack(masks).astype(np.float32))[:, None],
        "prompts": PromptSet.stack(prompts),
    }


# --- training --------------------------------------------------------------


def prepare_model(model: SamModel, cfg: TrainConfig):
    """Install adapters (SVD mode), apply the freeze map and build the optimizer."""
    if cfg.svd_mode and not len(model.svd):
        install_adapters(model, cfg.svd_targets)
    if cfg.freeze == "decoder":
        fmap = FreezeMap.default(svd=bool(len(model.svd)))
    else:
        fmap = FreezeMap([], ["encoder.", "prompt_encoder.", "decoder."] + (["svd."] if len(model.svd) else []))
    trainable = apply_freeze_map(model, fmap)
    opt = torch.optim.Adam([p for _, p in trainable], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    return fmap, opt


def train_step(model: SamModel, optimizer, batch, cfg: TrainConfig) -> LossReport:
    """One optimizer update; segmentation supervision uses the degraded branch only."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    if cfg.paired:
        pair = model.forward_pair(batch["x_c"], batch["x_d"], batch["prompts"], cfg.robust_mode)
        report = pair_loss(pair, batch["mask"], cfg.loss_weights)
    else:
        pred = model(batch["x_d"], batch["prompts"], cfg.robust_mode)
        report = seg_only_loss(pred, batch["mask"], cfg.loss_weights)
    if not torch.isfinite(report.total):
        raise NumericError(f"non-finite total loss; components {report.as_floats()}")
    report.total.backward()
    optimizer.step()
    return report


@torch.no_grad()
def predict_masks(model: SamModel, images, prompts: PromptSet, robust_mode=True, batch_size=32) -> np.ndarray:
    """Binary masks ``(N, H, W)`` for an image stack ``(N, 3, H, W)``."""
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    out = []
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        sub = PromptSet(prompts.mode,
                        None if prompts.points is None else prompts.points[sl],
                        None if prompts.labels is None else prompts.labels[sl],
                        None if prompts.boxes is None else prompts.boxes[sl])
        out.append(model(x[sl], sub, robust_mode).binary[:, 0].numpy())
    return np.concatenate(out)


def validation_dice(model, samples, cfg: TrainConfig, robust_mode=None, degrade=None) -> float:
    """Mean hard Dice with K-point prompts on a fixed (by default degraded) copy of ``samples``."""
    robust = cfg.robust_mode if robust_mode is None else robust_mode
    degrade = cfg.paired if degrade is None else degrade
    images, prompts, masks = [], [], []
    for i, s in enumerate(samples):
        if degrade:
            spec = sample_degradation(s.modality, _rng(cfg.seed, _VAL, i))
            images.append(apply_degradation(s.image, spec))
        else:
            images.append(s.image)
        prompts.append(sample_point_prompts(s.mask, cfg.prompt_k, _rng(cfg.seed, _VAL, i, 1)))
        masks.append(s.mask)
    pred = predict_masks(model, np.stack(images), PromptSet.stack(prompts), robust)
    return float(np.mean([metrics.dice(p, g) for p, g in zip(pred, masks)]))


def train_loop(model: SamModel, dataset, cfg: TrainConfig, val_dataset=None, out_dir=None,
               label: str = "trained") -> TrainResult:
    """Train ``model`` in place.

    Degradations are resampled every epoch from streams keyed by (seed,
    epoch, sample index), so results do not depend on iteration details.
    """
    fmap, opt = prepare_model(model, cfg)
    samples = [s for s in dataset if np.asarray(s.mask).any()]
    skipped = len(dataset) - len(samples)
    if skipped:
        log.warning("skipping %d samples with empty masks", skipped)
    out = Path(out_dir) if out_dir is not None else None
    step_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        step_log = open(out / "train_log.jsonl", "w")
    meta = {"parent": label, "seed": cfg.seed, "robust_decoding": cfg.robust_mode, "train": cfg.to_dict()}
    result = TrainResult(model, [], [])
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = _rng(cfg.seed, _SHUFFLE, epoch).permutation(len(samples))
            sums, steps = {}, 0
            for b in range(0, len(order), cfg.batch_size):
                batch = build_batch(samples, order[b:b + cfg.batch_size], cfg, epoch, degrade=cfg.paired)
                rep = train_step(model, opt, batch, cfg).as_floats()
                for k, v in rep.items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
                if step_log is not None:
                    step_log.write(json.dumps({"epoch": epoch, "step": steps, **rep}, sort_keys=True) + "\n")
            val = validation_dice(model, val_dataset, cfg) if val_dataset else None
            stats = EpochStats(epoch, steps, {k: v / max(steps, 1) for k, v in sums.items()}, val,
                               time.perf_counter() - t0, skipped)
            result.stats.append(stats)
            log.info("epoch %d: total=%.4f val_dice=%s (%.1fs)", epoch, stats.losses.get("total", float("nan")),
                     val, stats.wall_time)
            bundle = CheckpointBundle.from_model(model, **meta, epoch=epoch)
            if out is not None:
                result.checkpoints.append(save_checkpoint(bundle, out / f"epoch_{epoch:03d}.ckpt"))
            if val is not None and (result.best_val_dice is None or val > result.best_val_dice):
                result.best_val_dice = val
                result.best_bundle = bundle
                if out is not None:
                    result.checkpoints.append(save_checkpoint(bundle, out / "best.ckpt"))
    finally:
        if step_log is not None:
            step_log.close()
    return result


# --- parents ---------------------------------------------------------------


def parent_a_config(base: TrainConfig) -> TrainConfig:
    """Medical parent: full model, clean images, plain decoder path, seg loss only."""
    d = base.to_dict()
    d.update(paired=False, robust_mode=False, freeze="none", svd_mode=False)
    return TrainConfig.from_dict(d)


def parent_b_config(base: TrainConfig) -> TrainConfig:
    """Robustness parent: full model, degraded pairs, robust decoder, all losses."""
    d = base.to_dict()
    d.update(paired=True, robust_mode=True, freeze="none", svd_mode=False, prompt_mode="points")
    return TrainConfig.from_dict(d)


def make_parent_checkpoints(model_cfg: ModelConfig, medical_train, natural_train, cfg_a: TrainConfig,
                            cfg_b: TrainConfig, seeds=(1, 2), medical_val=None, natural_val=None):
    """Fabricate the medical (A) and robustness (B) parent checkpoints.

    Returns ``(bundle_a, bundle_b)``; each is the best-validation checkpoint
    when a validation set is given, else the final one.
    """
    bundles = []
    for label, seed, data, val, cfg in (
        ("medical", seeds[0], medical_train, medical_val, cfg_a),
        ("robust", seeds[1], natural_train, natural_val, cfg_b),
    ):
        model = SamModel(model_cfg, seed=seed)
        res = train_loop(model, data, cfg, val_dataset=val, label=label)
        bundle = res.best_bundle or CheckpointBundle.from_model(
            model, parent=label, seed=cfg.seed, robust_decoding=cfg.robust_mode, train=cfg.to_dict()
        )
        bundle.meta["init_seed"] = seed
        bundles.append(bundle)
    return tuple(bundles)
