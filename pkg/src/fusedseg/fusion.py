"""Checkpoint container, module-wise fusion, freeze maps and parameter audits.

File layout (all integers little-endian)::

    b"RMSCKPT1"                 8-byte magic
    uint32                      header length in bytes
    header                      canonical UTF-8 JSON (sorted keys)
    tensor payload              raw float32 buffers, sorted by name

The header holds ``format_version``, ``meta`` and, per tensor, its
``shape``, byte ``offset`` into the payload and ``nbytes``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointFormatError, ConfigurationError, IncompatibleCheckpointError
from .model import GROUPS, ModelConfig, SamModel, group_of
from .svdadapt import SigmaAdapter, SvdFactors, adapter_key

MAGIC = b"RMSCKPT1"
FORMAT_VERSION = 1
DEFAULT_PLAN = {"encoder": "A", "prompt_encoder": "A", "decoder": "B"}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class CheckpointBundle:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        if not isinstance(self.meta.get("config"), dict):
            raise CheckpointFormatError("checkpoint metadata has no model config")
        return ModelConfig.from_dict(self.meta["config"])

    @classmethod
    def from_model(cls, model: SamModel, **meta) -> "CheckpointBundle":
        tensors = {
            k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()
        }
        full_meta = {
            "config": model.cfg.to_dict(),
            "format_version": FORMAT_VERSION,
            "svd_targets": [a.target for a in model.svd.values()],
        }
        full_meta.update(meta)
        return cls(tensors, full_meta)

    def to_model(self, strict: bool = True) -> SamModel:
        model = build_model(self.config, self.meta.get("svd_targets", ()))
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state, strict=strict)
        return model

    def to_bytes(self) -> bytes:
        names = sorted(self.tensors)
        entries, chunks, offset = {}, [], 0
        for n in names:
            # asarray, not ascontiguousarray: the latter promotes 0-d scalars to shape (1,)
            arr = np.asarray(self.tensors[n], dtype="<f4")
            buf = arr.tobytes(order="C")
            entries[n] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
            chunks.append(buf)
            offset += len(buf)
        header = _canonical_json({"format_version": FORMAT_VERSION, "meta": self.meta, "tensors": entries})
        return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_model(cfg: ModelConfig, svd_targets=()) -> SamModel:
    """An architecture skeleton whose registry matches a checkpoint."""
    model = SamModel(cfg, seed=0)
    params = dict(model.named_parameters())
    for t in svd_targets:
        w = params[t]
        rows, cols = w.shape[0], w[0].numel()
        r = min(rows, cols)
        f = SvdFactors(torch.zeros(rows, r), torch.zeros(r), torch.zeros(cols, r), tuple(w.shape))
        model.svd[adapter_key(t)] = SigmaAdapter(t, f)
    return model


def save_checkpoint(model_or_bundle, path, **meta) -> Path:
    bundle = (
        model_or_bundle
        if isinstance(model_or_bundle, CheckpointBundle)
        else CheckpointBundle.from_model(model_or_bundle, **meta)
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bundle.to_bytes())
    os.replace(tmp, path)
    return path


def parse_checkpoint(data: bytes) -> CheckpointBundle:
    if len(data) < 12 or data[:8] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    if 12 + hlen > len(data):
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt header: {e}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict):
        raise CheckpointFormatError("corrupt header: expected an object with a tensor table")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {header.get('format_version')!r}")
    payload = data[12 + hlen:]
    try:
        expected = sum(int(e["nbytes"]) for e in header["tensors"].values())
        if len(payload) != expected:
            raise CheckpointFormatError(f"payload is {len(payload)} bytes, header declares {expected}")
        tensors = {}
        for name, e in header["tensors"].items():
            n_items = int(np.prod(e["shape"], dtype=np.int64))
            if e["nbytes"] != 4 * n_items or e["offset"] < 0 or e["offset"] + e["nbytes"] > len(payload):
                raise CheckpointFormatError(f"tensor {name!r} has an inconsistent extent")
            buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        return CheckpointBundle(tensors, dict(header["meta"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"malformed tensor table: {e!r}") from None


def check_compatible(bundle: CheckpointBundle, cfg: ModelConfig, partial: bool = False) -> None:
    """Raise :class:`IncompatibleCheckpointError` naming the first offending tensor."""
    ref = build_model(cfg, bundle.meta.get("svd_targets", ())).state_dict()
    for name in sorted(set(ref) | set(bundle.tensors)):
        if name not in bundle.tensors:
            if partial:
                continue
            raise IncompatibleCheckpointError(f"checkpoint is missing tensor {name!r}", name)
        if name not in ref:
            raise IncompatibleCheckpointError(f"checkpoint has unknown tensor {name!r}", name)
        if tuple(ref[name].shape) != tuple(bundle.tensors[name].shape):
            raise IncompatibleCheckpointError(
                f"tensor {name!r} has shape {tuple(bundle.tensors[name].shape)}, "
                f"config expects {tuple(ref[name].shape)}",
                name,
            )


def load_checkpoint(path, config: ModelConfig | None = None, partial: bool = False) -> CheckpointBundle:
    """Read and validate a checkpoint.

    Registry compatibility is checked against ``config`` when given, else
    against the config stored in the checkpoint. ``partial`` admits bundles
    with missing tensors (e.g. decoder-only parents).
    """
    bundle = parse_checkpoint(Path(path).read_bytes())
    cfg = config or bundle.config
    check_compatible(bundle, cfg, partial=partial)
    return bundle


# --- fusion ----------------------------------------------------------------


@dataclass
class FusionPlan:
    assignments: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PLAN))

    def source_for(self, group: str) -> str:
        try:
            return self.assignments[group]
        except KeyError:
            raise ConfigurationError(f"fusion plan has no assignment for group {group!r}") from None


def fuse(ckpt_a: CheckpointBundle, ckpt_b: CheckpointBundle, plan: FusionPlan | None = None) -> CheckpointBundle:
    """Select every tensor from the checkpoint its group is assigned to.

    Pure selection: tensors are copied byte-for-byte, never combined. The
    result's ``meta["provenance"]`` maps each tensor to ``"A"`` or ``"B"``.
    """
    plan = plan or FusionPlan()
    sources = {"A": ckpt_a, "B": ckpt_b}
    for g, src in plan.assignments.items():
        if src not in sources:
            raise ConfigurationError(f"group {g!r} assigned to unknown source {src!r}")
    if ckpt_a.meta["config"] != ckpt_b.meta["config"]:
        raise IncompatibleCheckpointError("parent checkpoints were built with different configs")
    names = sorted(set(ckpt_a.tensors) | set(ckpt_b.tensors))
    tensors, provenance = {}, {}
    for name in names:
        src = plan.source_for(group_of(name))
        bundle = sources[src]
        if name not in bundle.tensors:
            raise IncompatibleCheckpointError(f"source {src} lacks tensor {name!r}", name)
        other = sources["B" if src == "A" else "A"].tensors.get(name)
        if other is not None and other.shape != bundle.tensors[name].shape:
            raise IncompatibleCheckpointError(f"tensor {name!r} has mismatched shapes across parents", name)
        tensors[name] = bundle.tensors[name].copy()
        provenance[name] = src
    svd_src = plan.assignments.get("svd", "A")
    meta = {
        "config": dict(ckpt_a.meta["config"]),
        "format_version": FORMAT_VERSION,
        "parent": "fused",
        "plan": dict(sorted(plan.assignments.items())),
        "parents": {"A": ckpt_a.meta.get("parent"), "B": ckpt_b.meta.get("parent")},
        "provenance": provenance,
        "robust_decoding": sources[plan.source_for("decoder")].meta.get("robust_decoding", True),
        "svd_targets": list(sources[svd_src].meta.get("svd_targets", [])),
    }
    return CheckpointBundle(tensors, meta)


# --- freezing and audits ---------------------------------------------------


@dataclass
class FreezeMap:
    frozen_prefixes: list[str]
    trainable_prefixes: list[str]

    @classmethod
    def default(cls, svd: bool = False) -> "FreezeMap":
        trainable = ["decoder.", "svd."] if svd else ["decoder."]
        return cls(["encoder.", "prompt_encoder."], trainable)

    def is_trainable(self, name: str) -> bool:
        t = any(name.startswith(p) for p in self.trainable_prefixes)
        f = any(name.startswith(p) for p in self.frozen_prefixes)
        if t == f:
            raise ConfigurationError(f"parameter {name!r} is matched by {'both' if t else 'neither'} prefix sets")
        return t

    def validate(self, names, strict: bool = True) -> None:
        for n in names:
            self.is_trainable(n)
        if strict:
            for p in self.frozen_prefixes + self.trainable_prefixes:
                if not any(n.startswith(p) for n in names):
                    raise ConfigurationError(f"freeze-map prefix {p!r} matches no parameter")


def apply_freeze_map(model: SamModel, fmap: FreezeMap, strict: bool = True) -> list[tuple[str, torch.nn.Parameter]]:
    """Set ``requires_grad`` per ``fmap`` and return the trainable parameters."""
    named = list(model.named_parameters())
    fmap.validate([n for n, _ in named], strict=strict)
    trainable = []
    for n, p in named:
        flag = fmap.is_trainable(n)
        p.requires_grad_(flag)
        if flag:
            trainable.append((n, p))
    return trainable


@dataclass
class ParamAudit:
    total: int
    trainable: int
    frozen: int
    per_group: dict[str, dict[str, int]]


def audit(model: SamModel, fmap: FreezeMap) -> ParamAudit:
    per_group = {g: {"total": 0, "trainable": 0, "frozen": 0} for g in GROUPS}
    for n, p in model.named_parameters():
        g = per_group[group_of(n)]
        key = "trainable" if fmap.is_trainable(n) else "frozen"
        g["total"] += p.numel()
        g[key] += p.numel()
    per_group = {g: c for g, c in per_group.items() if c["total"]}
    trainable = sum(c["trainable"] for c in per_group.values())
    frozen = sum(c["frozen"] for c in per_group.values())
    return ParamAudit(trainable + frozen, trainable, frozen, per_group)
