"""Singular-value adaptation of encoder convolutions.

A weight ``W`` of shape ``(C_out, C_in, k, k)`` is flattened to
``C_out x C_in*k*k`` and factored once as ``U diag(sigma) V^T``. ``U`` and
``V`` are stored as frozen buffers; only ``sigma`` (``r = min(C_out,
C_in*k*k)`` values) is a trainable parameter. The encoder reads the
reconstructed weight instead of its own copy, which stays untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .exceptions import ConfigurationError, NumericError

DEFAULT_TARGETS = ("encoder.neck.0.weight", "encoder.neck.2.weight")


@dataclass
class SvdFactors:
    U: torch.Tensor
    sigma: torch.Tensor
    V: torch.Tensor
    original_shape: tuple[int, ...]

    @property
    def rank(self) -> int:
        return self.sigma.numel()


@dataclass
class SvdAdapterState:
    target_names: list[str]
    factors: dict[str, SvdFactors] = field(default_factory=dict)


def trainable_count(c_out: int, c_in: int, k: int) -> int:
    return min(c_out, c_in * k * k)


def decompose(weight: torch.Tensor) -> SvdFactors:
    """Thin SVD of a conv (or dense) weight, computed in float64."""
    if not torch.isfinite(weight).all():
        raise NumericError("cannot decompose a non-finite weight")
    shape = tuple(weight.shape)
    mat = weight.detach().reshape(shape[0], -1).to(torch.float64)
    u, s, vh = torch.linalg.svd(mat, full_matrices=False)
    dt = weight.dtype
    return SvdFactors(u.to(dt), s.to(dt), vh.T.contiguous().to(dt), shape)


def reconstruct(U, sigma, V, shape=None) -> torch.Tensor:
    if U.shape[1] != sigma.numel() or V.shape[1] != sigma.numel():
        raise ConfigurationError(
            f"inconsistent factor shapes U{tuple(U.shape)} sigma{tuple(sigma.shape)} V{tuple(V.shape)}"
        )
    w = (U * sigma) @ V.T
    return w.reshape(shape) if shape is not None else w


def adapter_key(target: str) -> str:
    return target.replace(".", "_")


class SigmaAdapter(nn.Module):
    def __init__(self, target: str, factors: SvdFactors):
        super().__init__()
        self.target = target
        self.shape = factors.original_shape
        self.register_buffer("U", factors.U.clone())
        self.register_buffer("V", factors.V.clone())
        self.sigma = nn.Parameter(factors.sigma.clone())

    def weight(self) -> torch.Tensor:
        return reconstruct(self.U, self.sigma, self.V, self.shape)


def install_adapters(model, targets=DEFAULT_TARGETS) -> SvdAdapterState:
    """Attach sigma adapters to ``model`` for each encoder weight in ``targets``."""
    registry = dict(model.named_parameters())
    state = SvdAdapterState(list(targets))
    for t in targets:
        if not t.startswith("encoder.") or t not in registry:
            raise ConfigurationError(f"SVD target {t!r} is not an encoder weight")
        w = registry[t]
        if w.dim() not in (2, 4):
            raise ConfigurationError(f"SVD target {t!r} has unsupported rank {w.dim()}")
        f = decompose(w)
        state.factors[t] = f
        model.svd[adapter_key(t)] = SigmaAdapter(t, f)
    return state


def adapter_targets(model) -> list[str]:
    return [a.target for a in model.svd.values()]
