"""Miniature promptable segmentation model.

Three parameter groups with fixed name prefixes:

* ``encoder.``         patch ViT followed by a two-convolution neck
* ``prompt_encoder.``  Fourier positional features plus label/corner embeddings
* ``decoder.``         two-way attention decoder with the anti-degradation
                       mask-feature (AMFG) and output-token (AOTG) modules

A fourth prefix, ``svd.``, holds singular-value adapters installed by
:mod:`fusedseg.svdadapt`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, InvalidPromptError, NumericError

NORM_EPS = 1e-5
GROUPS = ("encoder", "prompt_encoder", "decoder", "svd")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    encoder_depth: int = 4
    num_heads: int = 2
    neck_channels: int = 32
    decoder_depth: int = 2
    token_dim: int = 32
    mlp_ratio: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigurationError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads or self.token_dim % self.num_heads:
            raise ConfigurationError("embed_dim and token_dim must be divisible by num_heads")
        if self.token_dim % 2:
            raise ConfigurationError("token_dim must be even (sin/cos positional features)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PromptSet:
    """Batched prompts.

    ``points`` is ``(batch, K, 2)`` in (x, y) pixel coordinates with
    ``labels`` ``(batch, K)``; ``boxes`` is ``(batch, 4)`` as
    ``(x_min, y_min, x_max, y_max)``.
    """

    mode: str
    points: np.ndarray | None = None
    labels: np.ndarray | None = None
    boxes: np.ndarray | None = None

    @classmethod
    def from_points(cls, points, labels=None) -> "PromptSet":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        if labels is None:
            lab = np.ones(pts.shape[:2], dtype=np.int64)
        else:
            lab = np.asarray(labels, dtype=np.int64).reshape(pts.shape[:2])
        return cls(mode="points", points=pts, labels=lab)

    @classmethod
    def from_box(cls, boxes) -> "PromptSet":
        b = np.asarray(boxes, dtype=np.float64)
        if b.ndim == 1:
            b = b[None]
        return cls(mode="box", boxes=b)

    @classmethod
    def stack(cls, prompts: list["PromptSet"]) -> "PromptSet":
        modes = {p.mode for p in prompts}
        if len(modes) != 1:
            raise InvalidPromptError("cannot stack prompts of mixed modes")
        if prompts[0].mode == "box":
            return cls.from_box(np.concatenate([p.boxes for p in prompts]))
        ks = {p.points.shape[1] for p in prompts}
        if len(ks) != 1:
            raise InvalidPromptError(f"cannot stack point prompts with differing K: {sorted(ks)}")
        return cls.from_points(
            np.concatenate([p.points for p in prompts]),
            np.concatenate([p.labels for p in prompts]),
        )

    @property
    def batch_size(self) -> int:
        return len(self.boxes) if self.mode == "box" else len(self.points)

    @property
    def num_tokens(self) -> int:
        return 2 if self.mode == "box" else self.points.shape[1]

    def validate(self, image_size: int) -> None:
        if self.mode == "points":
            if self.points is None or self.points.size == 0 or self.points.shape[1] == 0:
                raise InvalidPromptError("points mode requires at least one point")
            if self.points.ndim != 3 or self.points.shape[2] != 2:
                raise InvalidPromptError(f"points must be (batch, K, 2), got {self.points.shape}")
            if np.any(self.points < 0) or np.any(self.points >= image_size):
                raise InvalidPromptError(f"point coordinates must lie in [0, {image_size})")
            if not np.isin(self.labels, (0, 1)).all():
                raise InvalidPromptError("point labels must be 0 or 1")
        elif self.mode == "box":
            if self.boxes is None or self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
                raise InvalidPromptError("box mode requires boxes of shape (batch, 4)")
            b = self.boxes
            if np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3]):
                raise InvalidPromptError("box requires x_min < x_max and y_min < y_max")
        else:
            raise InvalidPromptError(f"unknown prompt mode {self.mode!r}")


class MaskPrediction(NamedTuple):
    logits: torch.Tensor

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def binary(self) -> torch.Tensor:
        return (self.probabilities > 0.5).to(torch.uint8)


class DecoderIntermediates(NamedTuple):
    mask_features: torch.Tensor
    robust_token: torch.Tensor


class PairOutputs(NamedTuple):
    clean: tuple[MaskPrediction, DecoderIntermediates]
    degraded: tuple[MaskPrediction, DecoderIntermediates]


# --- building blocks -------------------------------------------------------


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, num_layers, activation=nn.ReLU):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))
        self.act = activation()

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class ViTBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, 2, nn.GELU)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patch ViT with a SAM-style neck (1x1 conv, LN, 3x3 conv, LN)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.grid_size
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, g * g, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            ViTBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.embed_dim, cfg.neck_channels, 1, bias=False),
            LayerNorm2d(cfg.neck_channels),
            nn.Conv2d(cfg.neck_channels, cfg.neck_channels, 3, padding=1, bias=False),
            LayerNorm2d(cfg.neck_channels),
        )

    def forward(self, x, weight_overrides: dict[str, torch.Tensor] | None = None):
        overrides = weight_overrides or {}
        x = self.patch_embed((x - 0.5) / 0.25)
        b, c, h, w = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = x.transpose(1, 2).reshape(b, c, h, w)
        for idx, layer in enumerate(self.neck):
            key = f"neck.{idx}.weight"
            if isinstance(layer, nn.Conv2d) and key in overrides:
                x = F.conv2d(x, overrides[key], layer.bias, layer.stride, layer.padding)
            else:
                x = layer(x)
        return x


class PromptEncoder(nn.Module):
    """Random-Fourier positional features with label and box-corner embeddings."""

    def __init__(self, cfg: ModelConfig, scale: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("pe_gaussian", scale * torch.randn(2, cfg.token_dim // 2))
        self.label_embed = nn.Embedding(2, cfg.token_dim)
        self.corner_embed = nn.Embedding(2, cfg.token_dim)

    def _pe(self, coords01: torch.Tensor) -> torch.Tensor:
        proj = (2 * coords01 - 1) @ self.pe_gaussian * (2 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def forward(self, prompts: PromptSet) -> torch.Tensor:
        prompts.validate(self.cfg.image_size)
        dtype = self.pe_gaussian.dtype
        size = self.cfg.image_size
        if prompts.mode == "points":
            pts = torch.as_tensor(prompts.points, dtype=dtype)
            labels = torch.as_tensor(prompts.labels, dtype=torch.long)
            return self._pe((pts + 0.5) / size) + self.label_embed(labels)
        boxes = torch.as_tensor(prompts.boxes, dtype=dtype).reshape(-1, 2, 2)
        corners = torch.arange(2)
        return self._pe((boxes + 0.5) / size) + self.corner_embed(corners)[None]

    def dense_pe(self) -> torch.Tensor:
        g = self.cfg.grid_size
        centers = (torch.arange(g, dtype=self.pe_gaussian.dtype) + 0.5) / g
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        pe = self._pe(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)


class TwoWayBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_dim, skip_first_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth, dim, num_heads, mlp_dim):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = Attention(dim, num_heads)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image, image_pe, tokens):
        keys = image.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        attn = self.final_attn(queries + tokens, keys + key_pe, keys)
        return self.norm_final(queries + attn), keys


class AMFG(nn.Module):
    """Anti-degradation mask-feature generation.

    IN and BN branches are mixed by a sigmoid gate, concatenated with the
    input, reweighted by squeeze-excitation channel attention, projected back
    to ``C`` channels and finally filtered in the Fourier domain: a 1x1
    convolution acts on the amplitude spectrum while the phase is kept.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        c = channels
        self.inorm = nn.InstanceNorm2d(c, affine=True, eps=NORM_EPS)
        self.bnorm = nn.BatchNorm2d(c, eps=NORM_EPS)
        self.gate = nn.Conv2d(2 * c, c, 1)
        hidden = max(2 * c // reduction, 1)
        self.channel_attn = nn.Sequential(
            nn.Linear(2 * c, hidden), nn.ReLU(), nn.Linear(hidden, 2 * c), nn.Sigmoid()
        )
        self.proj = nn.Conv2d(2 * c, c, 1)
        self.amp_filter = nn.Conv2d(c, c, 1)
        with torch.no_grad():
            self.amp_filter.weight.copy_(torch.eye(c)[:, :, None, None])
            self.amp_filter.bias.zero_()

    def fuse(self, x: torch.Tensor) -> torch.Tensor:
        """Everything before the Fourier step."""
        a, b = self.inorm(x), self.bnorm(x)
        g = torch.sigmoid(self.gate(torch.cat([a, b], 1).mean((2, 3), keepdim=True)))
        mixed = g * a + (1 - g) * b
        y = torch.cat([mixed, x], 1)
        y = y * self.channel_attn(y.mean((2, 3)))[:, :, None, None]
        return self.proj(y)

    def amplitude_filter(self, y: torch.Tensor) -> torch.Tensor:
        spec = torch.fft.fft2(y, norm="ortho")
        amp = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-12)
        unit_phase = spec / amp
        return torch.fft.ifft2(self.amp_filter(amp) * unit_phase, norm="ortho").real

    def forward(self, x):
        if x.dim() != 4 or min(x.shape[-2:]) < 2:
            raise ConfigurationError(f"AMFG expects (batch, C, h, w) with h, w >= 2, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NumericError("AMFG received non-finite features")
        return self.amplitude_filter(self.fuse(x))


class AOTG(nn.Module):
    """Anti-degradation output-token generation: stacked instance norms and one MLP layer."""

    def __init__(self, dim: int, num_norms: int = 2):
        super().__init__()
        self.norms = nn.ModuleList(
            nn.InstanceNorm1d(1, affine=False, eps=NORM_EPS) for _ in range(num_norms)
        )
        self.scales = nn.Parameter(torch.ones(num_norms, dim))
        self.shifts = nn.Parameter(torch.zeros(num_norms, dim))
        self.mlp = nn.Linear(dim, dim)

    def forward(self, token):
        x = token[:, None, :]
        for i, norm in enumerate(self.norms):
            x = norm(x) * self.scales[i] + self.shifts[i]
        return self.mlp(x[:, 0])


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.token_dim
        self.cfg = cfg
        if cfg.neck_channels == d:
            self.input_proj = nn.Identity()
        else:
            self.input_proj = nn.Conv2d(cfg.neck_channels, d, 1)
        self.output_token = nn.Embedding(1, d)
        self.transformer = TwoWayTransformer(cfg.decoder_depth, d, cfg.num_heads, int(d * cfg.mlp_ratio))
        self.hyper_mlp = MLP(d, d, d, 3)
        self.amfg = AMFG(d)
        self.aotg = AOTG(d)

    def forward(self, image_emb, image_pe, sparse_tokens, robust_mode=True):
        b = image_emb.shape[0]
        if sparse_tokens.shape[0] != b:
            raise ConfigurationError(
                f"prompt batch {sparse_tokens.shape[0]} does not match image batch {b}"
            )
        src = self.input_proj(image_emb)
        out_tok = self.output_token.weight[None].expand(b, -1, -1)
        tokens = torch.cat([out_tok, sparse_tokens], dim=1)
        hs, keys = self.transformer(src, image_pe[None], tokens)
        feats = keys.transpose(1, 2).reshape(src.shape)
        token = hs[:, 0]
        if robust_mode:
            feats = self.amfg(feats)
            token = self.aotg(token)
        hyper = self.hyper_mlp(token)
        low = torch.einsum("bc,bchw->bhw", hyper, feats)[:, None]
        size = self.cfg.image_size
        logits = F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)
        return MaskPrediction(logits), DecoderIntermediates(feats, token)


class SamModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        if seed is not None:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        self.encoder = ImageEncoder(self.cfg)
        self.prompt_encoder = PromptEncoder(self.cfg)
        self.decoder = MaskDecoder(self.cfg)
        self.svd = nn.ModuleDict()
        if seed is not None:
            torch.random.set_rng_state(gen_state)

    # -- forward passes -----------------------------------------------------

    def _check_batch(self, x):
        s = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ConfigurationError(f"expected image batch (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def _encoder_trainable(self) -> bool:
        return any(p.requires_grad for p in self.encoder.parameters()) or any(
            p.requires_grad for p in self.svd.parameters()
        )

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        self._check_batch(x)
        overrides = {a.target.removeprefix("encoder."): a.weight() for a in self.svd.values()}
        with torch.set_grad_enabled(torch.is_grad_enabled() and self._encoder_trainable()):
            return self.encoder(x, overrides)

    def encode_prompts(self, prompts: PromptSet) -> torch.Tensor:
        return self.prompt_encoder(prompts)

    def decode_masks(self, emb, pemb, robust_mode=True):
        return self.decoder(emb, self.prompt_encoder.dense_pe(), pemb, robust_mode)

    def forward(self, x, prompts: PromptSet, robust_mode=True) -> MaskPrediction:
        pemb = self.encode_prompts(prompts)
        return self.decode_masks(self.encode_image(x), pemb, robust_mode)[0]

    def forward_pair(self, x_c, x_d, prompts: PromptSet, robust_mode=True) -> PairOutputs:
        """Decode a clean/degraded pair with shared encoder and prompt tokens.

        The clean branch runs without gradient tracking and serves as the
        consistency anchor.
        """
        if x_c.shape != x_d.shape:
            raise ConfigurationError(f"clean {tuple(x_c.shape)} and degraded {tuple(x_d.shape)} differ")
        pemb = self.encode_prompts(prompts)
        with torch.no_grad():
            clean = self.decode_masks(self.encode_image(x_c), pemb, robust_mode)
        degraded = self.decode_masks(self.encode_image(x_d), pemb, robust_mode)
        return PairOutputs(clean, degraded)

    # -- registry -----------------------------------------------------------

    def registry(self) -> dict[str, torch.Tensor]:
        """All named tensors (parameters and buffers) under group prefixes."""
        return dict(self.state_dict(keep_vars=True))


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head not in GROUPS:
        raise ConfigurationError(f"tensor {name!r} is outside the known groups {GROUPS}")
    return head
