"""Corruption operators, per-modality menus and the degradation sampler.

Images are channel-first float arrays ``(3, H, W)`` in ``[0, 1]``. Every
operator is a pure function of ``(image, spec)``: randomness comes only from
``spec.seed`` and resolved parameters live in ``spec.params``.

Severity ``0`` is reserved for the analytically neutral parameters of each
operator (identity transform).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .exceptions import ConfigurationError

KINDS = (
    "gaussian_noise", "gaussian_blur", "brightness", "contrast", "speckle",
    "salt_pepper", "rician", "rayleigh", "poisson", "step_motion",
    "motion_blur", "zoom_blur", "compression", "iso_noise", "color_jitter",
)
COMMON_KINDS = ("gaussian_noise", "gaussian_blur", "contrast", "brightness")

# modality-specific rows; every menu also includes COMMON_KINDS
MODALITY_SPECIFIC = {
    "ultrasound": ("speckle", "salt_pepper"),
    "mri": ("rician", "rayleigh", "step_motion"),
    "ct": ("poisson", "step_motion"),
    "xray": ("poisson",),
    "microscopy": ("poisson",),
    "endoscopy": ("motion_blur", "zoom_blur", "compression"),
    "fundus": ("iso_noise", "zoom_blur", "compression"),
    "oct": ("speckle",),
    "pathology": ("iso_noise", "color_jitter"),
    "nuclei": ("salt_pepper", "color_jitter"),
    "dermoscopy": ("color_jitter", "compression"),
}
MODALITIES = tuple(MODALITY_SPECIFIC)
# pseudo-modality for natural-image style data: every operator applies
NATURAL = "natural"
SEVERITIES = (1, 2, 3)

# severity 1..3 values; index 0 is the neutral setting
SEVERITY_TABLE = {
    "gaussian_noise": {"sigma": (0.0, 0.04, 0.08, 0.12)},
    "gaussian_blur": {"sigma": (0.0, 0.8, 1.6, 2.4)},
    "brightness": {"magnitude": (0.0, 0.1, 0.2, 0.3)},
    "contrast": {"factor": (1.0, 0.75, 0.55, 0.35)},
    "speckle": {"sigma": (0.0, 0.15, 0.25, 0.35)},
    "salt_pepper": {"fraction": (0.0, 0.01, 0.02, 0.04)},
    "rician": {"sigma": (0.0, 0.05, 0.10, 0.15)},
    "rayleigh": {"scale": (0.0, 0.05, 0.10, 0.15)},
    "poisson": {"peak": (float("inf"), 60.0, 30.0, 15.0)},
    "step_motion": {"fraction": (0.0, 0.15, 0.25, 0.35), "shift": (0, 2, 4, 6)},
    "motion_blur": {"length": (1, 5, 9, 13)},
    "zoom_blur": {"max_scale": (1.0, 1.06, 1.12, 1.18)},
    "compression": {"quality": (100, 40, 25, 10)},
    "iso_noise": {
        "sigma0": (0.0, 0.03, 0.06, 0.09),
        "sigma1": (0.0, 0.02, 0.04, 0.06),
        "gain_jitter": (0.0, 0.02, 0.04, 0.06),
    },
    "color_jitter": {"magnitude": (0.0, 0.1, 0.2, 0.3), "hue": (0.0, 0.02, 0.04, 0.06)},
}

JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class DegradationSpec:
    kind: str
    severity: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "params": self.params, "seed": int(self.seed)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["kind"], int(d["severity"]), dict(d["params"]), int(d["seed"]))


def modality_menu(modality: str) -> list[str]:
    """Degradation kinds applicable to ``modality``.

    The ``"natural"`` pseudo-modality returns every operator.
    """
    if modality == NATURAL:
        return list(KINDS)
    try:
        specific = MODALITY_SPECIFIC[modality]
    except KeyError:
        raise ConfigurationError(f"unknown modality {modality!r}; expected one of {MODALITIES}") from None
    return list(specific) + list(COMMON_KINDS)


def make_spec(kind: str, severity: int, seed: int) -> DegradationSpec:
    """Resolve the operator parameters for ``(kind, severity)`` from ``seed``."""
    if kind not in SEVERITY_TABLE:
        raise ConfigurationError(f"unknown degradation kind {kind!r}")
    if severity not in (0, *SEVERITIES):
        raise ConfigurationError(f"severity must be in 0..3, got {severity}")
    table = SEVERITY_TABLE[kind]
    params = {name: values[severity] for name, values in table.items()}
    rng = np.random.default_rng([seed, 1])
    if kind == "brightness":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        params = {"shift": sign * params.pop("magnitude")}
    elif kind == "contrast":
        if rng.random() < 0.5:
            params["factor"] = 1.0 / params["factor"]
    elif kind == "step_motion":
        params["start"] = float(rng.uniform(0.0, 1.0 - params["fraction"]))
    elif kind == "motion_blur":
        params["angle"] = float(rng.uniform(0.0, 180.0))
    elif kind == "color_jitter":
        m, h = params.pop("magnitude"), params.pop("hue")
        params = {
            "brightness": float(rng.uniform(-m, m)),
            "contrast": float(rng.uniform(-m, m)),
            "saturation": float(rng.uniform(-m, m)),
            "hue": float(rng.uniform(-h, h)),
            "order": [int(i) for i in rng.permutation(4)],
        }
    return DegradationSpec(kind, severity, params, int(seed))


def sample_degradation(modality: str, rng: np.random.Generator) -> DegradationSpec:
    menu = modality_menu(modality)
    kind = menu[int(rng.integers(len(menu)))]
    severity = int(rng.integers(1, 4))
    seed = int(rng.integers(0, 2**63 - 1))
    return make_spec(kind, severity, seed)


# --- operators -------------------------------------------------------------


def _gaussian_noise(x, p, rng):
    return x + rng.normal(0.0, p["sigma"], x.shape)


def _gaussian_blur(x, p, rng):
    if p["sigma"] == 0:
        return x
    return np.stack([ndimage.gaussian_filter(c, p["sigma"], mode="reflect") for c in x])


def _brightness(x, p, rng):
    return x + p["shift"]


def _contrast(x, p, rng):
    return (x - 0.5) * p["factor"] + 0.5


def _speckle(x, p, rng):
    return x * (1.0 + rng.normal(0.0, p["sigma"], x.shape))


def _salt_pepper(x, p, rng):
    _, h, w = x.shape
    hit = rng.random((h, w)) < p["fraction"]
    salt = rng.random((h, w)) < 0.5
    out = x.copy()
    out[:, hit & salt] = 1.0
    out[:, hit & ~salt] = 0.0
    return out


def _rician(x, p, rng):
    s = p["sigma"]
    return np.sqrt((x + rng.normal(0.0, s, x.shape)) ** 2 + rng.normal(0.0, s, x.shape) ** 2)


def _rayleigh(x, p, rng):
    s = p["scale"]
    if s == 0:
        return x
    return x + rng.rayleigh(s, x.shape) - s * np.sqrt(np.pi / 2)


def _poisson(x, p, rng):
    lam = p["peak"]
    if np.isinf(lam):
        return x
    return rng.poisson(np.clip(x, 0, None) * lam) / lam


def _step_motion(x, p, rng):
    """Replace a contiguous block of k-space rows with those of a shifted copy."""
    _, h, _ = x.shape
    n_rows = int(round(p["fraction"] * h))
    if n_rows == 0 or p["shift"] == 0:
        return x
    start = min(int(round(p["start"] * h)), h - n_rows)
    k = sfft.fft2(x, axes=(1, 2))
    k_moved = sfft.fft2(np.roll(x, int(p["shift"]), axis=1), axes=(1, 2))
    rows = sfft.ifftshift(np.arange(h))[start:start + n_rows]
    k[:, rows, :] = k_moved[:, rows, :]
    return sfft.ifft2(k, axes=(1, 2)).real


def _motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    if length <= 1:
        return np.ones((1, 1))
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2
    theta = np.deg2rad(angle_deg)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        px, py = c + t * np.cos(theta), c - t * np.sin(theta)
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    k[yy, xx] += wy * wx
    return k / k.sum()


def _motion_blur(x, p, rng):
    k = _motion_kernel(int(p["length"]), p["angle"])
    if k.size == 1:
        return x
    return np.stack([ndimage.convolve(c, k, mode="reflect") for c in x])


def _center_zoom(c: np.ndarray, scale: float) -> np.ndarray:
    h, w = c.shape
    z = ndimage.zoom(c, scale, order=1, mode="nearest")
    top, left = (z.shape[0] - h) // 2, (z.shape[1] - w) // 2
    return z[top:top + h, left:left + w]


def _zoom_blur(x, p, rng):
    n_steps = int(round((p["max_scale"] - 1.0) / 0.02))
    if n_steps <= 0:
        return x
    scales = 1.0 + 0.02 * np.arange(1, n_steps + 1)
    acc = x.copy()
    for s in scales:
        acc += np.stack([_center_zoom(c, s) for c in x])
    return acc / (len(scales) + 1)


def jpeg_quant_table(quality: int) -> np.ndarray | None:
    """IJG-scaled luminance table; ``None`` means lossless (quality >= 100)."""
    if quality >= 100:
        return None
    q = max(int(quality), 1)
    scale = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((JPEG_LUMA * scale + 50) / 100), 1, 255)


def _compression(x, p, rng):
    table = jpeg_quant_table(p["quality"])
    if table is None:
        return x
    _, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    y = np.pad(x * 255.0 - 128.0, ((0, 0), (0, ph), (0, pw)), mode="edge")
    n, hh, ww = y.shape
    blocks = y.reshape(n, hh // 8, 8, ww // 8, 8)
    coef = sfft.dctn(blocks, type=2, norm="ortho", axes=(2, 4))
    t = table[None, None, :, None, :]
    coef = np.round(coef / t) * t
    rec = sfft.idctn(coef, type=2, norm="ortho", axes=(2, 4)).reshape(n, hh, ww)
    return (rec[:, :h, :w] + 128.0) / 255.0


def _iso_noise(x, p, rng):
    gains = 1.0 + rng.uniform(-p["gain_jitter"], p["gain_jitter"], (x.shape[0], 1, 1))
    sigma = p["sigma0"] * np.sqrt(np.clip(x, 0, None)) + p["sigma1"]
    return x * gains + rng.normal(0.0, 1.0, x.shape) * sigma


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def _hue_rotate(x, turns):
    if turns == 0:
        return x
    a = 2 * np.pi * turns
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    m = _YIQ_INV @ rot @ _YIQ
    return np.einsum("ij,jhw->ihw", m, x)


def _color_jitter(x, p, rng):
    def gray(y):
        return np.einsum("i,ihw->hw", _YIQ[0], y)[None]

    steps = (
        lambda y: y * (1.0 + p["brightness"]),
        lambda y: (y - gray(y).mean()) * (1.0 + p["contrast"]) + gray(y).mean(),
        lambda y: gray(y) + (y - gray(y)) * (1.0 + p["saturation"]),
        lambda y: _hue_rotate(y, p["hue"]),
    )
    for i in p["order"]:
        x = steps[i](x)
    return x


_OPERATORS = {
    "gaussian_noise": _gaussian_noise,
    "gaussian_blur": _gaussian_blur,
    "brightness": _brightness,
    "contrast": _contrast,
    "speckle": _speckle,
    "salt_pepper": _salt_pepper,
    "rician": _rician,
    "rayleigh": _rayleigh,
    "poisson": _poisson,
    "step_motion": _step_motion,
    "motion_blur": _motion_blur,
    "zoom_blur": _zoom_blur,
    "compression": _compression,
    "iso_noise": _iso_noise,
    "color_jitter": _color_jitter,
}


def apply_degradation(image: np.ndarray, spec: DegradationSpec, clip: bool = True) -> np.ndarray:
    """Apply ``spec`` to a ``(3, H, W)`` image in ``[0, 1]``.

    The result keeps the input dtype and shape. ``clip=False`` exposes the
    raw operator output for statistical checks.
    """
    try:
        op = _OPERATORS[spec.kind]
    except KeyError:
        raise ConfigurationError(f"unknown degradation kind {spec.kind!r}") from None
    img = np.asarray(image)
    if img.ndim != 3:
        raise ConfigurationError(f"expected (C, H, W) image, got shape {img.shape}")
    rng = np.random.default_rng([spec.seed, 0])
    out = op(img.astype(np.float64), spec.params, rng)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64, copy=False)
