"""Deterministic synthetic segmentation datasets in medical-like and natural styles.

Each sample holds one target object (the ground-truth mask) plus up to two
distractors drawn from the same shape family, so a prompt is needed to tell
which object to segment.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..degrade import MODALITIES, NATURAL
from ..exceptions import ConfigurationError

STYLES = ("medical-dark-field", "medical-textured", "natural-textured")
FAMILIES = ("ellipse", "blob", "multi-lobe", "thin-curve")
DEFAULT_SIZE_RANGE = {
    "ellipse": (0.03, 0.20),
    "blob": (0.03, 0.20),
    "multi-lobe": (0.04, 0.22),
    "thin-curve": (0.008, 0.06),
}


@dataclass
class ImageSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    modality: str
    seed: int
    sample_id: str = ""
    dataset: str = ""
    family: str = ""
    style: str = ""


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    name: str
    modality: str
    style: str
    n_samples: int
    family: str = "ellipse"
    size_range: tuple[float, float] | None = None
    image_size: int = 64
    max_distractors: int = 2
    contrast: float = 0.18
    texture: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigurationError(f"dataset {self.name!r} must have at least one sample")
        if self.style not in STYLES:
            raise ConfigurationError(f"unknown style {self.style!r}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")
        if self.modality not in MODALITIES and self.modality != NATURAL:
            raise ConfigurationError(f"unknown modality {self.modality!r}")

    @property
    def area_range(self) -> tuple[float, float]:
        return tuple(self.size_range or DEFAULT_SIZE_RANGE[self.family])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_range"] = list(self.area_range)
        return d

    def replace(self, **kw) -> "SyntheticDatasetSpec":
        d = asdict(self)
        d.update(kw)
        return SyntheticDatasetSpec(**d)


# --- shapes ----------------------------------------------------------------


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n]
    return yy + 0.5, xx + 0.5


def _ellipse(n, rng, scale):
    yy, xx = _grid(n)
    cy, cx = rng.uniform(0.2 * n, 0.8 * n, 2)
    a, b = scale * n * rng.uniform(0.6, 1.3, 2)
    t = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _blob(n, rng, scale):
    yy, xx = _grid(n)
    cy, cx = rng.uniform(0.2 * n, 0.8 * n, 2)
    r0 = scale * n
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.full_like(theta, r0)
    for k in (2, 3, 4):
        r += r0 * rng.uniform(0.0, 0.18) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(yy - cy, xx - cx) <= r


def _multi_lobe(n, rng, scale):
    yy, xx = _grid(n)
    cy, cx = rng.uniform(0.25 * n, 0.75 * n, 2)
    m = np.zeros((n, n), bool)
    for _ in range(int(rng.integers(2, 5))):
        oy, ox = rng.normal(0, scale * n * 0.7, 2)
        a, b = scale * n * rng.uniform(0.4, 0.8, 2)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy - oy, xx - cx - ox
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        m |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    lab, _ = ndimage.label(m)
    if lab.max() > 1:
        sizes = ndimage.sum(m, lab, range(1, lab.max() + 1))
        m = lab == (1 + int(np.argmax(sizes)))
    return m


def _thin_curve(n, rng, scale):
    yy, xx = _grid(n)
    p0, p1, p2 = rng.uniform(0.1 * n, 0.9 * n, (3, 2))
    t = np.linspace(0, 1, 8 * n)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    width = rng.uniform(0.9, 1.6)
    m = np.zeros((n, n), bool)
    for py, px in pts:
        m |= (yy - py) ** 2 + (xx - px) ** 2 <= width**2
    return m


_SHAPES = {"ellipse": _ellipse, "blob": _blob, "multi-lobe": _multi_lobe, "thin-curve": _thin_curve}


def _shape_in_range(family, n, rng, area_range, max_tries=200):
    lo, hi = area_range
    for _ in range(max_tries):
        scale = np.sqrt(rng.uniform(lo, hi) / np.pi) if family != "thin-curve" else 0.0
        m = _SHAPES[family](n, rng, scale)
        frac = m.mean()
        if m.any() and lo <= frac <= hi:
            return m
    raise ConfigurationError(f"could not draw a {family} mask with area in {area_range}")


# --- rendering -------------------------------------------------------------


def _smooth_noise(rng, shape, sigma):
    z = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return z / (z.std() + 1e-12)


def _render(spec: SyntheticDatasetSpec, objects, rng):
    n = spec.image_size
    k = spec.texture
    alpha = [ndimage.gaussian_filter(o.astype(np.float64), 0.6) for o in objects]
    if spec.style == "natural-textured":
        bg_col = rng.uniform(0.2, 0.8, 3)
        obj_col = bg_col.copy()
        while np.abs(obj_col - bg_col).sum() < 0.45:
            obj_col = rng.uniform(0.05, 0.95, 3)
        img = bg_col[:, None, None] + 0.08 * k * np.stack([_smooth_noise(rng, (n, n), 2.5) for _ in range(3)])
        for a in alpha:
            obj = obj_col[:, None, None] + 0.06 * k * _smooth_noise(rng, (n, n), 1.0)[None]
            img = img * (1 - a) + obj * a
        return np.clip(img, 0, 1)
    if spec.style == "medical-dark-field":
        base = 0.15 + 0.05 * k * _smooth_noise(rng, (n, n), 6.0) + 0.03 * k * _smooth_noise(rng, (n, n), 0.7)
        level = spec.contrast * rng.uniform(0.8, 1.3)
        gray = base.copy()
        for a in alpha:
            gray = gray + a * (level + 0.03 * k * _smooth_noise(rng, (n, n), 1.2))
        tint = np.ones(3)
    else:
        base = 0.5 + 0.07 * k * _smooth_noise(rng, (n, n), 2.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        level = sign * spec.contrast * rng.uniform(0.8, 1.3)
        gray = base.copy()
        for a in alpha:
            gray = gray * (1 - a) + a * (0.5 + level + 0.05 * k * _smooth_noise(rng, (n, n), 0.8))
        tint = 1.0 + rng.uniform(-0.08, 0.08, 3)
    return np.clip(gray[None] * tint[:, None, None], 0, 1)


def generate_sample(spec: SyntheticDatasetSpec, index: int) -> ImageSample:
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    target = _shape_in_range(spec.family, n, rng, spec.area_range)
    occupied = ndimage.binary_dilation(target, iterations=3)
    objects = [target]
    for _ in range(int(rng.integers(0, spec.max_distractors + 1))):
        for _try in range(20):
            d = _SHAPES[spec.family](n, rng, np.sqrt(rng.uniform(*spec.area_range) / np.pi))
            if d.any() and not (d & occupied).any():
                objects.append(d)
                occupied |= ndimage.binary_dilation(d, iterations=3)
                break
    image = _render(spec, objects, rng).astype(np.float32)
    return ImageSample(
        image=image,
        mask=target.astype(np.uint8),
        modality=spec.modality,
        seed=int(spec.seed),
        sample_id=f"{spec.name}/{index:05d}",
        dataset=spec.name,
        family=spec.family,
        style=spec.style,
    )


def generate_dataset(spec: SyntheticDatasetSpec, seed: int | None = None) -> list[ImageSample]:
    """All samples of ``spec``; ``seed`` overrides ``spec.seed`` when given."""
    if seed is not None:
        spec = spec.replace(seed=seed)
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


# --- default suites --------------------------------------------------------


def medical_suite(n_samples: int, seed: int, image_size: int = 64) -> list[SyntheticDatasetSpec]:
    """In-distribution medical-style datasets (one per modality tag)."""
    rows = [
        ("us_lesion", "ultrasound", "medical-dark-field", "blob"),
        ("mri_gland", "mri", "medical-dark-field", "ellipse"),
        ("ct_organ", "ct", "medical-textured", "multi-lobe"),
        ("derm_lesion", "dermoscopy", "medical-textured", "blob"),
    ]
    return [
        SyntheticDatasetSpec(name, mod, style, n_samples, fam, image_size=image_size, seed=seed + 101 * i)
        for i, (name, mod, style, fam) in enumerate(rows)
    ]


def natural_suite(n_samples: int, seed: int, image_size: int = 64) -> list[SyntheticDatasetSpec]:
    """Natural-image style datasets used to pretrain the robustness parent."""
    return [
        SyntheticDatasetSpec(f"natural_{fam}", NATURAL, "natural-textured", n_samples, fam,
                             image_size=image_size, seed=seed + 211 * i)
        for i, fam in enumerate(("ellipse", "blob", "multi-lobe"))
    ]


def ood_suite(n_samples: int, seed: int, image_size: int = 64) -> list[SyntheticDatasetSpec]:
    """Style/family combinations absent from :func:`medical_suite`."""
    rows = [
        ("fundus_vessel", "fundus", "medical-dark-field", "thin-curve"),
        ("endo_polyp", "endoscopy", "medical-textured", "ellipse"),
        ("path_gland", "pathology", "medical-dark-field", "multi-lobe"),
    ]
    return [
        SyntheticDatasetSpec(name, mod, style, n_samples, fam, image_size=image_size, seed=seed + 307 * i)
        for i, (name, mod, style, fam) in enumerate(rows)
    ]


def check_disjoint(train_specs, held_out_specs) -> None:
    """Held-out specs must share no (style, family) combination with training specs."""
    seen = {(s.style, s.family) for s in train_specs}
    for s in held_out_specs:
        if (s.style, s.family) in seen:
            raise ConfigurationError(
                f"held-out dataset {s.name!r} overlaps training specs on ({s.style}, {s.family})"
            )
