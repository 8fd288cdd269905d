"""Overlap and surface metrics on binary masks, plus aggregation helpers.

Conventions: both masks empty scores 1.0 on every metric; for NSD, exactly
one empty surface scores 0.0. Surfaces are 4-connected with the image border
counted as background.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError

log = logging.getLogger(__name__)

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class MetricConfig:
    nsd_tau: float = 2.0
    surface_connectivity: int = 4

    def __post_init__(self):
        if self.nsd_tau <= 0:
            raise ConfigurationError("nsd_tau must be positive")
        if self.surface_connectivity != 4:
            raise ConfigurationError("only 4-connectivity surfaces are supported")


@dataclass
class MetricRecord:
    sample_id: str
    dataset: str
    modality: str
    degradation: str
    severity: int
    prompt_mode: str
    k: int
    dice: float
    iou: float
    nsd: float
    model: str = ""
    family: str = ""
    ood: bool = False

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(p, g):
    p = np.asarray(p).astype(bool)
    g = np.asarray(g).astype(bool)
    if p.shape != g.shape:
        raise ConfigurationError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(p, g) -> float:
    p, g = _pair(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou(p, g) -> float:
    p, g = _pair(p, g)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def surface(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour."""
    m = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~interior


def nsd(p, g, tau: float = 2.0) -> float:
    p, g = _pair(p, g)
    sp, sg = surface(p), surface(g)
    n_p, n_g = int(sp.sum()), int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    # distance from every pixel to the nearest surface pixel of the other mask
    dist_to_g = ndimage.distance_transform_edt(~sg)
    dist_to_p = ndimage.distance_transform_edt(~sp)
    hits = int((dist_to_g[sp] <= tau).sum()) + int((dist_to_p[sg] <= tau).sum())
    return hits / (n_p + n_g)


def score(pred, target, config: MetricConfig | None = None) -> tuple[float, float, float]:
    cfg = config or MetricConfig()
    return dice(pred, target), iou(pred, target), nsd(pred, target, cfg.nsd_tau)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (N-1) standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def aggregate(records, group_by, metrics=("dice", "iou", "nsd")) -> list[dict]:
    """Group records and report mean/std/count per metric.

    Rows are sorted by group key. Records may be :class:`MetricRecord` or
    plain dicts.
    """
    if isinstance(group_by, str):
        group_by = (group_by,)
    groups = defaultdict(list)
    for r in records:
        d = r.as_dict() if isinstance(r, MetricRecord) else r
        groups[tuple(d[k] for k in group_by)].append(d)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        if not members:
            log.warning("empty group %s omitted", key)
            continue
        row = dict(zip(group_by, key))
        row["n"] = len(members)
        for m in metrics:
            row[f"{m}_mean"], row[f"{m}_std"] = mean_std([float(d[m]) for d in members])
        rows.append(row)
    return rows


def empirical_cdf(values) -> list[tuple[float, float]]:
    """Step points ``(value, fraction <= value)`` at each distinct value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empirical_cdf of an empty sequence")
    uniq, counts = np.unique(v, return_counts=True)
    frac = np.cumsum(counts) / v.size
    frac[-1] = 1.0
    return [(float(a), float(b)) for a, b in zip(uniq, frac)]
