"""Writes an :class:`~fusedseg.bench.evaluate.EvalReport` to disk.

Every file is written in a canonical order with fixed float formatting so the
same report always produces the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from ..metrics import MetricRecord

RECORDS_SCHEMA_VERSION = 1
TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue().encode("utf-8")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def overlay(image, pred, gt) -> np.ndarray:
    """RGB uint8 overlay: true positives green, false positives red, false negatives blue."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = np.moveaxis(img, 0, -1)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    out = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    out[p & g] = TP_COLOR
    out[p & ~g] = FP_COLOR
    out[~p & g] = FN_COLOR
    return out


def read_records(path) -> list[dict]:
    """Parse records.csv back into typed dicts."""
    types = {"severity": int, "k": int, "dice": float, "iou": float, "nsd": float,
             "ood": lambda s: s == "true"}
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: types.get(k, str)(v) for k, v in row.items()} for row in csv.DictReader(f)]


def emit_report(report, out_dir, overlays=()) -> dict[str, Path]:
    """Write records.csv, aggregates.json, deltas.csv, cdf.csv and manifest.json.

    ``overlays`` is an iterable of ``(name, image, pred, gt)``; each becomes
    ``overlays/<name>.png``. Returns the written paths keyed by file name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = MetricRecord.columns()
    files = {
        "records.csv": _csv_bytes(cols, [r.as_dict() for r in report.records]),
        "aggregates.json": _json_bytes({"schema_version": RECORDS_SCHEMA_VERSION, **report.aggregates}),
        "deltas.csv": _csv_bytes(["model", "prompt_mode", "k", "dataset", "clean_dice", "degraded_dice", "delta"],
                                 report.deltas),
        "cdf.csv": _csv_bytes(["model", "prompt_mode", "k", "granularity", "dice", "fraction"], report.cdf),
    }
    manifest = dict(report.manifest)
    manifest["records_schema_version"] = RECORDS_SCHEMA_VERSION
    manifest["records_columns"] = cols
    files["manifest.json"] = _json_bytes(manifest)
    written = {}
    for name, data in files.items():
        p = out / name
        p.write_bytes(data)
        written[name] = p
    overlays = list(overlays)
    if overlays:
        (out / "overlays").mkdir(exist_ok=True)
    for name, image, pred, gt in overlays:
        name = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
        p = out / "overlays" / f"{name}.png"
        Image.fromarray(overlay(image, pred, gt), mode="RGB").save(p, format="PNG")
        written[f"overlays/{name}.png"] = p
    return written
