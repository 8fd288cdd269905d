"""``fusedseg`` command line.

Exit codes: 0 success, 1 usage error, 2 configuration or file-format error,
3 numeric failure. ``FUSEDSEG_WORKERS`` sets the torch thread count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline
from .exceptions import (CheckpointFormatError, ConfigurationError, IncompatibleCheckpointError,
                         InvalidPromptError, NumericError)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fusedseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config(p):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. train.epochs=3 (repeatable)")
    p.add_argument("--seed", type=int, help="top-level experiment seed")


def _add_ckpts(p):
    p.add_argument("--ckpt", action="append", required=True, metavar="[NAME=]PATH",
                   help="checkpoint to evaluate (repeatable); NAME defaults to the file stem")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusedseg", description="Robust promptable segmentation by module fusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("make-parents", help="train the medical (A) and robustness (B) parents")
    _add_config(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fuse", help="combine encoder-side and decoder-side checkpoints")
    p.add_argument("--encoder", required=True, help="checkpoint supplying encoder and prompt encoder")
    p.add_argument("--decoder", required=True, help="checkpoint supplying the mask decoder")
    p.add_argument("--plan", help='JSON group assignment, e.g. {"encoder":"A","prompt_encoder":"A","decoder":"B"}')
    p.add_argument("--out", required=True, help="fused checkpoint path")

    p = sub.add_parser("train", help="fine-tune a checkpoint on the medical training split")
    _add_config(p)
    p.add_argument("--init", required=True, help="starting checkpoint")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="benchmark checkpoints and write report files")
    _add_config(p)
    _add_ckpts(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("corrupt", help="apply one degradation to a PNG")
    p.add_argument("--in", dest="input", required=True, help="input PNG")
    p.add_argument("--kind", required=True)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG; the spec is written next to it as JSON")

    p = sub.add_parser("sweep", help="prompt-count sensitivity sweep")
    _add_config(p)
    _add_ckpts(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="rebuild derived report tables from records.csv")
    p.add_argument("--records", required=True)
    p.add_argument("--manifest", help="manifest to carry over (defaults to one next to records.csv)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _named_ckpts(items):
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        out.append((name, path))
    return out


def _read_png(path) -> tuple[np.ndarray, str]:
    with Image.open(path) as im:
        im.load()
        mode = "L" if im.mode in ("L", "I;16", "I", "1") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    if mode == "L":
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr, mode


def _write_png(img: np.ndarray, mode: str, path) -> None:
    u8 = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    if mode == "L":
        Image.fromarray(u8.mean(0).round().astype(np.uint8), mode="L").save(path, format="PNG")
    else:
        Image.fromarray(np.ascontiguousarray(np.moveaxis(u8, 0, -1)), mode="RGB").save(path, format="PNG")


def cmd_corrupt(args) -> None:
    from .bench.evaluate import file_digest
    from .degrade import apply_degradation, make_spec

    img, mode = _read_png(args.input)
    spec = make_spec(args.kind, args.severity, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_png(apply_degradation(img, spec), mode, out)
    spec_path = out.with_suffix(".json")
    spec_path.write_text(spec.to_json() + "\n", encoding="utf-8")
    pipeline.write_manifest(out.parent, None, "corrupt", inputs=[args.input], outputs=[out, spec_path],
                            extra={"spec": spec.to_dict(), "input_hash": file_digest(args.input)})


def dispatch(args) -> None:
    cmd = args.command
    if cmd == "fuse":
        plan = None
        if args.plan:
            try:
                plan = json.loads(args.plan)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"--plan is not valid JSON: {e}") from None
        pipeline.stage_fuse(args.encoder, args.decoder, args.out, plan)
    elif cmd == "corrupt":
        cmd_corrupt(args)
    elif cmd == "report":
        manifest = args.manifest or Path(args.records).with_name("manifest.json")
        pipeline.stage_report(args.records, args.out, manifest)
    else:
        cfg = pipeline.load_config(args.config, args.overrides, args.seed)
        if cmd == "make-parents":
            pipeline.stage_make_parents(cfg, args.out)
        elif cmd == "train":
            pipeline.stage_train(cfg, args.init, args.out)
        elif cmd == "eval":
            pipeline.stage_eval(cfg, _named_ckpts(args.ckpt), args.out)
        elif cmd == "sweep":
            pipeline.stage_sweep(cfg, _named_ckpts(args.ckpt), args.out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    workers = os.environ.get("FUSEDSEG_WORKERS")
    if workers:
        import torch

        torch.set_num_threads(max(1, int(workers)))
    try:
        dispatch(args)
    except NumericError as e:
        print(f"fusedseg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, CheckpointFormatError, IncompatibleCheckpointError, InvalidPromptError,
            OSError) as e:
        print(f"fusedseg: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
