"""Command-line entry point: augment, train, eval, infer, export-embeddings-template.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .augment import AugmentConfig, augment_dataset
from .backbone import INCEPTION_DIMS, Backbone, EmbeddingStore, load_embeddings, write_embeddings
from .dataset import Split, decode_image, encode_image, load_manifest, write_manifest
from .infer import classify_crops, read_boxes, render_overlay
from .metrics import evaluate, write_reports
from .nnhead import load_checkpoint, save_checkpoint
from .train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

EXPORT_README = """\
# Filling an FMDEMB1 embedding file

`{name}` holds an empty FMDEMB1 store with dims {h}x{w}x{c}.

To use real InceptionV3 features, run an external exporter that:

1. loads each image listed in the manifest and rescales it to 224x224;
2. runs InceptionV3 (ImageNet weights, classification top removed) and takes
   the final {h}x{w}x{c} activation map;
3. writes the file little-endian: magic `FMDEMB1\\n`, u32 record_count, u32 H,
   u32 W, u32 C, then per record a u16 key length, the UTF-8 key (the image
   path exactly as it appears in the manifest) and H*W*C float32 values in
   row-major (H, W, C) order.

Then pass `--backbone embedding --embeddings <file>` to train/eval/infer.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facemask", description="Face-mask classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def backbone_flags(sp):
        sp.add_argument("--backbone", choices=("embedding", "builtin"), default="builtin")
        sp.add_argument("--embeddings", help="FMDEMB1 file (with --backbone embedding)")

    a = sub.add_parser("augment", help="expand the TRAIN split with seeded augmentation")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--config", help="augment config JSON")
    a.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the classifier head")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="output checkpoint (default OUT_DIR/head.fmdhead)")
    backbone_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--config", help="train config JSON (for loss_base)")
    backbone_flags(e)

    i = sub.add_parser("infer", help="classify face boxes and render overlays")
    i.add_argument("--boxes", required=True, help="JSON-lines boxes file")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--grayscale", action="store_true",
                   help="grayscale crops before feature extraction")
    backbone_flags(i)

    x = sub.add_parser("export-embeddings-template",
                       help="write an empty FMDEMB1 file and exporter notes")
    x.add_argument("--out-dir", required=True)
    x.add_argument("--dims", default=",".join(map(str, INCEPTION_DIMS)), help="H,W,C")
    return p


def _backbone(args) -> Backbone:
    if args.backbone == "embedding":
        if not args.embeddings:
            raise UsageError("--backbone embedding requires --embeddings")
        return Backbone.embedding(load_embeddings(args.embeddings))
    return Backbone.default_builtin()


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(Path(args.config).read_text()) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_augment(args) -> None:
    cfg = AugmentConfig.from_json(Path(args.config).read_text()) if args.config else AugmentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out = augment_dataset(manifest, cfg, out_dir)
    write_manifest(out, out_dir / "manifest.csv")
    n_train, n_test = out.counts()
    print(f"wrote {len(out)} records ({n_train} train, {n_test} test) to {out_dir / 'manifest.csv'}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    manifest = load_manifest(args.manifest)
    backbone = _backbone(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def report(rec):
        print(f"epoch {rec.epoch:3d}/{cfg.epochs}  loss {rec.loss:.6f}  "
              f"accuracy {rec.accuracy:.4f}  {rec.seconds:.2f}s", flush=True)

    params, history = train(manifest, backbone, cfg, on_epoch=report)
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / "head.fmdhead"
    save_checkpoint(params, ckpt)
    history.write_csv(out_dir / "history.csv")
    print(f"checkpoint: {ckpt}")


def cmd_eval(args) -> None:
    loss_base = _train_config(args).loss_base
    manifest = load_manifest(args.manifest)
    params = load_checkpoint(args.checkpoint)
    backbone = _backbone(args)
    split = Split(args.split)
    report, cm, curve = evaluate(manifest, split, backbone, params, loss_base)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_reports(out_dir, report, cm, curve)
    print(f"{split.value} split, {cm.total} images")
    print(report.table(), end="")
    print(cm.table(), end="")


def cmd_infer(args) -> None:
    params = load_checkpoint(args.checkpoint)
    backbone = _backbone(args)
    boxes_path = Path(args.boxes)
    entries = read_boxes(boxes_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "detections.jsonl", "w", encoding="utf-8") as log_fh:
        for image, boxes in entries.items():
            src = Path(image)
            if not src.is_absolute():
                src = boxes_path.parent / src
            img = decode_image(src)
            dets = classify_crops(img, boxes, backbone, params, grayscale=args.grayscale,
                                  image_key=image if backbone.kind == "embedding" else None)
            out_path = out_dir / f"{src.stem}_out.ppm"
            encode_image(render_overlay(img, dets), out_path)
            log_fh.write(json.dumps({"image": image, "output": out_path.name,
                                     "detections": [d.to_dict() for d in dets]}) + "\n")
            summary = ", ".join(f"{d.label.value} {d.confidence:.3f}" for d in dets)
            print(f"{image}: {summary} -> {out_path}")


def cmd_export_template(args) -> None:
    try:
        dims = tuple(int(v) for v in args.dims.split(","))
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"--dims must be three positive integers H,W,C, got {args.dims!r}") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = "embeddings.fmdemb"
    write_embeddings(EmbeddingStore(dims), out_dir / name)
    h, w, c = dims
    (out_dir / "EXPORT.md").write_text(EXPORT_README.format(name=name, h=h, w=w, c=c))
    print(f"wrote {out_dir / name} and {out_dir / 'EXPORT.md'}")


COMMANDS = {
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "export-embeddings-template": cmd_export_template,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if getattr(args, "backbone", None) == "embedding" and not args.embeddings:
            raise UsageError("--backbone embedding requires --embeddings")
    except UsageError as exc:
        if "a command is required" in str(exc):
            parser.print_help(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"facemask {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, LookupError, RuntimeError) as exc:
        print(f"facemask {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
