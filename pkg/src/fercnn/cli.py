"""Command-line entry point: train, eval, predict, make-manifest, make-synthetic.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data, synthetic
from .labels import LABELS
from .metrics import confusion_csv, format_report, report_csv
from .model import CheckpointError, load_checkpoint, predict
from .train import (
    NumericalError, TrainConfig, evaluate, train, write_predictions,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    defaults = TrainConfig()
    p = _Parser(prog="fercnn", description="Seven-class facial expression CNN")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from one or more manifests")
    t.add_argument("--manifest", action="append", required=True,
                   help="path,label CSV; repeat to merge several before the 80:20 split")
    t.add_argument("--val-manifest", action="append", default=[],
                   help="explicit validation manifest; disables the split")
    t.add_argument("--images-dir", default=".")
    t.add_argument("--epochs", type=_positive_int, default=defaults.epochs)
    t.add_argument("--batch-size", type=_positive_int, default=defaults.batch_size)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    t.add_argument("--seed", type=int, default=defaults.seed)
    t.add_argument("--checkpoint", default=defaults.checkpoint,
                   help="latest-epoch checkpoint; the best one is written next to it as *.best.ckpt")
    t.add_argument("--out", help="directory for train_log.csv and training_curves.png")
    t.add_argument("--log-interval", type=int, default=0, help="log every N batches (0: per epoch only)")
    t.add_argument("--threads", type=_positive_int, default=1)
    t.add_argument("--precision", choices=("f32", "f64"), default="f32")

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", action="append", required=True)
    e.add_argument("--images-dir", default=".")
    e.add_argument("--out", help="directory for metrics.txt/.csv, confusion.csv/.png, predictions.csv")
    e.add_argument("--threads", type=_positive_int, default=1)

    pr = sub.add_parser("predict", help="classify a single image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("image")
    pr.add_argument("--threads", type=_positive_int, default=1)

    mm = sub.add_parser("make-manifest", help="convert per-video annotation files to a manifest")
    mm.add_argument("annotations_dir")
    mm.add_argument("--out", required=True, help="manifest CSV to write")
    mm.add_argument("--frame-template", default="{video}/{frame:05d}.jpg")

    ms = sub.add_parser("make-synthetic", help="write the seeded synthetic pattern dataset")
    ms.add_argument("--out", required=True, help="output directory")
    ms.add_argument("--per-class", type=_positive_int, default=10)
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--size", type=_positive_int, default=64)
    ms.add_argument("--noise", type=float, default=20.0)
    ms.add_argument("--name", default="manifest.csv", help="manifest file name inside --out")
    return p


def cmd_train(args) -> int:
    config = TrainConfig(
        manifests=args.manifest, val_manifests=args.val_manifest, images_dir=args.images_dir,
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
        seed=args.seed, checkpoint=args.checkpoint, out_dir=args.out, log_interval=args.log_interval,
        precision=args.precision, threads=args.threads,
    )
    _, history = train(config)
    last = history[-1]
    print(f"epochs,{len(history)}")
    print(f"final_loss,{last.loss:.6f}")
    print(f"val_accuracy,{last.val_accuracy:.6f}")
    print(f"val_macro_f1,{last.val_macro_f1:.6f}")
    print(f"checkpoint,{config.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    entries = []
    for m in args.manifest:
        entries += data.load_manifest(m)[0]
    dataset = data.load_dataset(entries, args.images_dir, args.threads)
    cm, preds, probs = evaluate(model, dataset)
    text = format_report(cm)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(text)
        (out / "metrics.csv").write_text(report_csv(cm))
        (out / "confusion.csv").write_text(confusion_csv(cm))
        write_predictions(out / "predictions.csv", dataset, preds, probs, LABELS)
        from .plots import plot_confusion
        plot_confusion(cm.counts, out / "confusion.png")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    img = data.load_image_48(args.image)
    pred, probs = predict(model, data.normalize(img[None], model.dtype))
    k = int(pred[0])
    print(f"prediction,{LABELS[k]},{k}")
    for name, p in zip(LABELS, probs[0]):
        print(f"{name},{p:.8f}")
    return EXIT_OK


def cmd_make_manifest(args) -> int:
    entries, dropped = data.annotations_to_manifest(args.annotations_dir, args.frame_template)
    data.write_manifest(args.out, entries)
    print(f"rows,{len(entries)}")
    print(f"dropped,{dropped}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    path = synthetic.write_dataset(args.out, args.per_class, args.seed, args.size, args.noise, args.name)
    print(f"manifest,{path}")
    print(f"samples,{args.per_class * len(LABELS)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "make-manifest": cmd_make_manifest,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fercnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    threads = getattr(args, "threads", 1)
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (data.DataError, CheckpointError) as exc:
        print(f"fercnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"fercnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"fercnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fercnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
