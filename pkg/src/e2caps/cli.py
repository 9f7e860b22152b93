"""Command-line entry point: ``e2caps <subcommand> ...``.

Exit status: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _cmd_gen_data(args):
    from .data import DEFAULT_CLASSES, SyntheticFaceParams, generate_synthetic_dataset

    classes = tuple(args.classes.split(",")) if args.classes else DEFAULT_CLASSES
    params = SyntheticFaceParams(classes=classes, samples_per_class=args.samples_per_class,
                                 image_size=args.image_size, noise=args.noise)
    m = generate_synthetic_dataset(params, args.seed, args.out, args.train_fraction)
    print(f"wrote {len(m)} samples ({len(classes)} classes) to {Path(args.out) / 'manifest.csv'}")


def _cmd_train(args):
    from .data import read_manifest
    from .train import TrainConfig, train

    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    cfg = TrainConfig.load(args.config, **overrides) if args.config else \
        TrainConfig(**overrides).validate()
    manifest = read_manifest(args.data)

    def report(row):
        print(f"epoch {row['epoch']:3d}  loss {row['total_loss']:.5f}  "
              f"train {row['train_acc']:.3f}  test {row['test_acc']:.3f}", flush=True)

    res = train(cfg, manifest, args.out, progress=report)
    print(f"best test accuracy {res.best_test_acc:.4f} after {res.steps} steps")


def _cmd_eval(args):
    from .data import read_manifest
    from .train import evaluate

    res = evaluate(args.checkpoint, read_manifest(args.data), args.split)
    print(f"accuracy {res.accuracy:.4f} on {res.n} samples ({args.split})")
    print("confusion (rows = true class):")
    for row in res.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))


def _cmd_export(args):
    from .data import read_manifest
    from .train import export_embeddings

    n = export_embeddings(args.checkpoint, read_manifest(args.data), args.out)
    print(f"wrote {n} embedding rows to {args.out}")


def _cmd_gradcheck(args):
    from .suite import TOLERANCE, gradcheck_suite

    results = gradcheck_suite(seed=args.seed)
    worst = 0.0
    for name, err in results:
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:32s} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


def _cmd_make_attention(args):
    from .attention import (DEFAULT_RULES, attention_from_landmarks, normalize_landmarks,
                            read_landmarks, read_rules, save_png)

    pts, il, ir = read_landmarks(args.landmarks)
    w = args.source_width or args.source_size
    h = args.source_height or args.source_size
    lms = normalize_landmarks(pts, w, h, il, ir)
    rules = read_rules(args.rules) if args.rules else DEFAULT_RULES
    amap = attention_from_landmarks(lms, rules)
    save_png(amap, args.out)
    print(f"{len(amap.centers)} AU centers ({len(amap.dropped)} dropped) -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e2caps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic face dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples-per-class", type=int, default=250)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.06)
    g.add_argument("--classes", default=None, help="comma-separated class names")
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model variant")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", required=True, help="manifest file or dataset directory")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.set_defaults(func=_cmd_eval)

    x = sub.add_parser("export-embeddings", help="FaceCaps vectors as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("make-attention", help="render an attention map PNG")
    a.add_argument("--landmarks", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--rules", help="AU rule file (default: built-in table)")
    a.add_argument("--source-size", type=float, default=100.0,
                   help="side of the image the landmarks refer to")
    a.add_argument("--source-width", type=float)
    a.add_argument("--source-height", type=float)
    a.set_defaults(func=_cmd_make_attention)
    return p


def main(argv=None) -> int:
    from .train import NumericalError
    from .optim import NonFiniteGradient

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except (NumericalError, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
