"""Command line entry point: ``simtcnn <command> [flags]``.

Exit codes: 0 ok, 2 usage error, 3 bad or missing input file, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import ConfigurationError, FormatError, SimtCnnError
from .simt import CONCURRENT, DETERMINISTIC, SimtRuntime

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _common(p, *names):
    # flags shared between subcommands, added only where they mean something
    adders = {
        "weights": lambda: p.add_argument("--weights", help="weight file (CNN5 format)"),
        "images": lambda: p.add_argument("--images", help="IDX image file (default: MNIST test set)"),
        "labels": lambda: p.add_argument("--labels", help="IDX label file"),
        "backend": lambda: p.add_argument("--backend", choices=("serial", "simt"), default="serial"),
        "deterministic": lambda: p.add_argument(
            "--deterministic", action="store_true",
            help="fixed warp/block order (default for serial; simt is concurrent otherwise)"),
        "workers": lambda: p.add_argument("--workers", type=int, default=1),
        "accum": lambda: p.add_argument("--accum", choices=("fused", "separate", "tree"),
                                        default="separate"),
        "binarize": lambda: p.add_argument("--binarize", action="store_true"),
        "threshold": lambda: p.add_argument("--threshold", type=_byte, default=128),
        "repeat": lambda: p.add_argument("--repeat", type=_positive, default=1),
        "seed": lambda: p.add_argument("--seed", type=_u64, default=0),
        "epochs": lambda: p.add_argument("--epochs", type=int, default=2),
        "lr": lambda: p.add_argument("--lr", type=float, default=0.005),
        "out": lambda: p.add_argument("--out", help="output weight file"),
        "records": lambda: p.add_argument("--records", help="write name/value/unit records here"),
        "index": lambda: p.add_argument("--index", type=int, default=0),
        "count": lambda: p.add_argument("--count", type=int, default=None),
    }
    for n in names:
        adders[n]()


def _byte(text):
    v = int(text)
    if not 0 <= v <= 255:
        raise argparse.ArgumentTypeError(f"threshold must be 0..255, got {v}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recognize", help="classify one image")
    _common(p, "weights", "images", "index", "backend", "deterministic", "workers", "accum",
            "binarize", "threshold", "seed")

    p = sub.add_parser("train", help="train a network with per-sample SGD")
    _common(p, "images", "labels", "epochs", "lr", "seed", "out", "count", "binarize",
            "threshold")
    p.add_argument("--momentum", type=float, default=0.0)

    p = sub.add_parser("eval", help="accuracy and confusion on a labelled set")
    _common(p, "weights", "images", "labels", "backend", "workers", "accum", "binarize",
            "threshold", "count", "deterministic", "seed")

    sub.add_parser("audit", help="neuron, weight and connection counts")

    p = sub.add_parser("bench", help="recognition throughput, serial vs parallel")
    _common(p, "weights", "images", "backend", "workers", "repeat", "accum", "count",
            "records", "seed", "deterministic")
    p.add_argument("--sizes", type=int, nargs="*", default=[],
                   help="extra batch sizes for the flatness measure")

    p = sub.add_parser("compare", help="output deviation between two accumulation modes")
    _common(p, "weights", "images", "repeat", "records", "count", "seed", "deterministic")
    p.add_argument("--a", default="fused", help="mode, e.g. fused, separate, tree:double")
    p.add_argument("--b", default="separate")

    p = sub.add_parser("idx-dump", help="print the header and items of an IDX file")
    _common(p, "images", "labels", "index", "count")
    return parser


# -- helpers ----------------------------------------------------------------------


def _image_path(args) -> str:
    from .mnist import default_data_dir, mnist_paths

    if args.images:
        return args.images
    d = default_data_dir()
    if d is None:
        raise UsageError("no --images given and no MNIST directory found "
                         "(set SIMTCNN_MNIST_DIR)")
    return mnist_paths(d)[0]


def _label_path(args) -> str:
    from .mnist import default_data_dir, mnist_paths

    if args.labels:
        return args.labels
    if args.images:
        raise UsageError("--labels is required with --images")
    d = default_data_dir()
    if d is None:
        raise UsageError("no --labels given and no MNIST directory found")
    return mnist_paths(d)[1]


def _load_images(args, limit=None):
    from .mnist import load_idx_images_array, preprocess_batch

    raw = load_idx_images_array(_image_path(args))
    if limit is not None:
        raw = raw[:limit]
    return raw, preprocess_batch(raw, getattr(args, "binarize", False),
                                 getattr(args, "threshold", 128))


def _load_labelled(args):
    from .mnist import load_idx_labels

    raw, images = _load_images(args)
    labels = load_idx_labels(_label_path(args)).astype(np.int64)
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if args.count is not None:
        images, labels = images[:args.count], labels[:args.count]
    return images, labels


def _network(args):
    from .mnist import load_weights
    from .trainer import init_network

    if getattr(args, "weights", None):
        return load_weights(args.weights)
    if args.command in ("recognize", "eval"):
        raise UsageError("--weights is required")
    return init_network(args.seed)


def _runtime(args) -> SimtRuntime:
    mode = DETERMINISTIC if args.deterministic else CONCURRENT
    return SimtRuntime(workers=args.workers, mode=mode, seed=args.seed)


def _emit_records(args, records):
    from .numerics import write_records

    if getattr(args, "records", None):
        write_records(args.records, records)
        print(f"records={args.records}")


# -- commands -----------------------------------------------------------------------


def cmd_recognize(args) -> int:
    from .kernels import forward_parallel
    from .network import forward_serial

    net = _network(args)
    _, images = _load_images(args)
    if not 0 <= args.index < len(images):
        raise UsageError(f"--index {args.index} outside 0..{len(images) - 1}")
    img = images[args.index]
    if args.backend == "serial":
        res = forward_serial(net, img, accum=args.accum)
    else:
        with _runtime(args) as rt:
            res = forward_parallel(net, img, rt, accum=args.accum)
    print(f"digit={res.digit}")
    for i, v in enumerate(res.similarities.u):
        print(f"u[{i}]={float(v)!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .mnist import default_data_dir, load_idx_labels, mnist_paths, save_weights
    from .trainer import TrainConfig, train

    if args.images is None:
        d = default_data_dir()
        if d is None:
            raise UsageError("no --images given and no MNIST directory found")
        args.images, args.labels = mnist_paths(d, "train")
    _, images = _load_images(args)
    labels = load_idx_labels(_label_path(args)).astype(np.int64)
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if args.count is not None:
        images, labels = images[:args.count], labels[:args.count]
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed, momentum=args.momentum)
    res = train(None, images, labels, cfg, callback=lambda e: print(e.line(), flush=True))
    if args.out:
        save_weights(res.network, args.out)
        print(f"weights={args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    net = _network(args)
    images, labels = _load_labelled(args)
    backend = "serial" if args.backend == "serial" else "parallel"
    rep = evaluate(net, images, labels, backend, workers=args.workers, accum=args.accum)
    print("\n".join(rep.lines()))
    return EXIT_OK


def cmd_audit(args) -> int:
    from .network import audit_counts

    print(audit_counts().render())
    return EXIT_OK


def cmd_bench(args) -> int:
    from .numerics import throughput_bench

    net = _network(args)
    _, images = _load_images(args, args.count)
    backend = "serial" if args.backend == "serial" else "parallel"
    rep = throughput_bench(net, images, backend, args.workers, args.repeat,
                           sizes=args.sizes, accum=args.accum)
    print("\n".join(rep.lines()))
    _emit_records(args, rep.records())
    return EXIT_OK


def cmd_compare(args) -> int:
    from .numerics import recognition_stddev

    net = _network(args)
    _, images = _load_images(args, args.count)
    rep = recognition_stddev(args.a, args.b, net, images, n=args.repeat)
    print("\n".join(rep.lines()))
    _emit_records(args, rep.records())
    return EXIT_OK


def cmd_idx_dump(args) -> int:
    from .mnist import load_idx_images_array, load_idx_labels

    if not args.images and not args.labels:
        raise UsageError("give --images and/or --labels")
    count = 1 if args.count is None else args.count
    labels = load_idx_labels(args.labels) if args.labels else None
    if args.images:
        arr = load_idx_images_array(args.images)
        print(f"magic=0x00000803 count={len(arr)} rows={arr.shape[1]} cols={arr.shape[2]}")
        for i in range(args.index, min(args.index + count, len(arr))):
            tag = f" label={labels[i]}" if labels is not None and i < len(labels) else ""
            print(f"item={i}{tag}")
            for row in arr[i]:
                print("".join("#" if v >= 128 else ("+" if v >= 32 else ".") for v in row))
    else:
        print(f"magic=0x00000801 count={len(labels)}")
        for i in range(args.index, min(args.index + count, len(labels))):
            print(f"item={i} label={labels[i]}")
    return EXIT_OK


COMMANDS = {
    "recognize": cmd_recognize,
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "bench": cmd_bench,
    "compare": cmd_compare,
    "idx-dump": cmd_idx_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"simtcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"simtcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SimtCnnError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"simtcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
