"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
3 shape/config incompatibility.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, metrics, tensor_ops
from . import model as M
from . import trainer as Tr
from .config import RunConfig, load_config
from .errors import CodecError, ConfigError, DataError, DimensionError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_SHAPE = 0, 1, 2, 3


def _blas_single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1, user_api="blas")


def cmd_gen_data(args):
    cfg = dataio.GenConfig(size=args.size, num_classes=args.classes, seed=args.seed)
    m = dataio.generate_dataset(args.out, args.count, cfg)
    print(f"wrote {len(m)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    run = load_config(args.config) if args.config else RunConfig({})
    manifest = dataio.load_manifest(args.data)
    if not len(manifest):
        raise DataError(f"{args.data}: dataset is empty")
    first, _ = manifest.load(0)
    model_cfg = run.model_config(manifest.num_classes, first.shape[1:])
    train_cfg = run.train_config()
    weights = None
    if run.class_balance:
        weights = dataio.median_freq_weights(dataio.class_frequencies(manifest))
        print("class weights: " + " ".join(f"{w:.4f}" for w in weights))

    out = Path(args.out)
    log_path = out.with_name(out.name + ".log")
    with open(log_path, "w") as log_fh:
        def on_log(line):
            log_fh.write(line + "\n")
            log_fh.flush()
            print(line)
        Tr.train_loop(model_cfg, train_cfg, manifest, class_weights=weights,
                      checkpoint_path=out, on_log=on_log)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _load_ckpt(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Tr.read_checkpoint(path)


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    manifest = dataio.load_manifest(args.data)
    Tr.check_compatible(ckpt, num_classes=manifest.num_classes)
    rep = metrics.evaluate(ckpt.params, manifest, ckpt.mean_pixel, stagewise=args.stagewise)
    print(rep.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return EXIT_OK


def cmd_predict(args):
    ckpt = _load_ckpt(args.ckpt)
    image = dataio.read_file(args.image, dataio.read_ppm)
    Tr.check_compatible(ckpt, input_size=image.shape[1:])
    x = (image - ckpt.mean_pixel[:, None, None])[None]
    labels = M.predict(ckpt.params, x)[0]
    Path(args.out).write_bytes(dataio.write_pgm_labels(labels))
    if args.color:
        pal = metrics.default_palette(ckpt.model_config.num_classes)
        Path(args.color).write_bytes(dataio.write_ppm(metrics.render_prediction(labels, pal)))
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_all(seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    print("all gradient checks passed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lrn", description="Label refinement network toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="batch items processed concurrently (results do not depend on it)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--stagewise", action="store_true")
    e.add_argument("--csv", help="also write the report as CSV to this file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="label one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--color")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    for sp in (g, t, e, r, c):
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=argparse.SUPPRESS)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    previous = tensor_ops.get_num_threads()
    tensor_ops.set_num_threads(args.threads)
    try:
        with _blas_single_thread():
            return args.func(args)
    except DimensionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (ConfigError, CodecError, DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        tensor_ops.set_num_threads(previous)


if __name__ == "__main__":
    sys.exit(main())
