"""``heromamba`` command line: gen-data, train, enhance, eval, bench-scan.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("heromamba")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    """Cap BLAS/OpenMP pools at ``HM_THREADS`` when set."""
    value = os.environ.get("HM_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"HM_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .simulation import make_dataset, save_dataset

    if args.size < 16 or args.size & (args.size - 1):
        raise UsageError(f"--size must be a power of two >= 16, got {args.size}")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    pairs, manifest = make_dataset(args.n, args.size, args.seed, args.difficulty)
    try:
        save_dataset(args.out, pairs, manifest, force=args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {args.n} pairs ({args.size}x{args.size}, {args.difficulty}, seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import ExperimentConfig, train

    try:
        cfg = ExperimentConfig.from_file(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found")
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}")
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.resume:
        cfg.resume = True
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps

    def progress(rec):
        if "eval" in rec:
            ev = rec["eval"]
            log.info("step %d loss %.5f eval psnr %.3f ssim %.4f", rec["step"], rec["loss"], ev["psnr"], ev["ssim"])

    res = train(cfg, progress)
    if res.best_eval:
        b = res.best_eval
        print(f"best eval psnr={b['psnr']:.4f} ssim={b['ssim']:.4f} at step {b['step']}")
    else:
        print(f"trained to step {res.steps_done}; no eval yet")
    return EXIT_OK


def _load_model(path):
    from .network import load_checkpoint

    try:
        model = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise _DataFailure(f"checkpoint {path} not found") from exc
    except (ValueError, KeyError) as exc:
        raise _DataFailure(f"cannot load checkpoint {path}: {exc}") from exc
    model.eval()
    return model


class _DataFailure(Exception):
    pass


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resize of a 3 x H x W [0, 1] image to (H', W')."""
    from PIL import Image

    h, w = size
    planes = [
        np.asarray(Image.fromarray(p.astype(np.float32), "F").resize((w, h), Image.BICUBIC))
        for p in img
    ]
    return np.clip(np.stack(planes).astype(np.float64), 0.0, 1.0)


def enhance_array(model, img: np.ndarray) -> np.ndarray:
    from . import tensor as T

    with T.no_grad():
        return model(T.Tensor(img[None].astype(np.float32))).data[0].astype(np.float64)


def cmd_enhance(args) -> int:
    from .imageio import read_image, write_image

    model = _load_model(args.model)
    try:
        img = read_image(args.inp)
    except (OSError, ValueError) as exc:
        raise _DataFailure(f"cannot read {args.inp}: {exc}") from exc
    s = model.cfg.image_size
    shape = img.shape[1:]
    if shape != (s, s):
        if not args.resize:
            raise _DataFailure(f"image is {shape[0]}x{shape[1]} but the model expects {s}x{s}; pass --resize")
        out = _resize(enhance_array(model, _resize(img, (s, s))), shape)
    else:
        out = enhance_array(model, img)
    write_image(out, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .imageio import read_image
    from .metrics import MetricsReport
    from .simulation import load_dataset

    if args.source == "model" and not args.model:
        raise UsageError("--model is required unless --source is degraded or clean")
    model = _load_model(args.model) if args.source == "model" else None
    try:
        manifest, pairs = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise _DataFailure(str(exc)) from exc

    if not args.no_fsim and any(p.error is None and min(p.clean.shape[1:]) < 32 for p in pairs):
        raise UsageError("FSIM needs images of at least 32x32; pass --no-fsim for smaller data")
    report = MetricsReport()
    missing = []
    for p in pairs:
        if p.error:
            missing.append(f"{p.id}: {p.error}")
            continue
        if args.source == "model":
            if p.degraded.shape[1:] != (model.cfg.image_size,) * 2:
                missing.append(f"{p.id}: size {p.degraded.shape[1:]} does not match the model")
                continue
            pred = enhance_array(model, p.degraded)
        else:
            pred = p.degraded if args.source == "degraded" else p.clean
        report.add(p.id, pred, p.clean, with_fsim=not args.no_fsim)
    for m in missing:
        print(f"missing pair {m}", file=sys.stderr)
    if not report.rows:
        print("error: no pair could be evaluated", file=sys.stderr)
        return EXIT_DATA
    csv_text = report.to_csv()
    Path(args.report).write_text(csv_text)
    print(csv_text.rstrip("\n").splitlines()[-1])
    return EXIT_DATA if missing else EXIT_OK


def cmd_bench_scan(args) -> int:
    from .ssm import probe_csv, scan_complexity_probe

    if any(L < 1 for L in args.lengths):
        raise UsageError("lengths must be positive")
    rows = scan_complexity_probe(args.lengths, d_inner=args.d_inner, d_state=args.d_state,
                                 kind=args.kind, repeats=args.repeats, seed=args.seed)
    text = probe_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heromamba", description="Dual-domain selective-scan underwater image enhancement.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", choices=("easy", "medium", "hard"), default="easy")
    g.add_argument("--force", action="store_true", help="replace an existing dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default=None, help="override out_dir from the config")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in out_dir")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance one image with a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--resize", action="store_true", help="resize to the model size and back")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="score a dataset and write a metrics CSV")
    v.add_argument("--model", default=None)
    v.add_argument("--data", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--source", choices=("model", "degraded", "clean"), default="model",
                   help="what to score against the clean images")
    v.add_argument("--no-fsim", action="store_true", help="skip FSIM (reported as nan)")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-scan", help="time the selective scan over sequence lengths")
    b.add_argument("--lengths", type=int, nargs="+", default=[2048, 4096, 8192, 16384])
    b.add_argument("--kind", choices=("scan", "attention"), default="scan")
    b.add_argument("--d-inner", type=int, default=32)
    b.add_argument("--d-state", type=int, default=4)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="also write the CSV here")
    b.set_defaults(func=cmd_bench_scan)
    return p


def main(argv=None) -> int:
    from .train import DataError, NumericalAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, _DataFailure) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
