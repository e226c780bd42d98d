"""``indexmat`` command line: data generation, training, evaluation and checks.

Exit codes: 0 success, 1 usage or configuration error, 2 integrity or
check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import arraycore as ac
from . import formats as fm
from .arraycore import ConfigError, ShapeError
from .mattenet import ForwardTrace, export_index_maps, finalize_alpha, fit, forward, init_state, network_input, predict
from .metrics import evaluate, mean_report
from .synthdata import AugmentConfig, base_sample, dataset_sample

log = logging.getLogger("indexmat")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
CONFIG_NAME = "run.cfg"
FINAL_NAME = "model.idxn"
METRICS_NAME = "metrics.log"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# helpers


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _run_config_for(checkpoint: Path, explicit: str | None) -> fm.RunConfig:
    cfg_path = Path(explicit) if explicit else checkpoint.parent / CONFIG_NAME
    if not cfg_path.exists():
        raise UsageError(f"no run config at {cfg_path}; pass --config")
    return fm.load_config(cfg_path)


def _load_model(args):
    ckpt = _existing(args.checkpoint, "checkpoint")
    rc = _run_config_for(ckpt, args.config)
    mcfg = rc.model_config()
    return fm.load_checkpoint(ckpt, mcfg).params, mcfg


def _read_pair(image: str, trimap: str) -> tuple[np.ndarray, np.ndarray]:
    img = fm.read_pnm(_existing(image, "image"))
    tri = fm.read_pnm(_existing(trimap, "trimap"))
    if img.ndim != 3 or tri.ndim != 2:
        raise UsageError("expected an RGB PPM image and a grayscale PGM trimap")
    if img.shape[:2] != tri.shape:
        raise UsageError(f"image {img.shape[:2]} and trimap {tri.shape} sizes differ")
    return img, fm.decode_trimap(tri)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return w, h


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aug = AugmentConfig(crop=args.crop) if args.crop else None
    for i in range(args.count):
        s = dataset_sample(args.seed, i, aug, args.size) if aug else base_sample(args.seed, i, args.size)
        fm.write_sample(out, i, s)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = fm.load_config(_existing(args.config, "config")) if args.config else fm.RunConfig()
    out = Path(args.out or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.steps is not None:
        rc = dataclasses.replace(rc, steps=args.steps)
    (out / CONFIG_NAME).write_text(fm.serialize_config(rc))
    mcfg, sched = rc.model_config(), rc.schedule()
    if rc.data_dir:
        data = fm.read_dataset(_existing(rc.data_dir, "data directory"))
    else:
        data = [base_sample(rc.data_seed, i, rc.base_size) for i in range(rc.train_count)]
    state = None
    if args.resume:
        state = fm.load_checkpoint(_existing(args.resume, "checkpoint"), mcfg)
        log.info("resuming from step %d", state.step)
    else:
        state = init_state(mcfg, sched.seed)
    mode = "a" if args.resume else "w"
    with open(out / METRICS_NAME, mode) as mlog:
        def on_step(step, m):
            mlog.write(f"step={step} loss={m['loss']:.6g} l_alpha={m['l_alpha']:.6g} "
                       f"l_comp={m['l_comp']:.6g} lr={m['lr']:.6g}\n")
            mlog.flush()

        def on_checkpoint(st):
            fm.save_checkpoint(out / f"step{st.step:06d}.idxn", st)

        state = fit(mcfg, data, sched, state, rc.augment_config(), on_step, on_checkpoint)
    fm.save_checkpoint(out / FINAL_NAME, state)
    print(f"trained to step {state.step}; checkpoint {out / FINAL_NAME}")
    return EXIT_OK


REPORT_FIELDS = ("sad", "sad_raw", "mse", "grad", "conn", "unknown_pixel_count")


def cmd_eval(args) -> int:
    data_dir = _existing(args.data, "data directory")
    ids = fm.list_samples(data_dir)
    if not ids:
        raise UsageError(f"no samples in {data_dir}")
    samples = [fm.read_sample(data_dir, i) for i in ids]
    if args.predictions:
        pred_dir = _existing(args.predictions, "prediction directory")
        preds = [fm.u8_to_alpha(fm.read_pnm(_existing(pred_dir / f"{i:05d}_pred.pgm", "prediction")))
                 for i in ids]
    else:
        P, mcfg = _load_model(args)
        preds = []
        for s in samples:
            x = network_input(s.image[None], s.trimap[None])
            preds.append(finalize_alpha(predict(P, mcfg, x)[0, 0], s.trimap))
    reports = [evaluate(p, s.alpha, s.trimap) for p, s in zip(preds, samples)]
    mean = mean_report(reports)
    rows = [(f"{i:05d}", r) for i, r in zip(ids, reports)] + [("mean", mean)]
    handle = open(args.report, "w", newline="") if args.report else sys.stdout
    try:
        w = csv.writer(handle)
        w.writerow(("sample",) + REPORT_FIELDS)
        for name, r in rows:
            w.writerow([name] + [f"{getattr(r, k):.6g}" for k in REPORT_FIELDS])
    finally:
        if handle is not sys.stdout:
            handle.close()
    print(f"mean SAD {mean.sad:.4f}  MSE {mean.mse:.6f}  Grad {mean.grad:.4f}  Conn {mean.conn:.4f}",
          file=sys.stderr if handle is sys.stdout else sys.stdout)
    return EXIT_OK


def cmd_infer(args) -> int:
    P, mcfg = _load_model(args)
    img, tri = _read_pair(args.image, args.trimap)
    alpha = finalize_alpha(predict(P, mcfg, network_input(img[None], tri[None]))[0, 0], tri)
    fm.write_pnm(args.out, fm.alpha_to_u8(alpha))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect_indices(args) -> int:
    P, mcfg = _load_model(args)
    img, tri = _read_pair(args.image, args.trimap)
    with ac.no_grad():
        trace: ForwardTrace = forward(P, mcfg, ac.Value(network_input(img[None], tri[None])), train=False)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for s, m in enumerate(export_index_maps(trace)):
        fm.write_pnm(outdir / f"stage{s}_index.pgm", m[0])
    print(f"wrote {len(trace.contexts)} index maps to {outdir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import corrupted_sigmoid_backward, run_suite

    families = ("holistic", "o2o", "m2o") if args.family == "all" else (args.family,)
    t0 = time.perf_counter()
    if args.inject_fault:
        with corrupted_sigmoid_backward():
            results = run_suite(families, args.tol, args.seed, include_model=not args.quick)
    else:
        results = run_suite(families, args.tol, args.seed, include_model=not args.quick)
    bad = 0
    for r in results:
        bad += not r.ok
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<28} max rel err {r.error:.2e}")
    print(f"{len(results) - bad}/{len(results)} checks passed at tol {args.tol:g} "
          f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if bad == 0 else EXIT_FAIL


def _peak_rss_bytes() -> int:
    import resource

    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def cmd_bench(args) -> int:
    if args.checkpoint:
        P, mcfg = _load_model(args)
    else:
        rc = fm.load_config(_existing(args.config, "config")) if args.config else fm.RunConfig()
        mcfg = rc.model_config()
        P = init_state(mcfg, rc.seed).params
    budget = int(args.memory_budget_mb * 2 ** 20) if args.memory_budget_mb else None
    over = False
    for w, h in args.size:
        rng = ac.make_rng(0)
        img = rng.integers(0, 256, (1, h, w, 3), dtype=np.uint8)
        tri = rng.choice(np.array([0, 128, 255], np.uint8), (1, h, w))
        x = network_input(img, tri)
        times = []
        tracemalloc.start()
        for _ in range(args.iters):
            t0 = time.perf_counter()
            predict(P, mcfg, x)
            times.append(time.perf_counter() - t0)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        flag = ""
        if budget is not None and peak > budget:
            over, flag = True, "  OVER BUDGET"
        print(f"{w}x{h}: wall {min(times):.3f}s (best of {args.iters}), peak {peak} bytes "
              f"({peak / 2 ** 20:.1f} MiB), process max RSS {_peak_rss_bytes() / 2 ** 20:.1f} MiB{flag}")
    return EXIT_FAIL if over else EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="indexmat", description="Index-guided encoder-decoder matting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic samples as PPM/PGM files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=96, help="generated side length")
    g.add_argument("--crop", type=int, default=0, help="augment and crop to this side (0 = raw samples)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", help="key=value run config (defaults if omitted)")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--steps", type=int, help="override the number of steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute matting metrics over a sample directory")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="directory of NNNNN_pred.pgm alphas instead of a checkpoint")
    e.add_argument("--config", help="run config (default: run.cfg next to the checkpoint)")
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="CSV report path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one alpha matte")
    for a in ("--checkpoint", "--image", "--trimap", "--out"):
        i.add_argument(a, required=True)
    i.add_argument("--config")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("inspect-indices", help="export per-stage index maps as PGM images")
    for a in ("--checkpoint", "--image", "--trimap", "--outdir"):
        x.add_argument(a, required=True)
    x.add_argument("--config")
    x.set_defaults(func=cmd_inspect_indices)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--family", default="all", choices=("all", "holistic", "o2o", "m2o"))
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--quick", action="store_true", help="skip the end-to-end model checks")
    c.add_argument("--inject-fault", action="store_true", help="corrupt the sigmoid backward (negative control)")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time inference forwards and report peak memory")
    b.add_argument("--checkpoint")
    b.add_argument("--config")
    b.add_argument("--size", type=_parse_size, action="append", help="WIDTHxHEIGHT, repeatable")
    b.add_argument("--iters", type=int, default=1)
    b.add_argument("--memory-budget-mb", type=float, default=0, help="fail (exit 2) when peak exceeds this")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.checkpoint or args.predictions):
        parser.error("eval needs --checkpoint or --predictions")
    if args.command == "bench":
        args.size = args.size or [(1920, 1080)]
        if args.iters < 1:
            parser.error("--iters must be >= 1")
    if args.command == "gen-data" and (args.count < 0 or args.size < 8):
        parser.error("--count must be >= 0 and --size >= 8")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError, FileNotFoundError) as exc:
        print(f"indexmat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fm.IntegrityError as exc:
        print(f"indexmat: integrity error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
