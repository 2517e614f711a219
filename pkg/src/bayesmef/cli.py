"""Command-line interface: ``bayesmef simulate|fuse|evaluate|render|flux``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error,
5 fusion stopped at the iteration cap without converging.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .fusion import FusionConfig, ModelError, NumericalError, bayesian_mef, conventional_mef, heuristic_flux
from .io import (
    MANIFEST_NAME,
    atomic_write_text,
    load_bundle,
    load_image,
    save_bundle,
    save_image,
    write_pgm,
)
from .metrics import log_intensity, masked_relative_rmse, mssim
from .stack import StackError
from .synth import SimulationParams, flux_jitter, make_scene, sample_stack

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_NOT_CONVERGED = 5

THREADS_ENV = "BAYESMEF_THREADS"


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _default_threads():
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return 1
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def _fmt(value):
    return repr(float(value))


def _emit(lines):
    sys.stdout.write("".join(f"{line}\n" for line in lines))
    sys.stdout.flush()


# simulate


def cmd_simulate(args):
    repeats = args.repeats
    fluxes = tuple(args.fluxes)
    times = None
    if args.times is not None:
        times = list(args.times)
        if len(times) == len(fluxes):
            times = list(np.repeat(times, repeats))
        times = tuple(float(t) for t in times)
    if args.flux_jitter is not None:
        if len(args.flux_jitter) != 2:
            raise UsageError("--flux-jitter takes LOW,HIGH")
        levels = np.repeat(fluxes, repeats)
        k = len(levels)
        try:
            u = flux_jitter(k, args.seed, *args.flux_jitter, reference_index=k // 2)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        # every measurement gets its own true flux; reported times stay nominal
        times = tuple(float(t) for t in levels) if times is None else times
        fluxes = tuple(float(c) for c in levels * u)
        repeats = 1
    params = SimulationParams(
        flux_factors=fluxes,
        repeats=repeats,
        background_mean=args.bg_mean,
        background_variance=args.bg_var,
        censor_threshold=args.censor,
        peak_counts=args.peak,
        seed=args.seed,
        times=times,
    )
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scene = make_scene(args.size, args.rho, params, num_spokes=args.spokes)
    stack = sample_stack(scene, dark_frames=args.dark_frames)
    out = Path(args.out)
    try:
        save_bundle(out, stack, truth=scene.ground_truth_intensity)
    except OSError as exc:
        raise StackError(f"{out}: cannot write bundle ({exc.strerror or exc})") from None
    _emit([f"seed={args.seed}", f"measurements={stack.n_measurements}", f"out={out}"])
    return EXIT_OK


# fuse


def _parse_flux(text):
    if text in ("times", "heuristic"):
        return text
    if text.startswith("fixed:"):
        return _float_list(text[len("fixed:") :])
    raise argparse.ArgumentTypeError(f"flux must be times, heuristic or fixed:<list>, got {text!r}")


def _config_echo(args):
    return {
        "method": args.method,
        "flux": args.flux if isinstance(args.flux, str) else list(args.flux),
        "flux_mode": args.flux_mode,
        "reference": args.reference,
        "alpha_I": args.alpha_I,
        "beta_I": args.beta_I,
        "tol": args.tol,
        "max_iter": args.max_iter,
    }


def _trace_csv(result):
    k = len(result.flux_factors)
    header = ["iter", "logpost", "max_rel_delta"] + [f"c_{i}" for i in range(k)]
    rows = [",".join(header)]
    for rec in result.trace:
        cols = [str(rec.iteration), _fmt(rec.log_posterior), _fmt(rec.max_rel_change)]
        cols += [_fmt(c) for c in rec.flux_factors]
        rows.append(",".join(cols))
    return "\n".join(rows) + "\n"


def fuse_bundle(bundle_dir, out_dir, args):
    """Fuse one bundle and write fused image, trace and report to ``out_dir``.

    Returns the exit code for this bundle. Only touches its own output
    directory, so several calls may run concurrently.
    """
    start = time.perf_counter()
    bundle = load_bundle(bundle_dir)
    stack = bundle.stack
    k = stack.n_measurements
    if not isinstance(args.flux, str) and len(args.flux) != k:
        raise UsageError(f"fixed flux needs {k} values, got {len(args.flux)}")

    if args.method == "conventional":
        if args.flux_mode == "estimate":
            raise UsageError("--flux-mode estimate requires --method bayes")
        if args.flux == "times":
            c = stack.times.astype(float)
        elif args.flux == "heuristic":
            c = heuristic_flux(stack, args.reference)
        else:
            c = np.asarray(args.flux, dtype=float)
        result = conventional_mef(stack, c)
        result.initial_flux = c.copy()
    else:
        config = FusionConfig(
            alpha_I=args.alpha_I,
            beta_I=args.beta_I,
            flux_mode=args.flux_mode,
            flux_init=args.flux,
            reference_index=args.reference,
            max_iterations=args.max_iter,
            tolerance=args.tol,
        )
        try:
            config.validate(k)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        result = bayesian_mef(stack, config)
    elapsed = time.perf_counter() - start

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "fused.json", result.fused, method=result.method, source=str(bundle_dir))
    atomic_write_text(out / "trace.csv", _trace_csv(result))
    initial = result.initial_flux if result.initial_flux is not None else result.flux_factors
    report = {
        "method": result.method,
        "config": _config_echo(args),
        "bundle": str(bundle_dir),
        "flux_table": [
            {"index": i, "t": float(stack.times[i]), "initial": float(a), "final": float(b)}
            for i, (a, b) in enumerate(zip(initial, result.flux_factors))
        ],
        "iterations": result.iterations_run,
        "converged": bool(result.converged),
        "fallback_pixels": int(result.fallback_pixels),
        "metrics": {},
        "wall_clock_seconds": elapsed,
    }
    if bundle.truth is not None:
        report["metrics"] = _metrics(result.fused, bundle.truth, stack)
    atomic_write_text(out / "report.json", json.dumps(report, indent=2) + "\n")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _bundle_dirs(root):
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).is_file())
    if not dirs:
        raise StackError(f"{root}: no bundles found")
    return dirs


def _run_one(bundle_dir, out_dir, args):
    try:
        return fuse_bundle(bundle_dir, out_dir, args), None
    except (NumericalError, FloatingPointError) as exc:
        return EXIT_NUMERICAL, f"{bundle_dir}: numerical error: {exc}"
    except (StackError, ModelError, OSError) as exc:
        return EXIT_DATA, f"{bundle_dir}: {exc}"


def cmd_fuse(args):
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    if not args.batch:
        code = fuse_bundle(args.input, args.out, args)
        _emit([f"exit={code}", f"out={args.out}"])
        return code
    jobs = [(d, Path(args.out) / d.name) for d in _bundle_dirs(args.input)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        outcomes = list(pool.map(lambda job: _run_one(job[0], job[1], args), jobs))
    lines = []
    for (src, dst), (code, message) in zip(jobs, outcomes):
        if message:
            print(message, file=sys.stderr)
        lines.append(f"{src.name}={code}")
    _emit(lines)
    return max(code for code, _ in outcomes)


# evaluate


def _metrics(fused, truth, stack=None):
    fused = np.asarray(fused, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fused.shape != truth.shape:
        raise StackError(f"fused shape {fused.shape} != truth shape {truth.shape}")
    values = {"mssim": mssim(log_intensity(np.maximum(truth, 0.0)), log_intensity(np.maximum(fused, 0.0)))}
    mask = None
    if stack is not None:
        longest = int(np.argmax(stack.times))
        mask = stack.counts[longest] == stack.n_max
        values["mask"] = "saturated_longest"
    if mask is None or not mask.any():
        # nothing saturated: score every pixel with positive truth
        mask = truth > 0
        values["mask"] = "positive_truth"
    values["mask_pixels"] = int(mask.sum())
    values["rmse"] = masked_relative_rmse(fused, truth, mask)
    return values


def cmd_evaluate(args):
    fused = load_image(args.fused)
    stack = None
    truth = None
    if args.bundle is not None:
        bundle = load_bundle(args.bundle)
        stack, truth = bundle.stack, bundle.truth
    if args.truth is not None:
        truth = load_image(args.truth)
    if truth is None:
        raise StackError("no ground truth: pass --truth or a bundle that contains one")
    if stack is not None and stack.shape != fused.shape:
        raise StackError(f"bundle shape {stack.shape} != fused shape {fused.shape}")
    values = _metrics(fused, truth, stack)
    lines = [f"mssim={_fmt(values['mssim'])}", f"rmse={_fmt(values['rmse'])}",
             f"mask={values['mask']}", f"mask_pixels={values['mask_pixels']}"]
    if args.report is not None:
        atomic_write_text(Path(args.report), json.dumps(values, indent=2) + "\n")
    _emit(lines)
    return EXIT_OK


# render


def cmd_render(args):
    saturated = None
    source = Path(args.input)
    if source.is_dir() and args.measurement is not None:
        stack = load_bundle(source).stack
        if not 0 <= args.measurement < stack.n_measurements:
            raise UsageError(f"--measurement must be in [0, {stack.n_measurements})")
        image = stack.counts[args.measurement].astype(float)
    else:
        image = load_image(source)
    if args.mark_saturated is not None:
        stack = load_bundle(args.mark_saturated).stack
        if stack.shape != image.shape:
            raise StackError(f"bundle shape {stack.shape} != image shape {image.shape}")
        saturated = np.any(stack.counts == stack.n_max, axis=0)
    try:
        write_pgm(args.out, image, vmax=args.vmax, saturated=saturated)
    except OSError as exc:
        raise StackError(f"{args.out}: cannot write ({exc.strerror or exc})") from None
    _emit([f"out={args.out}"])
    return EXIT_OK


# flux


def cmd_flux(args):
    c = heuristic_flux(load_bundle(args.input).stack, args.reference)
    _emit([f"c_{i}={_fmt(v)}" for i, v in enumerate(c)])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="bayesmef", description="Multi-exposure fusion of Poisson count images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic spoke-target bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fluxes", type=_float_list, default=[1.0, 8.0, 64.0])
    p.add_argument("--repeats", type=int, default=6)
    p.add_argument("--times", type=_float_list, default=None,
                   help="reported acquisition times, per flux level or per measurement")
    p.add_argument("--peak", type=float, default=2.0**7)
    p.add_argument("--censor", type=int, default=2**11)
    p.add_argument("--bg-mean", type=float, default=100.0)
    p.add_argument("--bg-var", type=float, default=0.8)
    p.add_argument("--spokes", type=int, default=16)
    p.add_argument("--flux-jitter", type=_float_list, default=None, metavar="LOW,HIGH",
                   help="multiply each true flux by a log-uniform factor; the middle measurement keeps 1")
    p.add_argument("--dark-frames", type=int, default=None,
                   help="store the mean of this many dark frames instead of the exact background")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fuse", help="fuse a bundle (or a directory of bundles with --batch)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["bayes", "conventional"], default="bayes")
    p.add_argument("--flux", type=_parse_flux, default="times")
    p.add_argument("--flux-mode", choices=["fixed", "estimate"], default="fixed")
    p.add_argument("--reference", type=int, default=None)
    p.add_argument("--alpha-I", dest="alpha_I", type=float, default=1e-3)
    p.add_argument("--beta-I", dest="beta_I", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--batch", action="store_true")
    p.add_argument("--threads", type=int, default=None, help=f"worker count (default ${THREADS_ENV} or 1)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="compare a fused image with ground truth")
    p.add_argument("--fused", required=True)
    p.add_argument("--bundle", default=None, help="bundle providing truth and the saturation mask")
    p.add_argument("--truth", default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="write a log-scale 16-bit graymap")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vmax", type=float, default=None)
    p.add_argument("--measurement", type=int, default=None)
    p.add_argument("--mark-saturated", default=None, metavar="BUNDLE")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("flux", help="print heuristic flux factors of a bundle")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--reference", type=int, default=None)
    p.set_defaults(func=cmd_flux)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bayesmef: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"bayesmef: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (StackError, ModelError, OSError, ValueError) as exc:
        print(f"bayesmef: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
