"""Command-line driver: infer, flow, bench, validate, plan.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 infeasible plan.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import optflow
from .errors import InfeasiblePlanError, QharError
from .formats.config import read_config
from .formats.frames import list_frames, read_frame, write_frame
from .formats.weights import read_weights
from .graph import build, conv_geometries, count_ops, parameter_count, predict, rgb_tensor
from .metrics import Stopwatch, compute_metrics
from .tiling import (DEFAULT_BUFFER_BUDGET, ResourceModel, TilingPlan, buffer_footprint, estimate_cycles,
                     estimate_traffic, select_plan)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _load_network(args):
    config = read_config(args.config)
    return config, build(config, read_weights(args.weights))


def _plans(net, args):
    if args.plan == "none":
        return None
    if args.plan == "auto":
        return net.select_plans(ResourceModel(args.budget))
    try:
        plan = TilingPlan.parse(args.plan)
    except ValueError as exc:
        raise UsageError(f"--plan: {exc}") from None
    model = ResourceModel(args.budget)
    for name, geom in conv_geometries(net.config):
        need = buffer_footprint(plan, geom)
        if need > model.buffer_budget_bytes:
            raise InfeasiblePlanError(f"{name}: plan {plan} needs {need} B, budget is {model.buffer_budget_bytes} B")
    return net.uniform_plans(plan)


def _load_frames(net, directory):
    config = net.config
    paths = list_frames(directory)
    if len(paths) < config.flow_L + 1:
        raise QharError(f"too few frames in {directory}: found {len(paths)}, need L+1 = {config.flow_L + 1}")
    frames = []
    for p in paths:
        img = read_frame(p)
        if img.shape[:2] != (config.input_height, config.input_width):
            raise QharError(f"{p.name}: frame is {img.shape[1]}x{img.shape[0]}, "
                            f"network expects {config.input_width}x{config.input_height}")
        frames.append(img)
    return paths, frames


def _run_windows(net, paths, frames, plans, workers, emit=None, window_n=optflow.DEFAULT_WINDOW,
                 tau=optflow.DEFAULT_TAU):
    """Slide an L+1 frame window with stride 1; the RGB input is the window's last frame."""
    L = net.config.flow_L
    gray = [optflow.as_frame(f) for f in frames]
    flows = []
    n = 0
    for t in range(1, len(frames)):
        flows.append(optflow.lk_flow(gray[t - 1], gray[t], window_n, tau))
        if t < L:
            continue
        stack = optflow.stack_flow_fields(flows[t - L:t], net.config.flow_bound)
        cls, probs = predict(net, rgb_tensor(frames[t]), stack, plans, workers)
        if emit:
            emit(f"window={t - L} frame={paths[t].name} class={cls} prob={probs[cls]:.6f}")
        n += 1
    return n


def cmd_infer(args):
    config, net = _load_network(args)
    plans = _plans(net, args)
    paths, frames = _load_frames(net, args.frames)

    def emit(line):
        print(line, flush=True)

    n, elapsed = Stopwatch().time(_run_windows, net, paths, frames, plans, args.workers, emit)
    print(compute_metrics(n, max(elapsed, 1e-12), n * count_ops(config)), file=sys.stderr)
    return EXIT_OK


def cmd_bench(args):
    config, net = _load_network(args)
    plans = _plans(net, args)
    paths, frames = _load_frames(net, args.frames)
    watch = Stopwatch()
    ops = count_ops(config)
    n, t_run = watch.median(_run_windows, args.repeat, net, paths, frames, plans, args.workers)
    m = compute_metrics(n, max(t_run, 1e-12), n * ops)
    print(f"config: {args.config} windows={n} ops/prediction={ops} repeat={args.repeat}")
    print(f"run plan={args.plan} workers={args.workers}: {m}")
    _, t_base = watch.median(_run_windows, args.repeat, net, paths, frames, None, 1)
    base = compute_metrics(n, max(t_base, 1e-12), n * ops)
    print(f"baseline untiled workers=1: {base}")
    print(f"speedup={t_base / max(t_run, 1e-12):.3f}")
    return EXIT_OK


def cmd_flow(args):
    paths = list_frames(args.frames)
    if len(paths) < 2:
        raise QharError(f"too few frames in {args.frames}: found {len(paths)}, need at least 2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prev = optflow.as_frame(read_frame(paths[0]))
    for t, p in enumerate(paths[1:], 1):
        cur = optflow.as_frame(read_frame(p))
        field = optflow.lk_flow(prev, cur, args.window, args.tau)
        write_frame(optflow.quantize_flow(field.vx, args.bound), out / f"flow_{t:05d}_dx.pgm")
        write_frame(optflow.quantize_flow(field.vy, args.bound), out / f"flow_{t:05d}_dy.pgm")
        print(f"{paths[t - 1].name} -> {p.name}: flow_{t:05d}_dx.pgm flow_{t:05d}_dy.pgm")
        prev = cur
    return EXIT_OK


def cmd_validate(args):
    config, net = _load_network(args)
    n_conv = len(conv_geometries(config))
    print(f"ok: {n_conv} conv layers, {parameter_count(config)} parameters, "
          f"{count_ops(config)} ops/prediction")
    return EXIT_OK


def cmd_plan(args):
    config = read_config(args.config)
    model = ResourceModel(args.budget, args.pe, args.simd)
    header = f"{'layer':<16}{'in':>10}{'cin':>6}{'cout':>6}{'K':>3}{'S':>3}  {'Tr':>4}{'Tc':>4}{'Tn':>5}{'Tm':>5}" \
             f"{'footprint':>11}{'traffic':>12}{'cycles':>12}"
    # select every plan first so an infeasible layer prints nothing on stdout
    rows = [(name, geom, select_plan(geom, model)) for name, geom in conv_geometries(config)]
    print(f"budget={model.buffer_budget_bytes} pe={model.pe_count} simd={model.simd_width}")
    print(header)
    totals = [0, 0]
    for name, geom, plan in rows:
        traffic = estimate_traffic(plan, geom)
        cycles = estimate_cycles(geom, model)
        totals[0] += traffic
        totals[1] += cycles
        print(f"{name:<16}{f'{geom.h_in}x{geom.w_in}':>10}{geom.in_ch:>6}{geom.out_ch:>6}{geom.k:>3}{geom.stride:>3}  "
              f"{plan.tr:>4}{plan.tc:>4}{plan.tn:>5}{plan.tm:>5}{buffer_footprint(plan, geom):>11}"
              f"{traffic:>12}{cycles:>12}")
    print(f"{'total':<16}{'':>58}{totals[0]:>12}{totals[1]:>12}")
    return EXIT_OK


def _add_exec_flags(p):
    p.add_argument("--workers", type=_positive_int, default=1, help="tile worker threads")
    p.add_argument("--plan", default="auto", help="auto, none (untiled) or Tr,Tc,Tn,Tm")
    p.add_argument("--budget", type=_positive_int, default=DEFAULT_BUFFER_BUDGET,
                   help="on-chip buffer budget in bytes")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qhar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", help="classify sliding windows of a frame directory")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", required=True)
    _add_exec_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("flow", help="write quantized Lucas-Kanade flow planes as PGM")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=optflow.DEFAULT_WINDOW)
    p.add_argument("--tau", type=float, default=optflow.DEFAULT_TAU)
    p.add_argument("--bound", type=float, default=optflow.DEFAULT_FLOW_BOUND)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("bench", help="median throughput over repeated runs")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--repeat", type=_positive_int, default=5)
    _add_exec_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="check weights against a config")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="per-layer tiling plans for a buffer budget")
    p.add_argument("--config", required=True)
    p.add_argument("--budget", type=_positive_int, required=True)
    p.add_argument("--pe", type=_positive_int, default=16)
    p.add_argument("--simd", type=_positive_int, default=16)
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, parse errors exit EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(args, "window", 3) < 3 or getattr(args, "window", 3) % 2 == 0:
        print("qhar: error: --window must be odd and >= 3", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, "bound", 1.0) > 0 or not getattr(args, "tau", 0.0) >= 0:
        print("qhar: error: --bound must be positive and --tau nonnegative", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qhar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasiblePlanError as exc:
        print(f"qhar: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (QharError, OSError, ValueError) as exc:
        print(f"qhar: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
