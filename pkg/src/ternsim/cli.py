"""Command-line front end.

Subcommands: quantize an FP model blob, run a quantized model on the
simulator, report roofline performance for a network descriptor, and
validate the engine against the naive reference.

Exit codes: 0 success, 1 validation divergence, 2 usage or file-format
error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import dfp, graph, model_io, perf, validate
from .engine import LayerConfigError
from .graph import AllocationError, GraphError
from .layout import LayoutError
from .model_io import FormatError

_USAGE_ERRORS = (FormatError, GraphError, LayoutError, AllocationError,
                 LayerConfigError, OSError, ValueError, KeyError)


def _load_network(name: str, channel_scale: int) -> graph.NetworkGraph:
    if name == "resnet50":
        return graph.build_resnet50(channel_scale)
    if name == "toy":
        return graph.build_toy_residual()
    return graph.load_graph(name)


def _load_config(spec: str) -> perf.TileConfig:
    if spec in perf.PRESETS:
        return perf.PRESETS[spec]
    with open(spec) as f:
        doc = json.load(f)
    return perf.TileConfig(**doc)


def cmd_quantize(args) -> int:
    fp = model_io.load_fp_model(args.model_in)
    calib = np.load(args.calibration)
    model = graph.quantize_network(fp, calib, block=args.block_size)
    model_io.save_quantized(model, args.model_out)
    print(f"quantized {len(model.layers)} accelerator conv layers and "
          f"{len(model.host_layers)} host layers -> {args.model_out}")
    print(f"block size {model.block}, input exponent {model.input_exp}")
    return 0


def cmd_run(args) -> int:
    model = model_io.load_quantized(args.model)
    x = np.load(args.input)
    trace = open(args.trace, "w") if args.trace else None
    try:
        result = graph.execute(model, x, trace=trace)
    finally:
        if trace:
            trace.close()
    g = model.graph
    print("exponent chain:")
    for nid in [graph.INPUT, *g.schedule()]:
        e = result.exps.get(nid)
        print(f"  {nid}: exp={e if e is not None else '-'}")
    if result.probs is not None:
        order = np.argsort(result.probs)[::-1][:5]
        print("class scores:")
        for c in order:
            print(f"  class {c}: {result.probs[c]:.6f}")
    elif result.logits is not None:
        order = np.argsort(result.logits)[::-1][:5]
        print("logits:")
        for c in order:
            print(f"  class {c}: {result.logits[c]:.6f}")
    else:
        out = result.output
        print(f"output: shape {out.data.shape}, exp {out.exp}, "
              f"range [{int(out.data.min())}, {int(out.data.max())}]")
    if result.overflow_count:
        print(f"accumulator wrap events: {result.overflow_count}")
    return 0


def cmd_perf(args) -> int:
    g = _load_network(args.network, args.channel_scale)
    cfg = _load_config(args.config)
    freqs = args.freq or [cfg.freq_mhz]
    bandwidth = args.bandwidth == "on"
    rows = []
    for i, f in enumerate(freqs):
        rep = perf.network_perf(g, cfg, freq_mhz=f, power_watts=args.power,
                                bandwidth=bandwidth)
        if i:
            print()
        print(rep.summary())
        for line in rep.to_csv().splitlines()[1:]:
            rows.append(f"{f:g},{line}")
    if args.csv:
        header = ("freq_mhz,layer,kind,macs,compute_cycles,bandwidth_cycles,"
                  "cycles,effective_tops,utilization\n")
        with open(args.csv, "w") as out:
            out.write(header + "\n".join(rows) + "\n")
        print(f"\nwrote {len(rows)} rows -> {args.csv}")
    return 0


def cmd_validate(args) -> int:
    def progress(done, total, bad):
        print(f"  {done}/{total} layers, {bad} divergent", file=sys.stderr)

    rep = validate.run_suite(args.layers, args.seed, fault=args.fault,
                             progress=progress if args.verbose else None)
    if rep.ok:
        print(f"{rep.cases} random layers bit-exact against the reference "
              f"({rep.elapsed:.1f}s)")
        return 0
    first = rep.failures[0]
    print(f"{len(rep.failures)} of {rep.cases} layers diverged", file=sys.stderr)
    print(f"first failing case: {first.layer} ({first.geometry})", file=sys.stderr)
    for d in first.divergences:
        print(f"  {d}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ternsim",
        description="Ternary accelerator simulator: quantize, run, measure, validate.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize an FP model blob")
    q.add_argument("model_in", help="FP model file (TFP1)")
    q.add_argument("calibration", help=".npy activation tensor for exponent calibration")
    q.add_argument("model_out", help="output quantized model file (TQM1)")
    q.add_argument("--block-size", type=int, default=64,
                   help="scaling-block width along input channels (default 64)")
    q.set_defaults(func=cmd_quantize)

    r = sub.add_parser("run", help="run a quantized model on one input")
    r.add_argument("model", help="quantized model file (TQM1)")
    r.add_argument("input", help=".npy input tensor (channels, h, w)")
    r.add_argument("--config", default="arria10",
                   help="tile configuration preset or JSON file; results are "
                        "configuration independent, scheduling only (default arria10)")
    r.add_argument("--trace", help="write a per-op pipeline trace to this file")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("perf", help="roofline performance report")
    f.add_argument("network", help="'resnet50', 'toy', or a network JSON file")
    f.add_argument("--config", default="arria10",
                   help="preset name (arria10, stratix10) or JSON config file")
    f.add_argument("--freq", type=float, action="append",
                   help="clock in MHz; repeat to sweep (default: preset clock)")
    f.add_argument("--power", type=float, help="board power in watts")
    f.add_argument("--bandwidth", choices=("on", "off"), default="on",
                   help="include LSU transfer cycles in the roofline (default on)")
    f.add_argument("--csv", help="write per-layer rows for every frequency here")
    f.add_argument("--channel-scale", type=int, default=1, choices=(1, 2, 4),
                   help="shrink built-in network channels by this factor")
    f.set_defaults(func=cmd_perf)

    v = sub.add_parser("validate", help="randomized engine-vs-reference sweep")
    v.add_argument("--layers", type=int, default=1000,
                   help="number of random layers (default 1000)")
    v.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    v.add_argument("--fault", choices=validate.FAULTS, default="none",
                   help="deliberately break one side to demo divergence reporting")
    v.add_argument("--verbose", action="store_true", help="progress every 100 layers")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except dfp.ExponentOverflowError as e:
        print(f"error: exponent out of range: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
