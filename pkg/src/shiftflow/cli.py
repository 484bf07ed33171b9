"""Command-line entry points."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataflow, inference, model, sysmodel, tiling
from .fixq import read_input, write_qtensor
from .kernels import LayerSpec


def _floats_from_file(path: str):
    """Float input images from an npz (key ``inputs``), a qtensor or a PPM."""
    if path.endswith(".npz"):
        with np.load(path) as z:
            arr = np.asarray(z["inputs"], dtype=np.float64)
        return list(arr) if arr.ndim == 4 else [arr]
    t = read_input(path)
    return [t.data * float(t.scale)]


def _gather_inputs(paths, limit=None):
    out = []
    for p in paths:
        out.extend(_floats_from_file(p))
    return out[:limit] if limit else out


def _capacity(text: str) -> float:
    return float("inf") if text.lower() in ("inf", "infinite") else int(text)


def _example(args) -> model.FloatModel:
    return model.mobilenet_like(args.input_hw, args.width, seed=args.seed)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    if args.example:
        fm = _example(args)
    elif args.float_model:
        fm = model.load_float_model(args.float_model)
    else:
        raise SystemExit("quantize: give --float-model or --example")
    if args.save_float:
        model.save_float_model(fm, args.save_float)
    if args.calib:
        inputs = _gather_inputs(args.calib, args.batch)
    else:
        rng = np.random.default_rng(args.seed)
        inputs = [rng.uniform(0, 1, fm.input_dims) for _ in range(args.batch)]
    qm = model.quantize_network(fm, model.collect_calibration(fm, inputs))
    path = model.save_model(qm, args.out)
    print(f"wrote {path} ({len(qm.layers)} layers, {len(qm.heads)} heads)")
    return 0


def cmd_run(args) -> int:
    qm = model.load_model(args.model)
    x = read_input(args.input)
    res = inference.run_inference(qm, x, tiled=args.tiled, buffer_limit=args.buffer_limit,
                                   weight_buffer_capacity=_capacity(args.capacity))
    if args.output:
        write_qtensor(args.output, res.output)
    print(f"output {res.output.dims} sha256 {res.digest()}")
    for j, h in enumerate(res.heads):
        print(f"head {j}: {h.data.shape} saturations {h.saturations}")
    ms = sysmodel.fpga_latency_ms(res.cycles.total)
    print(f"cycles {res.cycles.total} (compute {res.cycles.compute_cycles}, "
          f"fill {res.cycles.fill_cycles}) = {ms:.3f} ms at {sysmodel.FPGA_MHZ:g} MHz")
    for k, v in res.cost.as_dict().items():
        print(f"  {k:<32}{v}")
    return 0


def cmd_tile_plan(args) -> int:
    if args.model:
        qm = model.load_model(args.model)
        specs = [q.spec for q in qm.layers]
        i = args.layer
        if not 0 <= i < len(specs):
            raise SystemExit(f"tile-plan: layer {i} out of range")
        if i > 0 and specs[i - 1].fusion == "into_dw":
            i -= 1
        stages = specs[i:i + 2] if specs[i].fusion == "into_dw" else specs[i:i + 1]
    else:
        if not (args.kind and args.dims and args.n):
            raise SystemExit("tile-plan: give --model/--layer or --kind/--dims/--n")
        c, h, w = (int(v) for v in args.dims.split(","))
        up = LayerSpec(args.kind, (c, h, w), args.n, args.stride,
                       "into_dw" if args.fuse_dw else "none")
        stages = [up]
        if args.fuse_dw:
            stages.append(LayerSpec("dw33", up.out_dims, up.n, args.dw_stride))
    width = stages[0].in_dims[2]
    plan = tiling.plan_tiles(stages, width, args.buffer_limit)
    sys.stdout.write(plan.dump())
    print(f"tiles {len(plan.tiles)}  line-buffer registers {plan.register_cost}  "
          f"fetched columns {plan.ddr_columns}")
    return 0


def cmd_dataflow_sweep(args) -> int:
    if args.model:
        specs = model.load_model(args.model).specs
    else:
        specs = model.network_specs(_example(args))
    caps = [_capacity(c) for c in args.capacities.split(",")]
    rows = dataflow.layer_cost_sweep(specs, caps)
    sys.stdout.write(dataflow.format_cost_table(rows))
    if args.csv:
        Path(args.csv).write_text(dataflow.cost_csv(rows))
    return 0


def cmd_pipeline(args) -> int:
    stages = sysmodel.parse_stage_table(Path(args.stages).read_text())
    if args.fpga_cycles is not None:
        ms = sysmodel.fpga_latency_ms(args.fpga_cycles, args.freq)
        stages = [sysmodel.StageSpec(s.name, ms, s.threads) if s.name == "fpga" else s
                  for s in stages]
    if args.assign:
        stages = sysmodel.assign_threads(stages, args.cores)
    sys.stdout.write(sysmodel.format_report(stages))
    return 0


def cmd_compare(args) -> int:
    qm = model.load_model(args.model)
    fm = model.load_float_model(args.float_model)
    rep = inference.compare_float(qm, fm, _gather_inputs(args.inputs))
    sys.stdout.write(rep.format())
    return 0


def cmd_peak(args) -> int:
    rows = inference.peak_throughput(freq_mhz=args.freq)
    sys.stdout.write(inference.format_throughput(rows))
    pe11 = next(r for r in rows if r.pe == "PE_11")
    print(f"reported {inference.REPORTED_GOPS} GOP/s "
          f"{'<=' if inference.REPORTED_GOPS <= pe11.peak_gops else '>'} PE_11 peak")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def example_opts(q):
        q.add_argument("--example", action="store_true",
                       help="use the illustrative MobileNet-style topology")
        q.add_argument("--input-hw", type=int, default=512)
        q.add_argument("--width", type=float, default=1.0, help="channel width multiplier")
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("quantize", help="convert a float model to an integer model")
    q.add_argument("--float-model")
    q.add_argument("--calib", nargs="+", help="calibration inputs (npz, qtensor or PPM)")
    q.add_argument("--batch", type=int, default=8)
    q.add_argument("--out", required=True, help="output model directory")
    q.add_argument("--save-float", help="also write the float model here")
    example_opts(q)
    q.set_defaults(func=cmd_quantize)

    q = sub.add_parser("run", help="integer inference on one input")
    q.add_argument("--model", required=True)
    q.add_argument("--input", required=True, help="qtensor file or 8-bit PPM")
    q.add_argument("--output")
    q.add_argument("--tiled", action="store_true")
    q.add_argument("--buffer-limit", type=int)
    q.add_argument("--capacity", default="4096", help="weight buffer entries or 'inf'")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("tile-plan", help="column tiling of a layer or fused pair")
    q.add_argument("--model")
    q.add_argument("--layer", type=int, default=0)
    q.add_argument("--kind", choices=("conv33", "conv11", "dw33"))
    q.add_argument("--dims", help="c,h,w")
    q.add_argument("--n", type=int)
    q.add_argument("--stride", type=int, default=1)
    q.add_argument("--fuse-dw", action="store_true")
    q.add_argument("--dw-stride", type=int, default=1)
    q.add_argument("--buffer-limit", type=int, required=True)
    q.set_defaults(func=cmd_tile_plan)

    q = sub.add_parser("dataflow-sweep", help="per-layer cost of both dataflows")
    q.add_argument("--model")
    q.add_argument("--capacities", default="1024,4096,16384,inf")
    q.add_argument("--csv")
    example_opts(q)
    q.set_defaults(func=cmd_dataflow_sweep)

    q = sub.add_parser("pipeline", help="pipelined system frame rate")
    q.add_argument("--stages", required=True, help="'name latency_ms threads' per line")
    q.add_argument("--assign", action="store_true", help="greedy thread assignment")
    q.add_argument("--cores", type=int, default=sysmodel.DEFAULT_CORES)
    q.add_argument("--fpga-cycles", type=int, help="take the fpga latency from a cycle count")
    q.add_argument("--freq", type=float, default=sysmodel.FPGA_MHZ)
    q.set_defaults(func=cmd_pipeline)

    q = sub.add_parser("compare", help="SQNR of the integer model against the float model")
    q.add_argument("--model", required=True)
    q.add_argument("--float-model", required=True)
    q.add_argument("--inputs", nargs="+", required=True)
    q.set_defaults(func=cmd_compare)

    q = sub.add_parser("peak", help="peak throughput per PE type")
    q.add_argument("--freq", type=float, default=sysmodel.FPGA_MHZ)
    q.set_defaults(func=cmd_peak)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"shiftflow {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
