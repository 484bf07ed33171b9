"""End-to-end integer inference over a quantized model, the float
comparison report and the peak-throughput table."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dataflow import (CostReport, choose_dataflow, make_schedule, run_schedule,
                       spatial_layer_cost)
from .fixq import QTensor
from .kernels import (PE_CONFIGS, CycleCount, HeadOutput, LayerSpec, conv33, dw33, fused_11_dw,
                      fused_33_dw, head11, layer_cycles)
from .model import FloatModel, QuantModel, float_forward
from .tiling import execute_tiled, plan_tiles

DEFAULT_CAPACITY = 4096


@dataclass
class InferenceResult:
    output: QTensor                       # final backbone feature map
    heads: list[HeadOutput]
    cost: CostReport
    cycles: CycleCount
    layer_outputs: list[QTensor] = field(default_factory=list)
    dataflows: list[str] = field(default_factory=list)

    def digest(self) -> str:
        """SHA-256 over every output value, fixed little-endian layout."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.output.data, dtype="<u1").tobytes())
        for hd in self.heads:
            h.update(np.ascontiguousarray(hd.data, dtype="<i2").tobytes())
        return h.hexdigest()


def _groups(layers):
    """Split layer indices into single layers and fused (up, dw) pairs."""
    i, out = 0, []
    while i < len(layers):
        if layers[i].spec.fusion == "into_dw":
            out.append((i, i + 1))
            i += 2
        else:
            out.append((i,))
            i += 1
    return out


def _pair_cycles(up: LayerSpec, dw: LayerSpec) -> CycleCount:
    a, b = layer_cycles(up), layer_cycles(dw)
    return CycleCount(max(a.compute_cycles, b.compute_cycles), a.fill_cycles + b.fill_cycles)


def run_inference(model: QuantModel, x: QTensor, tiled: bool = False,
                  buffer_limit: int | None = None,
                  weight_buffer_capacity: float = DEFAULT_CAPACITY,
                  keep_layers: bool = False) -> InferenceResult:
    """Run every layer on the integer datapath.

    3x3, depthwise and fused layers go through the PE kernels (column-tiled
    when ``tiled``); unfused 1x1 layers run under the dataflow the hybrid
    policy picks for ``weight_buffer_capacity``.
    """
    if x.dims != tuple(model.input_dims):
        raise ValueError(f"input dims {x.dims} do not match model input {model.input_dims}")
    if x.bits != model.input_bits:
        raise ValueError(f"model expects {model.input_bits}-bit input, got {x.bits}")
    cost, cycles = CostReport(), CycleCount(0)
    outs, flows = [], []
    for grp in _groups(model.layers):
        qs = [model.layers[i] for i in grp]
        specs = tuple(q.spec for q in qs)
        tile_it = tiled and (len(specs) == 2 or specs[0].kind != "conv11")
        if tile_it:
            limit = buffer_limit or x.dims[2]
            plan = plan_tiles(specs, x.dims[2], limit)
            y, _ = execute_tiled(plan, [(q.weights, q.params) for q in qs], x)
        if len(specs) == 2:
            up, dw = specs
            if not tile_it:
                (wa, pa), (wb, pb) = [(q.weights, q.params) for q in qs]
                if up.kind == "conv11":
                    y, _ = fused_11_dw(x, wa, wb, pa, pb, dw.stride, up.precisions[2],
                                       dw.precisions[2])
                else:
                    y, _ = fused_33_dw(x, wa, wb, pa, pb, up.stride, dw.stride,
                                       up.precisions[2], dw.precisions[2])
            c_up = _layer_cost(up, weight_buffer_capacity)
            c_dw = spatial_layer_cost(dw)
            # the intermediate map never reaches OARAM/IARAM
            cost = cost + replace(c_up, oaram_writes=0) + replace(c_dw, iaram_act_reads=0)
            cycles = cycles + _pair_cycles(up, dw)
            flows += ["fused", "fused"]
        else:
            (q,), (s,) = qs, specs
            if s.kind == "conv11":
                kind = choose_dataflow(s, weight_buffer_capacity, s.pe.k_t)
                sched = make_schedule(kind, s.n, s.in_dims[0], s.pe)
                y, rep = run_schedule(sched, x, q.weights, q.params, weight_buffer_capacity,
                                      s.precisions[2])
                flows.append(kind)
            else:
                if not tile_it:
                    if s.kind == "conv33":
                        y, _ = conv33(x, q.weights, q.params, s.stride, s.precisions[2])
                    else:
                        y = dw33(x, q.weights, q.params, s.stride, s.precisions[2])
                rep = spatial_layer_cost(s)
                flows.append("output_stationary")
            cost = cost + rep
            cycles = cycles + layer_cycles(s)
        outs.extend([None] * (len(specs) - 1) + [y])
        x = y
    heads = []
    for q in model.heads:
        heads.append(head11(x, q.weights, q.bias))
        cost = cost + _layer_cost(q.spec, weight_buffer_capacity)
        cycles = cycles + layer_cycles(q.spec)
    return InferenceResult(x, heads, cost, cycles, outs if keep_layers else [], flows)


def _layer_cost(spec: LayerSpec, capacity: float) -> CostReport:
    from .dataflow import layer_cost
    return layer_cost(spec, None, capacity)


# --------------------------------------------------------------------------
# float comparison
# --------------------------------------------------------------------------

def sqnr_db(ref: np.ndarray, approx: np.ndarray) -> float:
    """10 log10(sum y^2 / sum (y - y_hat)^2); infinite when exact."""
    ref = np.asarray(ref, dtype=np.float64)
    noise = float(np.sum((ref - np.asarray(approx, dtype=np.float64)) ** 2))
    signal = float(np.sum(ref ** 2))
    if noise == 0:
        return float("inf")
    if signal == 0:
        return float("-inf")
    return 10.0 * np.log10(signal / noise)


@dataclass
class SQNRReport:
    layers: list[float]
    heads: list[float]
    end_to_end: float

    def format(self) -> str:
        def fmt(v):
            return "exact" if v == float("inf") else f"{v:.2f} dB"
        lines = [f"layer {i:2d}: {fmt(v)}" for i, v in enumerate(self.layers) if v is not None]
        lines += [f"head  {j:2d}: {fmt(v)}" for j, v in enumerate(self.heads)]
        lines.append(f"end-to-end: {fmt(self.end_to_end)}")
        return "\n".join(lines) + "\n"


def compare_float(model: QuantModel, float_model: FloatModel, inputs) -> SQNRReport:
    """SQNR of each layer and of the final outputs against the float model.

    Every input is quantized to the model's input grid first, so the float
    reference and the integer run see the same image.
    """
    from .model import quantize_input
    n_layers = len(model.layers)
    sig = np.zeros(n_layers + len(model.heads))
    err = np.zeros_like(sig)
    for x in inputs:
        xq = quantize_input(model, x)
        ref = float_forward(float_model, xq.data * model.input_scale)
        res = run_inference(model, xq, keep_layers=True)
        pairs = []
        for i, q in enumerate(model.layers):
            if res.layer_outputs[i] is not None:
                pairs.append((i, ref.layers[i], res.layer_outputs[i].data * float(q.scale)))
        for j, q in enumerate(model.heads):
            scale = np.asarray(q.scale, dtype=np.float64)[:, None, None]
            pairs.append((n_layers + j, ref.heads[j], res.heads[j].data * scale))
        for k, y, yhat in pairs:
            sig[k] += np.sum(y ** 2)
            err[k] += np.sum((y - yhat) ** 2)

    def ratio(s, e):
        if e == 0:
            return float("inf")
        return float("-inf") if s == 0 else float(10 * np.log10(s / e))

    fused_mid = {i for i, q in enumerate(model.layers) if q.spec.fusion == "into_dw"}
    layers = [None if i in fused_mid else ratio(sig[i], err[i]) for i in range(n_layers)]
    heads = [ratio(sig[n_layers + j], err[n_layers + j]) for j in range(len(model.heads))]
    if model.heads:
        e2e = ratio(sig[n_layers:].sum(), err[n_layers:].sum())
    else:
        e2e = layers[-1]
    return SQNRReport(layers, heads, e2e)


# --------------------------------------------------------------------------
# throughput
# --------------------------------------------------------------------------

REPORTED_GOPS = 202.76     # achieved throughput quoted for the accelerator


@dataclass(frozen=True)
class ThroughputRow:
    pe: str
    k_t: int
    c_t: int
    freq_mhz: float
    peak_gops: float


def peak_throughput(pe_configs=None, freq_mhz: float = 215.0) -> list[ThroughputRow]:
    """Peak GOP/s = 2 * K_T * C_T * f for each PE type (one MAC = 2 ops)."""
    if pe_configs is None:
        pe_configs = PE_CONFIGS.values()
    elif not isinstance(pe_configs, (list, tuple)) and hasattr(pe_configs, "k_t"):
        pe_configs = [pe_configs]
    return [ThroughputRow(p.name, p.k_t, p.c_t, freq_mhz, 2 * p.k_t * p.c_t * freq_mhz / 1e3)
            for p in pe_configs]


def format_throughput(rows) -> str:
    lines = [f"{'PE':<8}{'K_T':>5}{'C_T':>5}{'MHz':>8}{'peak GOP/s':>12}"]
    for r in rows:
        lines.append(f"{r.pe:<8}{r.k_t:>5}{r.c_t:>5}{r.freq_mhz:>8g}{r.peak_gops:>12.2f}")
    return "\n".join(lines) + "\n"
