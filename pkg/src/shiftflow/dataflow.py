"""Output-stationary and weight-stationary execution of 1x1 layers with
instrumented buffer traffic, the hybrid selection policy, and per-layer
cost sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from .fixq import Pow2Weights, QTensor, check_accumulator, requantize_array, shift_products
from .kernels import PE_CONFIGS, LayerSpec, PEConfig, cdiv, layer_cycles
from .quantizer import MergedLayerParams

OUTPUT_STATIONARY = "output_stationary"
WEIGHT_STATIONARY = "weight_stationary"

LOOP_ORDER = {
    OUTPUT_STATIONARY: ("h", "w", "n_k", "n_c", "k", "c"),
    WEIGHT_STATIONARY: ("n_k", "n_c", "h", "w", "k", "c"),
}


@dataclass(frozen=True)
class Schedule:
    kind: str
    loop_order: tuple[str, ...]
    k_t: int
    c_t: int
    n_k: int
    n_c: int

    @property
    def parallel(self) -> tuple[int, int]:
        return (self.k_t, self.c_t)


def make_schedule(kind: str, n: int, c: int, pe: PEConfig = PE_CONFIGS["PE_11"]) -> Schedule:
    if kind not in LOOP_ORDER:
        raise ValueError(f"unknown dataflow {kind!r}")
    return Schedule(kind, LOOP_ORDER[kind], pe.k_t, pe.c_t, cdiv(n, pe.k_t), cdiv(c, pe.c_t))


@dataclass
class CostReport:
    wram_weight_reads: int = 0
    weight_buffer_reads: int = 0
    iaram_act_reads: int = 0
    oaram_writes: int = 0
    inter_ram_reads: int = 0
    inter_ram_writes: int = 0
    inter_ram_peak_entries: int = 0
    weight_buffer_required_entries: int = 0
    compute_cycles: int = 0
    macs: int = 0
    act_operand_reads: int = 0
    weight_operand_reads: int = 0

    @property
    def ram_traffic(self) -> int:
        """Accesses to the BRAM-backed buffers (WRAM, IARAM, OARAM, Inter RAM).

        The weight buffer is register-based and is reported separately.
        """
        return (self.wram_weight_reads + self.iaram_act_reads + self.oaram_writes
                + self.inter_ram_reads + self.inter_ram_writes)

    def __add__(self, other: "CostReport") -> "CostReport":
        out = CostReport()
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            peak = f.name in ("inter_ram_peak_entries", "weight_buffer_required_entries")
            setattr(out, f.name, max(a, b) if peak else a + b)
        return out

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ram_traffic"] = self.ram_traffic
        return d


class WeightBuffer:
    """Register weight buffer between WRAM and the PE array.

    Blocks are pinned in first-touch order while space remains; blocks that
    do not fit are streamed from WRAM on every use. For the cyclic access
    pattern of a 1x1 layer this is the best any replacement policy can do.
    """

    def __init__(self, capacity: float):
        if capacity <= 0:
            raise ValueError("weight buffer capacity must be positive")
        self.capacity = capacity
        self.used = 0
        self.resident: set = set()
        self.wram_reads = 0
        self.reads = 0

    def fetch(self, block, size: int, times: int = 1) -> None:
        self.reads += size * times
        if block in self.resident:
            return
        if self.used + size <= self.capacity:
            self.resident.add(block)
            self.used += size
            self.wram_reads += size
        else:
            self.wram_reads += size * times


def _blocks(n: int, c: int, sched: Schedule):
    for nk in range(sched.n_k):
        k0, k1 = nk * sched.k_t, min(n, (nk + 1) * sched.k_t)
        for nc in range(sched.n_c):
            c0, c1 = nc * sched.c_t, min(c, (nc + 1) * sched.c_t)
            yield nk, nc, k0, k1, c0, c1


def _block_mac(x_rows: np.ndarray, signs, exps) -> np.ndarray:
    # x_rows (cb, W); signs/exps (kb, cb) -> (kb, W)
    return shift_products(x_rows[None], signs[:, :, None], exps[:, :, None]).sum(axis=1)


def run_schedule(schedule: Schedule, x: QTensor, weights: Pow2Weights,
                 params: MergedLayerParams, weight_buffer_capacity: float = float("inf"),
                 out_bits: int = 4) -> tuple[QTensor, CostReport]:
    """Execute a 1x1 layer in the given loop order, counting buffer accesses.

    Pixels of one row are evaluated together; every count is still the
    per-pixel count of the scalar loop nest.
    """
    c, h, w = x.dims
    n, wc, kh, kw = weights.shape
    if (wc, kh, kw) != (c, 1, 1):
        raise ValueError(f"weights {weights.shape} do not match a 1x1 layer on {c} channels")
    if (schedule.n_k, schedule.n_c) != (cdiv(n, schedule.k_t), cdiv(c, schedule.c_t)):
        raise ValueError("schedule tile counts do not match the layer")
    signs = weights.signs[:, :, 0, 0]
    exps = weights.exps[:, :, 0, 0]
    data = x.data
    rep = CostReport()
    wb = WeightBuffer(weight_buffer_capacity)
    out = np.zeros_like(data, shape=(n, h, w), dtype=np.int64)

    if schedule.kind == OUTPUT_STATIONARY:
        rep.weight_buffer_required_entries = n * c
        for r in range(h):
            for nk in range(schedule.n_k):
                k0, k1 = nk * schedule.k_t, min(n, (nk + 1) * schedule.k_t)
                psum = np.zeros_like(data, shape=(k1 - k0, w), dtype=np.int64)   # PE registers
                for nc in range(schedule.n_c):
                    c0, c1 = nc * schedule.c_t, min(c, (nc + 1) * schedule.c_t)
                    kb, cb = k1 - k0, c1 - c0
                    wb.fetch((nk, nc), kb * cb, times=w)
                    rep.iaram_act_reads += cb * w
                    rep.macs += kb * cb * w
                    rep.compute_cycles += w
                    psum += _block_mac(data[c0:c1, r, :], signs[k0:k1, c0:c1], exps[k0:k1, c0:c1])
                out[k0:k1, r, :] = check_accumulator(psum)
                rep.oaram_writes += (k1 - k0) * w
    elif schedule.kind == WEIGHT_STATIONARY:
        rep.weight_buffer_required_entries = schedule.k_t * schedule.c_t
        for nk in range(schedule.n_k):
            k0, k1 = nk * schedule.k_t, min(n, (nk + 1) * schedule.k_t)
            kb = k1 - k0
            inter = np.zeros_like(data, shape=(kb, h, w), dtype=np.int64)       # Inter RAM slab
            rep.inter_ram_peak_entries = max(rep.inter_ram_peak_entries, kb * h * w)
            for nc in range(schedule.n_c):
                c0, c1 = nc * schedule.c_t, min(c, (nc + 1) * schedule.c_t)
                cb = c1 - c0
                wb.fetch((nk, nc), kb * cb)
                pe_w_s, pe_w_e = signs[k0:k1, c0:c1], exps[k0:k1, c0:c1]
                for r in range(h):
                    rep.iaram_act_reads += cb * w
                    rep.macs += kb * cb * w
                    rep.compute_cycles += w
                    partial = _block_mac(data[c0:c1, r, :], pe_w_s, pe_w_e)
                    if nc:
                        rep.inter_ram_reads += kb * w
                        partial = partial + inter[:, r, :]
                    inter[:, r, :] = check_accumulator(partial)
                    rep.inter_ram_writes += kb * w
            rep.inter_ram_reads += kb * h * w
            out[k0:k1] = inter
            rep.oaram_writes += kb * h * w
    else:
        raise ValueError(f"unknown dataflow {schedule.kind!r}")

    rep.wram_weight_reads = wb.wram_reads
    rep.weight_buffer_reads = wb.reads
    rep.act_operand_reads = rep.macs
    rep.weight_operand_reads = rep.macs
    y = requantize_array(out, params.a, params.b, out_bits)
    return QTensor(y, out_bits), rep


def estimate_cost(schedule: Schedule, n: int, c: int, h: int, w: int,
                  weight_buffer_capacity: float = float("inf")) -> CostReport:
    """Closed-form counts matching :func:`run_schedule` without executing."""
    pix = h * w
    rep = CostReport(macs=n * c * pix, act_operand_reads=n * c * pix,
                     weight_operand_reads=n * c * pix,
                     iaram_act_reads=c * pix * schedule.n_k,
                     oaram_writes=n * pix,
                     compute_cycles=pix * schedule.n_k * schedule.n_c)
    if schedule.kind == OUTPUT_STATIONARY:
        used, wram = 0, 0
        for _, _, k0, k1, c0, c1 in _blocks(n, c, schedule):
            size = (k1 - k0) * (c1 - c0)
            if used + size <= weight_buffer_capacity:
                used += size
                wram += size
            else:
                wram += size * pix
        rep.wram_weight_reads = wram
        rep.weight_buffer_reads = n * c * pix
        rep.weight_buffer_required_entries = n * c
    elif schedule.kind == WEIGHT_STATIONARY:
        rep.wram_weight_reads = n * c
        rep.weight_buffer_reads = n * c
        rep.weight_buffer_required_entries = schedule.k_t * schedule.c_t
        rep.inter_ram_writes = n * pix * schedule.n_c
        rep.inter_ram_reads = n * pix * schedule.n_c
        rep.inter_ram_peak_entries = min(n, schedule.k_t) * pix
    else:
        raise ValueError(f"unknown dataflow {schedule.kind!r}")
    return rep


def choose_dataflow(layer, weight_buffer_capacity: float, k_t: int = PE_CONFIGS["PE_11"].k_t) -> str:
    """Output stationary while one kernel group (k_t * c codes) fits the buffer."""
    if weight_buffer_capacity <= 0:
        raise ValueError("weight buffer capacity must be positive")
    c = layer.in_dims[0] if isinstance(layer, LayerSpec) else int(layer)
    return OUTPUT_STATIONARY if k_t * c <= weight_buffer_capacity else WEIGHT_STATIONARY


def spatial_layer_cost(spec: LayerSpec) -> CostReport:
    """Local-accumulation cost of a 3x3 or depthwise layer."""
    c, h, w = spec.in_dims
    n, oh, ow = spec.out_dims
    pe = spec.pe
    cyc = layer_cycles(spec)
    nweights = n * (1 if spec.kind == "dw33" else c) * spec.ksize ** 2
    if spec.kind == "dw33":
        acts = c * h * w                      # each value enters the line buffer once
    else:
        acts = oh * ow * c * spec.ksize ** 2 * cdiv(n, pe.k_t)
    return CostReport(wram_weight_reads=nweights, weight_buffer_reads=nweights,
                      iaram_act_reads=acts, oaram_writes=n * oh * ow,
                      weight_buffer_required_entries=nweights,
                      compute_cycles=cyc.total, macs=spec.macs,
                      act_operand_reads=spec.macs, weight_operand_reads=spec.macs)


def layer_cost(spec: LayerSpec, kind: str | None, capacity: float) -> CostReport:
    if spec.kind in ("conv11", "head11"):
        c, h, w = spec.in_dims
        sched = make_schedule(kind or choose_dataflow(spec, capacity, spec.pe.k_t),
                              spec.n, c, spec.pe)
        return estimate_cost(sched, spec.n, c, h, w, capacity)
    return spatial_layer_cost(spec)


@dataclass
class SweepRow:
    layer: int
    spec: LayerSpec
    capacity: float
    kind: str
    report: CostReport
    chosen: bool


def layer_cost_sweep(network, capacities) -> list[SweepRow]:
    """Cost of every layer under each dataflow and buffer capacity."""
    rows = []
    for cap in capacities:
        for i, spec in enumerate(network):
            if spec.kind in ("conv11", "head11"):
                pick = choose_dataflow(spec, cap, spec.pe.k_t)
                for kind in (OUTPUT_STATIONARY, WEIGHT_STATIONARY):
                    rows.append(SweepRow(i, spec, cap, kind, layer_cost(spec, kind, cap),
                                         kind == pick))
            else:
                rows.append(SweepRow(i, spec, cap, OUTPUT_STATIONARY,
                                     spatial_layer_cost(spec), True))
    return rows


_COLUMNS = ("layer", "kind", "dims", "capacity", "dataflow", "chosen", "wram_weight_reads",
            "weight_buffer_reads", "iaram_act_reads", "oaram_writes", "inter_ram_reads",
            "inter_ram_writes", "inter_ram_peak_entries", "weight_buffer_required_entries",
            "compute_cycles", "ram_traffic")


def _row_values(r: SweepRow) -> list:
    d = r.report.as_dict()
    c, h, w = r.spec.in_dims
    cap = "inf" if r.capacity == float("inf") else int(r.capacity)
    return [r.layer, r.spec.kind, f"{c}x{h}x{w}->{r.spec.n}", cap, r.kind,
            int(r.chosen)] + [d[k] for k in _COLUMNS[6:]]


def format_cost_table(rows) -> str:
    """Aligned-column text table of sweep rows."""
    table = [list(_COLUMNS)] + [[str(v) for v in _row_values(r)] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(_COLUMNS))]
    return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in table) + "\n"


def cost_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(_COLUMNS)
    for r in rows:
        wr.writerow(_row_values(r))
    return buf.getvalue()

