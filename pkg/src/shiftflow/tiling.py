"""Column-prior tiling: split a layer (or fused pair) by output column,
fetch each tile plus the halo columns its 3x3 stages need, run it, and
stitch the valid columns back together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixq import QTensor
from .kernels import (LayerSpec, conv11, conv33, conv_out, dw33, fused_11_dw, fused_33_dw,
                      line_buffer_registers)


@dataclass(frozen=True)
class Tile:
    index: int
    out_start: int
    out_stop: int
    in_start: int
    in_stop: int
    halo_left: int
    halo_right: int

    @property
    def col_start(self) -> int:
        return self.out_start

    @property
    def valid_cols(self) -> int:
        return self.out_stop - self.out_start

    @property
    def fetch_cols(self) -> int:
        return self.in_stop - self.in_start


@dataclass(frozen=True)
class TilePlan:
    stages: tuple[LayerSpec, ...]
    in_width: int
    out_width: int
    tiles: tuple[Tile, ...]
    buffer_limit: int
    rows: int | None = None          # H_T; None means full height

    @property
    def register_cost(self) -> int:
        """2*W_T + 3 over the widest tile's valid columns."""
        return line_buffer_registers(max(t.valid_cols for t in self.tiles))

    @property
    def ddr_columns(self) -> int:
        return sum(t.fetch_cols for t in self.tiles)

    @property
    def fused(self) -> bool:
        return len(self.stages) == 2

    def dump(self) -> str:
        return "\n".join(f"tile {t.index}: cols [{t.out_start},{t.out_stop}) "
                         f"halo({t.halo_left},{t.halo_right})" for t in self.tiles) + "\n"


def _as_stages(layers) -> tuple[LayerSpec, ...]:
    stages = (layers,) if isinstance(layers, LayerSpec) else tuple(layers)
    if not 1 <= len(stages) <= 2:
        raise ValueError("a tile plan covers one layer or one fused pair")
    if len(stages) == 2:
        up, dw = stages
        if up.fusion != "into_dw" or dw.kind != "dw33":
            raise ValueError("fused pair must be conv33/conv11 (into_dw) followed by dw33")
    return stages


def _widths(stages, width: int) -> list[int]:
    ws = [width]
    for s in stages:
        ws.append(conv_out(ws[-1], s.ksize, s.stride))
    return ws


def _input_range(stages, widths, a: int, b: int) -> tuple[int, int]:
    """Input columns needed for output columns [a, b) of the stage chain."""
    strides = [s.stride for s in stages]
    for k in range(len(stages) - 1, -1, -1):
        s, r = stages[k].stride, stages[k].ksize // 2
        # local slice start must sit on the stride grid of every later stage
        align = int(np.prod(strides[k:]))
        lo = max(0, s * a - r)
        lo -= lo % align
        hi = min(widths[k], s * (b - 1) + r + 1)
        a, b = lo, hi
    return a, b


def _split(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i >= parts - rem else 0) for i in range(parts)]


def plan_tiles(layers, width: int, buffer_limit: int, rows: int | None = None) -> TilePlan:
    """Fewest equal-width column tiles whose fetch (valid + halo) fits."""
    stages = _as_stages(layers)
    if buffer_limit < 3:
        raise ValueError(f"buffer limit of {buffer_limit} columns cannot hold a 3-wide window")
    widths = _widths(stages, width)
    out_w = widths[-1]
    total_stride = int(np.prod([s.stride for s in stages]))
    for parts in range(1, out_w + 1):
        tiles = []
        start = 0
        for i, cols in enumerate(_split(out_w, parts)):
            a, b = start, start + cols
            lo, hi = _input_range(stages, widths, a, b)
            own_lo = a * total_stride
            own_hi = width if i == parts - 1 else b * total_stride
            tiles.append(Tile(i, a, b, lo, hi, max(0, own_lo - lo), max(0, hi - own_hi)))
            start = b
        if all(t.fetch_cols <= buffer_limit for t in tiles):
            return TilePlan(stages, width, out_w, tuple(tiles), buffer_limit, rows)
    raise ValueError(f"no column tiling of width {width} fits a {buffer_limit}-column buffer")


def parse_plan_dump(text: str) -> list[tuple[int, int, int, int]]:
    """Inverse of :meth:`TilePlan.dump`: (start, stop, halo_l, halo_r) per tile."""
    import re
    pat = re.compile(r"tile (\d+): cols \[(\d+),(\d+)\) halo\((\d+),(\d+)\)")
    out = []
    for line in text.splitlines():
        if line.strip():
            m = pat.fullmatch(line.strip())
            if not m:
                raise ValueError(f"bad plan line: {line!r}")
            out.append(tuple(int(g) for g in m.groups()[1:]))
    return out


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

def run_stage(spec: LayerSpec, weights, params, x: QTensor) -> QTensor:
    bits = spec.precisions[2]
    if spec.kind == "conv33":
        return conv33(x, weights, params, spec.stride, bits)[0]
    if spec.kind == "conv11":
        return conv11(x, weights, params, bits)
    if spec.kind == "dw33":
        return dw33(x, weights, params, spec.stride, bits)
    raise ValueError(f"{spec.kind} layers are not column-tiled")


def run_chain(stages, stage_args, x: QTensor) -> QTensor:
    """Run one layer or a fused pair on ``x`` without tiling."""
    if len(stages) == 1:
        (w, p), = stage_args
        return run_stage(stages[0], w, p, x)
    up, dw = stages
    (wa, pa), (wb, pb) = stage_args
    mid, out = up.precisions[2], dw.precisions[2]
    if up.kind == "conv11":
        return fused_11_dw(x, wa, wb, pa, pb, dw.stride, mid, out)[0]
    return fused_33_dw(x, wa, wb, pa, pb, up.stride, dw.stride, mid, out)[0]


@dataclass
class TileReport:
    ddr_columns: list[int]
    ddr_values: list[int]

    @property
    def total_columns(self) -> int:
        return sum(self.ddr_columns)

    @property
    def total_values(self) -> int:
        return sum(self.ddr_values)


def execute_tiled(plan: TilePlan, stage_args, x: QTensor) -> tuple[QTensor, TileReport]:
    """Run every tile of ``plan`` and assemble the valid output columns.

    ``stage_args`` is a sequence of (weights, params), one per stage.
    """
    c, h, w = x.dims
    if w != plan.in_width:
        raise ValueError(f"plan is for width {plan.in_width}, input has width {w}")
    if len(stage_args) != len(plan.stages):
        raise ValueError("need one (weights, params) pair per stage")
    total_stride = int(np.prod([s.stride for s in plan.stages]))
    out = None
    cols, vals = [], []
    for t in plan.tiles:
        tile_in = QTensor(x.data[:, :, t.in_start:t.in_stop], x.bits, x.scale)
        cols.append(t.fetch_cols)
        vals.append(c * h * t.fetch_cols)
        y = run_chain(plan.stages, stage_args, tile_in)
        off = t.in_start // total_stride
        if out is None:
            n, oh, _ = y.dims
            out = np.zeros_like(y.data, shape=(n, oh, plan.out_width))
        out[:, :, t.out_start:t.out_stop] = y.data[:, :, t.out_start - off:t.out_stop - off]
    return QTensor(out, y.bits), TileReport(cols, vals)


def register_cost_compare(width: int, split: int) -> tuple[int, int]:
    """(row-prior, column-prior) line-buffer registers for a ``split``-way tiling."""
    if split < 1 or width % split:
        raise ValueError(f"split {split} does not divide width {width}")
    return line_buffer_registers(width), line_buffer_registers(width // split)
