"""Bit-exact functional models of the PE types.

PE_33   3x3 convolution fed by a three-bank row buffer (stride 1 and 2)
PE_11   1x1 convolution
PE_DW   3x3 depthwise convolution on a streaming line buffer
PE_Head 1x1 convolution with 8-bit integer weights and 16-bit outputs

All 3x3 operators use zero padding of 1. Feature maps are (c, h, w).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .fixq import (Pow2Weights, QTensor, check_accumulator, requantize_array,
                   shift_products)
from .quantizer import MergedLayerParams

KINDS = ("conv33", "conv11", "dw33", "head11")


@dataclass(frozen=True)
class PEConfig:
    name: str
    k_t: int
    c_t: int
    precision: tuple[int, int, int]   # activation / weight / output bits
    operation: str


PE_CONFIGS = {
    "PE_33": PEConfig("PE_33", 8, 3, (8, 3, 4), "Conv 3x3"),
    "PE_11": PEConfig("PE_11", 16, 32, (4, 3, 4), "Conv 1x1"),
    "PE_DW": PEConfig("PE_DW", 16, 16, (4, 3, 4), "Conv 3x3 DW"),
    "PE_Head": PEConfig("PE_Head", 2, 32, (4, 8, 16), "Conv 1x1"),
}
PE_FOR_KIND = {"conv33": "PE_33", "conv11": "PE_11", "dw33": "PE_DW", "head11": "PE_Head"}


def cdiv(a: int, b: int) -> int:
    """Integer ceiling division."""
    return -(-a // b)


def conv_out(size: int, ksize: int, stride: int) -> int:
    pad = ksize // 2
    return (size + 2 * pad - ksize) // stride + 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dims: tuple[int, int, int]
    n: int
    stride: int = 1
    fusion: str = "none"
    precisions: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind in ("conv11", "head11") and self.stride != 1:
            raise ValueError(f"{self.kind} supports stride 1 only")
        if self.kind == "dw33" and self.n != self.in_dims[0]:
            raise ValueError("dw33 needs one kernel per input channel")
        if self.fusion not in ("none", "into_dw"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.fusion == "into_dw" and self.kind not in ("conv33", "conv11"):
            raise ValueError("only conv33/conv11 can be fused into a depthwise stage")
        object.__setattr__(self, "in_dims", tuple(int(v) for v in self.in_dims))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "stride", int(self.stride))
        if self.precisions is None:
            object.__setattr__(self, "precisions", PE_CONFIGS[PE_FOR_KIND[self.kind]].precision)
        if self.kind == "head11" and tuple(self.precisions[1:]) != (8, 16):
            raise ValueError("head11 uses 8-bit weights and 16-bit outputs")

    @property
    def ksize(self) -> int:
        return 3 if self.kind in ("conv33", "dw33") else 1

    @property
    def out_dims(self) -> tuple[int, int, int]:
        _, h, w = self.in_dims
        return (self.n, conv_out(h, self.ksize, self.stride), conv_out(w, self.ksize, self.stride))

    @property
    def pe(self) -> PEConfig:
        return PE_CONFIGS[PE_FOR_KIND[self.kind]]

    @property
    def macs(self) -> int:
        c = 1 if self.kind == "dw33" else self.in_dims[0]
        n, oh, ow = self.out_dims
        return n * oh * ow * c * self.ksize ** 2


@dataclass(frozen=True)
class CycleCount:
    compute_cycles: int
    fill_cycles: int = 0

    @property
    def total(self) -> int:
        return self.compute_cycles + self.fill_cycles

    def __add__(self, other: "CycleCount") -> "CycleCount":
        return CycleCount(self.compute_cycles + other.compute_cycles,
                          self.fill_cycles + other.fill_cycles)


class BankedFeature:
    """Feature map split over three row banks, bank j holding rows r % 3 == j."""

    def __init__(self, banks, height: int, bits: int, scale: float = 1.0):
        self.banks = tuple(banks)
        self.height = height
        self.bits = bits
        self.scale = scale
        self.fetches = 0

    @classmethod
    def from_qtensor(cls, t: QTensor) -> "BankedFeature":
        return cls([t.data[:, j::3, :] for j in range(3)], t.dims[1], t.bits, t.scale)

    @property
    def dims(self) -> tuple[int, int, int]:
        c, _, w = self.banks[0].shape
        return (c, self.height, w)

    @staticmethod
    def bank_of(row: int) -> int:
        return row % 3

    def row(self, r: int) -> np.ndarray:
        self.fetches += 1
        return self.banks[r % 3][:, r // 3, :]

    def to_qtensor(self) -> QTensor:
        c, h, w = self.dims
        data = np.zeros_like(self.banks[0], shape=(c, h, w))
        for j, bank in enumerate(self.banks):
            data[:, j::3, :] = bank
        return QTensor(data, self.bits, self.scale)


def _as_banked(x) -> BankedFeature:
    return x if isinstance(x, BankedFeature) else BankedFeature.from_qtensor(x)


def _padded_row(row: np.ndarray) -> np.ndarray:
    c, w = row.shape
    out = np.zeros_like(row, shape=(c, w + 2), dtype=np.int64)
    out[:, 1:w + 1] = row
    return out


# --------------------------------------------------------------------------
# PE_33
# --------------------------------------------------------------------------

def conv33_rows(feature: BankedFeature, weights: Pow2Weights, stride: int = 1):
    """Yield ``(row_index, accumulators)`` for each output row of a 3x3 conv.

    The three input rows of a window are read from three distinct banks in
    the same step. With stride 2 only the window positions that produce an
    output are evaluated (jump connection).
    """
    c, h, w = feature.dims
    n, wc, kh, kw = weights.shape
    if (wc, kh, kw) != (c, 3, 3):
        raise ValueError(f"weights {weights.shape} do not match a 3x3 conv on {c} channels")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    oh, ow = conv_out(h, 3, stride), conv_out(w, 3, stride)
    signs = weights.signs[..., None]
    exps = weights.exps[..., None]
    zero = None
    for oy in range(oh):
        top = oy * stride - 1
        rows = []
        for dy in range(3):
            r = top + dy
            if 0 <= r < h:
                rows.append(_padded_row(feature.row(r)))
            else:
                if zero is None:
                    zero = np.zeros_like(feature.banks[0], shape=(c, w + 2), dtype=np.int64)
                rows.append(zero)
        acc = np.zeros_like(rows[0], shape=(n, ow))
        span = stride * (ow - 1) + 1
        for dy in range(3):
            for dx in range(3):
                cols = rows[dy][:, dx:dx + span:stride]          # (c, ow)
                prods = shift_products(cols[None], signs[:, :, dy, dx], exps[:, :, dy, dx])
                acc += prods.sum(axis=1)
        yield oy, check_accumulator(acc)


def conv33_cycles(in_dims, n: int, stride: int = 1, method: str = "banked") -> CycleCount:
    """Cycle model of a 3x3 convolution on PE_33.

    ``banked``: only the required window positions are issued.
    ``linebuffer``: classic line buffer, every stride-1 position is issued and
    the buffer is primed with 2W+3 values before the first output.
    """
    c, h, w = in_dims
    pe = PE_CONFIGS["PE_33"]
    groups = cdiv(n, pe.k_t) * cdiv(c, pe.c_t)
    if method == "banked":
        positions = conv_out(h, 3, stride) * conv_out(w, 3, stride)
        return CycleCount(positions * groups, 3)
    if method == "linebuffer":
        return CycleCount(h * w * groups, 2 * w + 3)
    raise ValueError(f"unknown method {method!r}")


def conv33(x, weights: Pow2Weights, params: MergedLayerParams, stride: int = 1,
           out_bits: int = 4) -> tuple[QTensor, CycleCount]:
    feat = _as_banked(x)
    c, h, w = feat.dims
    n = weights.n
    if len(params) != n:
        raise ValueError("params length does not match kernel count")
    out = np.zeros_like(feat.banks[0], shape=(n, conv_out(h, 3, stride), conv_out(w, 3, stride)),
                        dtype=np.int64)
    for oy, acc in conv33_rows(feat, weights, stride):
        out[:, oy, :] = requantize_array(acc, params.a, params.b, out_bits)
    return QTensor(out, out_bits), conv33_cycles((c, h, w), n, stride)


# --------------------------------------------------------------------------
# PE_11
# --------------------------------------------------------------------------

def conv11_acc(data: np.ndarray, weights: Pow2Weights) -> np.ndarray:
    c = data.shape[0]
    n, wc, kh, kw = weights.shape
    if (wc, kh, kw) != (c, 1, 1):
        raise ValueError(f"weights {weights.shape} do not match a 1x1 conv on {c} channels")
    acc = np.zeros_like(data, shape=(n,) + data.shape[1:], dtype=np.int64)
    tail = (1,) * (data.ndim - 1)
    for ci in range(c):
        s = weights.signs[:, ci, 0, 0].reshape((n,) + tail)
        e = weights.exps[:, ci, 0, 0].reshape((n,) + tail)
        acc += shift_products(data[ci][None], s, e)
    return check_accumulator(acc)


def conv11(x: QTensor, weights: Pow2Weights, params: MergedLayerParams,
           out_bits: int = 4) -> QTensor:
    acc = conv11_acc(x.data, weights)
    return QTensor(requantize_array(acc, params.a, params.b, out_bits), out_bits)


def conv11_cycles(in_dims, n: int, pe: PEConfig = PE_CONFIGS["PE_11"]) -> CycleCount:
    c, h, w = in_dims
    return CycleCount(h * w * cdiv(n, pe.k_t) * cdiv(c, pe.c_t))


# --------------------------------------------------------------------------
# PE_DW
# --------------------------------------------------------------------------

def line_buffer_registers(width: int) -> int:
    """Registers needed by a 3x3 line buffer over a ``width``-wide stream."""
    return 2 * width + 3


class DepthwiseLineBuffer:
    """3x3 depthwise convolution over a raster stream (columns fastest).

    Each ``push`` delivers one position's channel vector. The shift register
    holds 2W+3 positions, which is exactly the span between the newest tap
    and the oldest tap of a window.
    """

    def __init__(self, weights: Pow2Weights, params: MergedLayerParams, width: int,
                 height: int, stride: int = 1, out_bits: int = 4):
        if width < 1 or height < 1:
            raise ValueError(f"empty tile {height}x{width}")
        n, wc, kh, kw = weights.shape
        if (wc, kh, kw) != (1, 3, 3):
            raise ValueError(f"weights {weights.shape} are not depthwise 3x3")
        self.width, self.height, self.stride = width, height, stride
        self.out_bits = out_bits
        self.registers = line_buffer_registers(width)
        self.channels = n
        self._signs = weights.signs[:, 0].reshape(n, 9)
        self._exps = weights.exps[:, 0].reshape(n, 9)
        self._params = params
        self._buf = deque(maxlen=self.registers)
        self._pos = 0
        self._zero = None
        self.peak = 0
        self.pushes = 0
        self.first_output_at = None
        self._out = None

    def _emit(self, p: int, r0: int, c0: int, like) -> None:
        # p is the stream position of the newest register
        w, h = self.width, self.height
        taps = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                r, c = r0 + dy, c0 + dx
                if 0 <= r < h and 0 <= c < w:
                    taps.append(self._buf[(r * w + c) - p - 1])
                else:
                    if self._zero is None:
                        self._zero = np.zeros_like(like, shape=(self.channels,), dtype=np.int64)
                    taps.append(self._zero)
        win = np.stack(taps, axis=1)
        acc = check_accumulator(shift_products(win, self._signs, self._exps).sum(axis=1))
        if self._out is None:
            oh, ow = conv_out(h, 3, self.stride), conv_out(w, 3, self.stride)
            self._out = np.zeros_like(like, shape=(self.channels, oh, ow), dtype=np.int64)
        self._out[:, r0 // self.stride, c0 // self.stride] = requantize_array(
            acc, self._params.a, self._params.b, self.out_bits)
        if self.first_output_at is None:
            self.first_output_at = self.pushes

    def push(self, value: np.ndarray) -> None:
        if self._pos >= self.width * self.height:
            raise ValueError("stream longer than the declared tile")
        p = self._pos
        self._buf.append(value)
        self.pushes += 1
        self.peak = max(self.peak, len(self._buf))
        r, c = divmod(p, self.width)
        rows = [r - 1] if r >= 1 else []
        if r == self.height - 1:
            rows.append(r)
        cols = [c - 1] if c >= 1 else []
        if c == self.width - 1:
            cols.append(c)
        s = self.stride
        for r0 in rows:
            for c0 in cols:
                if r0 % s == 0 and c0 % s == 0:
                    self._emit(p, r0, c0, value)
        self._pos = p + 1

    def result(self) -> QTensor:
        if self._pos != self.width * self.height:
            raise ValueError(f"stream ended after {self._pos} of {self.width * self.height} values")
        return QTensor(self._out, self.out_bits)

    def cycles(self) -> CycleCount:
        return dw33_cycles((self.channels, self.height, self.width))


def dw33_cycles(in_dims, pe: PEConfig = PE_CONFIGS["PE_DW"]) -> CycleCount:
    c, h, w = in_dims
    return CycleCount(h * w * cdiv(c, pe.k_t), line_buffer_registers(w))


def dw33_linebuffer(stream, weights: Pow2Weights, params: MergedLayerParams,
                    tile_width: int, height: int, stride: int = 1,
                    out_bits: int = 4) -> QTensor:
    """Depthwise 3x3 over a raster ``stream`` of per-position channel vectors."""
    lb = DepthwiseLineBuffer(weights, params, tile_width, height, stride, out_bits)
    for v in stream:
        lb.push(v)
    return lb.result()


def raster_stream(data: np.ndarray):
    """Positions of a (c, h, w) map in raster order, columns fastest."""
    _, h, w = data.shape
    for r in range(h):
        for c in range(w):
            yield data[:, r, c]


def dw33(x: QTensor, weights: Pow2Weights, params: MergedLayerParams, stride: int = 1,
         out_bits: int = 4) -> QTensor:
    """Depthwise 3x3 through the line-buffer model."""
    c, h, w = x.dims
    if weights.n != c:
        raise ValueError("dw33 needs one kernel per input channel")
    return dw33_linebuffer(raster_stream(x.data), weights, params, w, h, stride, out_bits)


# --------------------------------------------------------------------------
# fused cascades
# --------------------------------------------------------------------------

@dataclass
class FusedStats:
    peak_intermediate: int
    line_buffer_registers: int
    cycles: CycleCount


def _stream_rows(rows, lb: DepthwiseLineBuffer) -> None:
    for _, row in rows:
        for col in range(row.shape[1]):
            lb.push(row[:, col])


def fused_11_dw(x: QTensor, w11: Pow2Weights, wdw: Pow2Weights, p11: MergedLayerParams,
                pdw: MergedLayerParams, dw_stride: int = 1, mid_bits: int = 4,
                out_bits: int = 4) -> tuple[QTensor, FusedStats]:
    """PE_11 feeding PE_DW; each 1x1 result goes straight into the line buffer."""
    c, h, w = x.dims
    if wdw.n != w11.n:
        raise ValueError("depthwise stage must have one kernel per 1x1 output channel")
    lb = DepthwiseLineBuffer(wdw, pdw, w, h, dw_stride, out_bits)

    def rows():
        for r in range(h):
            acc = conv11_acc(x.data[:, r, :], w11)
            yield r, requantize_array(acc, p11.a, p11.b, mid_bits)

    _stream_rows(rows(), lb)
    up = conv11_cycles((c, h, w), w11.n)
    dw = lb.cycles()
    cyc = CycleCount(max(up.compute_cycles, dw.compute_cycles), up.fill_cycles + dw.fill_cycles)
    return lb.result(), FusedStats(lb.peak, lb.registers, cyc)


def fused_33_dw(x, w33: Pow2Weights, wdw: Pow2Weights, p33: MergedLayerParams,
                pdw: MergedLayerParams, stride: int = 1, dw_stride: int = 1,
                mid_bits: int = 4, out_bits: int = 4) -> tuple[QTensor, FusedStats]:
    """PE_33 feeding PE_DW row by row through the line buffer."""
    feat = _as_banked(x)
    c, h, w = feat.dims
    if wdw.n != w33.n:
        raise ValueError("depthwise stage must have one kernel per 3x3 output channel")
    oh, ow = conv_out(h, 3, stride), conv_out(w, 3, stride)
    lb = DepthwiseLineBuffer(wdw, pdw, ow, oh, dw_stride, out_bits)
    rows = ((oy, requantize_array(acc, p33.a, p33.b, mid_bits))
            for oy, acc in conv33_rows(feat, w33, stride))
    _stream_rows(rows, lb)
    up = conv33_cycles((c, h, w), w33.n, stride)
    dw = lb.cycles()
    cyc = CycleCount(max(up.compute_cycles, dw.compute_cycles), up.fill_cycles + dw.fill_cycles)
    return lb.result(), FusedStats(lb.peak, lb.registers, cyc)


# --------------------------------------------------------------------------
# PE_Head
# --------------------------------------------------------------------------

INT16_MIN, INT16_MAX = -(2 ** 15), 2 ** 15 - 1


@dataclass
class HeadOutput:
    data: np.ndarray          # (n, h, w) int64 holding 16-bit values
    saturations: int


def head11(x: QTensor, weights: np.ndarray, bias=None) -> HeadOutput:
    """1x1 convolution with plain int8 weights, 16-bit saturating output.

    ``bias`` is an optional per-kernel integer in accumulator units.
    """
    c, h, w = x.dims
    wts = np.asanyarray(weights)
    if wts.dtype.kind not in "iu":
        raise TypeError("head weights must be integers")
    n, wc, kh, kw = wts.shape
    if (wc, kh, kw) != (c, 1, 1):
        raise ValueError(f"weights {wts.shape} do not match a 1x1 conv on {c} channels")
    if wts.size and (wts.min() < -128 or wts.max() > 127):
        raise ValueError("head weights must fit in 8 bits")
    acc = np.zeros_like(x.data, shape=(n, h, w), dtype=np.int64)
    for ci in range(c):
        acc += wts[:, ci, 0, 0].astype(np.int64)[:, None, None] * x.data[ci][None].astype(np.int64)
    if bias is not None:
        acc += np.asanyarray(bias).astype(np.int64).reshape(n, 1, 1)
    check_accumulator(acc)
    sat = int(np.count_nonzero((acc < INT16_MIN) | (acc > INT16_MAX)))
    return HeadOutput(np.clip(acc, INT16_MIN, INT16_MAX), sat)


def layer_cycles(spec: LayerSpec) -> CycleCount:
    if spec.kind == "conv33":
        return conv33_cycles(spec.in_dims, spec.n, spec.stride)
    if spec.kind == "conv11":
        return conv11_cycles(spec.in_dims, spec.n)
    if spec.kind == "dw33":
        return dw33_cycles(spec.in_dims)
    return conv11_cycles(spec.in_dims, spec.n, PE_CONFIGS["PE_Head"])
