"""Network descriptions: the float reference model, calibration, conversion
to an integer model, and the on-disk model manifest."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fixq import (FixedVector, Pow2Weights, read_fixvec, read_int8_weights, read_pow2,
                   write_fixvec, write_int8_weights, write_pow2)
from .kernels import PE_CONFIGS, PE_FOR_KIND, LayerSpec
from .quantizer import (MergedLayerParams, lloyd_activation_fit, merge_layer, quantize_weights,
                        round_half_away)

MANIFEST_NAME = "model.txt"
MANIFEST_HEADER = "shiftflow-model v1"
DEFAULT_SCALE_BITS = 8


def default_bits(kind: str) -> tuple[int, int, int]:
    """(M, N, K): output activation bits, weight bits, scale bits."""
    _, n, m = PE_CONFIGS[PE_FOR_KIND[kind]].precision
    return (m, n, DEFAULT_SCALE_BITS)


# --------------------------------------------------------------------------
# float reference model
# --------------------------------------------------------------------------

@dataclass
class FloatLayer:
    """A convolution followed by batch norm; ReLU unless it is a head."""

    kind: str
    weight: np.ndarray                 # (n, c, kh, kw); (c, 1, 3, 3) for dw33
    gamma: np.ndarray
    bn_b: np.ndarray
    stride: int = 1
    fusion: str = "none"
    bits: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        n = self.weight.shape[0]
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=np.float64), (n,)).copy()
        self.bn_b = np.broadcast_to(np.asarray(self.bn_b, dtype=np.float64), (n,)).copy()
        if self.bits is None:
            self.bits = default_bits(self.kind)
        self.bits = tuple(int(b) for b in self.bits)

    @property
    def n(self) -> int:
        return self.weight.shape[0]


@dataclass
class FloatModel:
    input_dims: tuple[int, int, int]
    layers: list[FloatLayer]
    heads: list[FloatLayer] = field(default_factory=list)
    input_bits: int = 8
    input_scale: float = 1 / 255

    def specs(self) -> tuple[list[LayerSpec], list[LayerSpec]]:
        """Layer specs of the backbone and the heads, checking the chain."""
        dims, prev = tuple(self.input_dims), self.input_bits
        body = []
        for i, L in enumerate(self.layers):
            if L.kind == "head11":
                raise ValueError(f"layer {i}: head layers belong in the head group")
            try:
                s = LayerSpec(L.kind, dims, L.n, L.stride, L.fusion, (prev, L.bits[1], L.bits[0]))
            except ValueError as e:
                raise ValueError(f"layer {i}: {e}") from None
            _check_weight_shape(i, s, L.weight.shape)
            body.append(s)
            dims, prev = s.out_dims, L.bits[0]
        heads = []
        for j, L in enumerate(self.heads):
            if L.kind != "head11":
                raise ValueError(f"head {j}: expected head11, got {L.kind}")
            s = LayerSpec("head11", dims, L.n, 1, "none", (prev, L.bits[1], L.bits[0]))
            _check_weight_shape(f"head {j}", s, L.weight.shape)
            heads.append(s)
        _check_fusion(body)
        return body, heads


def _check_weight_shape(where, spec: LayerSpec, shape) -> None:
    c = 1 if spec.kind == "dw33" else spec.in_dims[0]
    want = (spec.n, c, spec.ksize, spec.ksize)
    if tuple(shape) != want:
        label = where if isinstance(where, str) else f"layer {where}"
        raise ValueError(f"{label}: weight shape {tuple(shape)}, expected {want}")


def _check_fusion(specs) -> None:
    for i, s in enumerate(specs):
        if s.fusion == "into_dw" and (i + 1 >= len(specs) or specs[i + 1].kind != "dw33"):
            raise ValueError(f"layer {i}: fused into a depthwise layer that does not follow it")


def conv2d_float(x: np.ndarray, weight: np.ndarray, stride: int = 1,
                 depthwise: bool = False) -> np.ndarray:
    """Zero-padded 'same'-style convolution in float64."""
    kh = weight.shape[2]
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kh), axis=(1, 2))[:, ::stride, ::stride]
    if depthwise:
        return np.einsum("chwij,cij->chw", win, weight[:, 0])
    return np.einsum("chwij,ncij->nhw", win, weight)


def float_layer(L: FloatLayer, x: np.ndarray, relu: bool = True) -> np.ndarray:
    y = conv2d_float(x, L.weight, L.stride, L.kind == "dw33")
    y = L.gamma[:, None, None] * y + L.bn_b[:, None, None]
    return np.maximum(y, 0.0) if relu else y


@dataclass
class ForwardTrace:
    layers: list[np.ndarray]
    heads: list[np.ndarray]


def float_forward(model: FloatModel, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    outs = []
    for L in model.layers:
        x = float_layer(L, x)
        outs.append(x)
    return ForwardTrace(outs, [float_layer(H, x, relu=False) for H in model.heads])


def collect_calibration(model: FloatModel, inputs, max_samples: int = 200_000) -> dict:
    """Per-layer output samples from running the float model on ``inputs``.

    Large layers are thinned by an even stride so the fit stays fast.
    """
    per_layer: dict[int, list] = {i: [] for i in range(len(model.layers))}
    for x in inputs:
        for i, y in enumerate(float_forward(model, x).layers):
            per_layer[i].append(y.ravel())
    calib = {}
    for i, chunks in per_layer.items():
        if not chunks:
            continue
        v = np.concatenate(chunks)
        if v.size > max_samples:
            v = v[np.linspace(0, v.size - 1, max_samples).astype(np.int64)]
        calib[i] = v
    return calib


# --------------------------------------------------------------------------
# integer model
# --------------------------------------------------------------------------

@dataclass
class QuantLayer:
    spec: LayerSpec
    weights: Pow2Weights | np.ndarray     # int8 array for heads
    params: MergedLayerParams | None = None
    bias: np.ndarray | None = None        # heads: integer bias in accumulator units
    scale: object = 1.0                   # alpha of the output (per-kernel array for heads)


@dataclass
class QuantModel:
    input_dims: tuple[int, int, int]
    input_bits: int
    input_scale: float
    layers: list[QuantLayer]
    heads: list[QuantLayer] = field(default_factory=list)

    def validate(self) -> None:
        dims, prev = tuple(self.input_dims), self.input_bits
        for i, q in enumerate(self.layers):
            s = q.spec
            if s.kind == "head11":
                raise ValueError(f"layer {i}: head layers belong in the head group")
            if s.in_dims != dims:
                raise ValueError(f"layer {i}: input dims {s.in_dims} do not follow {dims}")
            if s.precisions[0] != prev:
                raise ValueError(f"layer {i}: expects {s.precisions[0]}-bit input, gets {prev}")
            _check_weight_shape(i, s, q.weights.shape)
            if q.params is None or len(q.params) != s.n:
                raise ValueError(f"layer {i}: need {s.n} (a', b') pairs")
            dims, prev = s.out_dims, s.precisions[2]
        for j, q in enumerate(self.heads):
            if q.spec.kind != "head11" or q.spec.in_dims != dims:
                raise ValueError(f"head {j}: must be head11 on the final {dims} feature map")
            _check_weight_shape(f"head {j}", q.spec, q.weights.shape)
        _check_fusion([q.spec for q in self.layers])

    @property
    def specs(self) -> list[LayerSpec]:
        return [q.spec for q in self.layers] + [q.spec for q in self.heads]


def quantize_input(model, x: np.ndarray):
    from .fixq import QTensor
    from .quantizer import quantize_activation
    return QTensor(quantize_activation(np.asarray(x, dtype=np.float64), model.input_scale,
                                       model.input_bits), model.input_bits, model.input_scale)


def _quantize_head(L: FloatLayer, spec: LayerSpec, alpha_in: float) -> QuantLayer:
    w = L.weight
    peak = np.abs(w).reshape(w.shape[0], -1).max(axis=1)
    s = np.where(peak > 0, peak / 127.0, 1.0)
    wq = np.clip(round_half_away(w / s[:, None, None, None]), -127, 127).astype(np.int8)
    out_scale = L.gamma * alpha_in * s
    safe = np.where(out_scale != 0, out_scale, 1.0)
    bias = np.clip(round_half_away(L.bn_b / safe), -(2 ** 31) + 1, 2 ** 31 - 1).astype(np.int64)
    return QuantLayer(spec, wq, None, bias, out_scale)


def quantize_network(float_model: FloatModel, calibration: dict) -> QuantModel:
    """Fit activations and weights per layer, then merge and quantize scales."""
    body, heads = float_model.specs()
    alpha_in = float_model.input_scale
    layers = []
    for i, (L, spec) in enumerate(zip(float_model.layers, body)):
        if i not in calibration:
            raise ValueError(f"layer {i}: no calibration data")
        m, nbits, k = L.bits
        try:
            fit = lloyd_activation_fit(calibration[i], m)
        except ValueError as e:
            raise ValueError(f"layer {i}: {e}") from None
        w = quantize_weights(L.weight, nbits)
        params = merge_layer(L.gamma, L.bn_b, alpha_in, w.scales, fit.alpha, k)
        layers.append(QuantLayer(spec, w, params, None, fit.alpha))
        alpha_in = fit.alpha
    qheads = [_quantize_head(H, spec, alpha_in) for H, spec in zip(float_model.heads, heads)]
    q = QuantModel(tuple(float_model.input_dims), float_model.input_bits,
                   float_model.input_scale, layers, qheads)
    q.validate()
    return q


# --------------------------------------------------------------------------
# example topology
# --------------------------------------------------------------------------

_DW_STRIDES = (1, 2, 1, 2, 1, 2, 1, 1, 1, 2)
_PW_CHANNELS = (64, 128, 128, 256, 256, 512, 512, 512, 512, 1024)


def mobilenet_like(input_hw: int = 512, width: float = 1.0, head_channels=(24, 126),
                   seed: int = 0) -> FloatModel:
    """Illustrative MobileNet-style detector backbone, not any published network.

    22 convolutions: a 3x3 stride-2 stem fused into the first depthwise
    layer, ten depthwise/pointwise pairs with each pointwise fused into the
    next depthwise, and a final 1x1; then 1x1 head layers on the last map.
    Weights are random (He-style), so this serves cost and functional studies.
    """
    rng = np.random.default_rng(seed)

    def ch(v):
        return max(4, int(round(v * width)))

    def layer(kind, n, c, stride=1, fusion="none"):
        k = 3 if kind in ("conv33", "dw33") else 1
        fan_in = (1 if kind == "dw33" else c) * k * k
        wshape = (n, 1 if kind == "dw33" else c, k, k)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape)
        gamma = rng.uniform(0.5, 1.5, n)
        b = rng.normal(0.05, 0.1, n)
        return FloatLayer(kind, w, gamma, b, stride, fusion)

    c = ch(32)
    layers = [layer("conv33", c, 3, 2, "into_dw")]
    for i, (s, n) in enumerate(zip(_DW_STRIDES, _PW_CHANNELS)):
        layers.append(layer("dw33", c, c, s))
        last = i == len(_DW_STRIDES) - 1
        layers.append(layer("conv11", ch(n), c, 1, "none" if last else "into_dw"))
        c = ch(n)
    layers.append(layer("conv11", ch(512), c))
    c = ch(512)
    heads = []
    for n in head_channels:
        h = layer("conv11", n, c)
        heads.append(FloatLayer("head11", h.weight, 1.0, h.bn_b, 1, "none", default_bits("head11")))
    return FloatModel((3, input_hw, input_hw), layers, heads)


def network_specs(model) -> list[LayerSpec]:
    if isinstance(model, QuantModel):
        return model.specs
    body, heads = model.specs()
    return body + heads


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def _dims_str(d) -> str:
    return "x".join(str(v) for v in d)


def _parse_dims(s: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in s.split("x"))
    if len(parts) != 3:
        raise ValueError(f"bad dims {s!r}")
    return parts


def save_model(model: QuantModel, directory) -> Path:
    """Write ``model.txt`` plus one binary file per weight/parameter block."""
    model.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    c, h, w = model.input_dims
    lines = [MANIFEST_HEADER,
             f"input dims={_dims_str(model.input_dims)} bits={model.input_bits} "
             f"scale={model.input_scale!r}"]
    for i, q in enumerate(model.layers):
        s = q.spec
        wf, pf = f"layer{i:02d}.pow2", f"layer{i:02d}.fixvec"
        write_pow2(d / wf, q.weights)
        write_fixvec(d / pf, q.params.a, q.params.b)
        lines.append(f"layer index={i} kind={s.kind} in={_dims_str(s.in_dims)} n={s.n} "
                     f"stride={s.stride} fusion={s.fusion} M={s.precisions[2]} "
                     f"N={s.precisions[1]} K={q.params.a.bits} a_d={q.params.a.dexp} "
                     f"b_d={q.params.b.dexp} alpha={float(q.scale)!r} weights={wf} params={pf}")
    for j, q in enumerate(model.heads):
        s = q.spec
        wf, bf = f"head{j:02d}.int8w", f"head{j:02d}.bias"
        write_int8_weights(d / wf, q.weights)
        write_fixvec(d / bf, FixedVector(q.bias, 0, 32))
        scales = ",".join(repr(float(v)) for v in np.atleast_1d(q.scale))
        lines.append(f"head index={j} kind=head11 in={_dims_str(s.in_dims)} n={s.n} "
                     f"weights={wf} bias={bf} scales={scales}")
    (d / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return d / MANIFEST_NAME


def _fields(tokens, where: str) -> dict:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ValueError(f"{where}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def load_model(path) -> QuantModel:
    """Read a model directory (or its manifest file)."""
    p = Path(path)
    manifest = p / MANIFEST_NAME if p.is_dir() else p
    root = manifest.parent
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{manifest}: missing '{MANIFEST_HEADER}' header")
    if len(lines) < 2 or not lines[1].startswith("input "):
        raise ValueError(f"{manifest}: second line must describe the input")
    inp = _fields(lines[1].split()[1:], "input")
    try:
        in_dims = _parse_dims(inp["dims"])
        in_bits, in_scale = int(inp["bits"]), float(inp["scale"])
    except (KeyError, ValueError) as e:
        raise ValueError(f"{manifest}: bad input line ({e})") from None
    layers, heads = [], []
    for ln in lines[2:]:
        tag, *rest = ln.split()
        f = _fields(rest, tag)
        where = f"{tag} {f.get('index', '?')}"
        try:
            spec_in = _parse_dims(f["in"])
            if tag == "layer":
                m, nb = int(f["M"]), int(f["N"])
                prev = layers[-1].spec.precisions[2] if layers else in_bits
                spec = LayerSpec(f["kind"], spec_in, int(f["n"]), int(f["stride"]),
                                 f["fusion"], (prev, nb, m))
                w = read_pow2(root / f["weights"])
                a, b = read_fixvec(root / f["params"])
                if (a.dexp, b.dexp) != (int(f["a_d"]), int(f["b_d"])):
                    raise ValueError("binary points in the manifest disagree with the params file")
                if a.bits != int(f["K"]):
                    raise ValueError("scale bits in the manifest disagree with the params file")
                layers.append(QuantLayer(spec, w, MergedLayerParams(a, b), None, float(f["alpha"])))
            elif tag == "head":
                prev = layers[-1].spec.precisions[2] if layers else in_bits
                spec = LayerSpec("head11", spec_in, int(f["n"]), 1, "none", (prev, 8, 16))
                w = read_int8_weights(root / f["weights"])
                (bias,) = read_fixvec(root / f["bias"])
                scales = np.array([float(v) for v in f["scales"].split(",")])
                heads.append(QuantLayer(spec, w, None, bias.mantissas, scales))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (KeyError, ValueError, OSError) as e:
            msg = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise ValueError(f"{manifest}: {where}: {msg}") from None
    model = QuantModel(in_dims, in_bits, in_scale, layers, heads)
    try:
        model.validate()
    except ValueError as e:
        raise ValueError(f"{manifest}: {e}") from None
    return model


# --------------------------------------------------------------------------
# float model file (npz: JSON metadata plus one array per tensor)
# --------------------------------------------------------------------------

def save_float_model(model: FloatModel, path) -> None:
    import json
    meta = {"format": "shiftflow-float v1", "input_dims": list(model.input_dims),
            "input_bits": model.input_bits, "input_scale": model.input_scale,
            "layers": [], "heads": []}
    arrays = {}
    for group, items in (("layers", model.layers), ("heads", model.heads)):
        for i, L in enumerate(items):
            meta[group].append({"kind": L.kind, "stride": L.stride, "fusion": L.fusion,
                                "bits": list(L.bits)})
            for name in ("weight", "gamma", "bn_b"):
                arrays[f"{group}_{i}_{name}"] = getattr(L, name)
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_float_model(path) -> FloatModel:
    import json
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "shiftflow-float v1":
            raise ValueError(f"{path}: not a shiftflow float model")
        groups = {}
        for group in ("layers", "heads"):
            groups[group] = [FloatLayer(m["kind"], z[f"{group}_{i}_weight"], z[f"{group}_{i}_gamma"],
                                        z[f"{group}_{i}_bn_b"], m["stride"], m["fusion"],
                                        tuple(m["bits"]))
                             for i, m in enumerate(meta[group])]
    return FloatModel(tuple(meta["input_dims"]), groups["layers"], groups["heads"],
                      int(meta["input_bits"]), float(meta["input_scale"]))
