"""Fixed-point primitives: quantized tensors, power-of-two weight codes,
shift-based MAC and saturating requantization.

Everything in the inference path here is integer arithmetic. The real-valued
``scale`` / ``scales`` fields ride along for bookkeeping only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1
D_MIN, D_MAX = -15, 0


class AccumulatorOverflow(OverflowError):
    """Raised when a 32-bit signed accumulator would wrap."""


def max_exponent(bits: int) -> int:
    """Largest shift amount of an ``bits``-bit power-of-two code."""
    if bits < 2:
        raise ValueError(f"power-of-two codes need at least 2 bits, got {bits}")
    return 2 ** (bits - 1) - 2


@dataclass(frozen=True, eq=False)
class QTensor:
    """Unsigned integer activation tensor, layout (c, h, w)."""

    data: np.ndarray
    bits: int
    scale: float = 1.0

    def __post_init__(self):
        data = self.data
        if not isinstance(data, np.ndarray):
            data = np.asanyarray(data)
        if data.ndim != 3:
            raise ValueError(f"QTensor expects (c, h, w) data, got shape {data.shape}")
        if data.dtype.kind not in "iu":
            raise TypeError(f"QTensor data must be integer, got {data.dtype}")
        if data.size and (data.min() < 0 or data.max() > (1 << self.bits) - 1):
            raise ValueError(f"QTensor values outside [0, 2^{self.bits}-1]")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.bits == other.bits and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class Pow2Weights:
    """Per-kernel power-of-two codes.

    ``signs`` and ``exps`` have shape (n, c, kh, kw). A zero sign encodes the
    value 0 and its exponent is ignored (stored as 0).
    """

    signs: np.ndarray
    exps: np.ndarray
    bits: int = 3
    scales: np.ndarray | None = None

    def __post_init__(self):
        signs = np.asanyarray(self.signs).astype(np.int8)
        exps = np.asanyarray(self.exps).astype(np.int8)
        if signs.shape != exps.shape or signs.ndim != 4:
            raise ValueError("signs/exps must share a 4-d (n, c, kh, kw) shape")
        if not np.isin(signs, (-1, 0, 1)).all():
            raise ValueError("signs must be in {-1, 0, +1}")
        exps = np.where(signs == 0, 0, exps).astype(np.int8)
        emax = max_exponent(self.bits)
        if exps.min() < 0 or exps.max() > emax:
            raise ValueError(f"exponent outside [0, {emax}] for {self.bits}-bit codes")
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "exps", exps)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.signs.shape)

    @property
    def n(self) -> int:
        return self.signs.shape[0]

    def values(self) -> np.ndarray:
        """Integer weight values sign * 2**exp (for oracles and reports)."""
        return self.signs.astype(np.int64) * (np.int64(1) << self.exps.astype(np.int64))

    def __eq__(self, other):
        if not isinstance(other, Pow2Weights):
            return NotImplemented
        return (self.bits == other.bits and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.exps, other.exps))


@dataclass(frozen=True)
class FixedScalar:
    """K-bit fixed-point value ``mantissa * 2**dexp``."""

    mantissa: int
    dexp: int
    bits: int = 8

    def __post_init__(self):
        lim = 2 ** (self.bits - 1) - 1
        if not -lim <= self.mantissa <= lim:
            raise ValueError(f"mantissa {self.mantissa} outside {self.bits}-bit range")
        if not D_MIN <= self.dexp <= D_MAX:
            raise ValueError(f"binary point {self.dexp} outside [{D_MIN}, {D_MAX}]")
        object.__setattr__(self, "mantissa", int(self.mantissa))
        object.__setattr__(self, "dexp", int(self.dexp))

    @property
    def value(self) -> float:
        return self.mantissa * 2.0 ** self.dexp


@dataclass(frozen=True, eq=False)
class FixedVector:
    """A vector of K-bit mantissas sharing one binary point."""

    mantissas: np.ndarray
    dexp: int
    bits: int = 8

    def __post_init__(self):
        m = np.asanyarray(self.mantissas).astype(np.int64)
        if m.ndim != 1:
            raise ValueError("FixedVector mantissas must be 1-d")
        lim = 2 ** (self.bits - 1) - 1
        if m.size and np.abs(m).max() > lim:
            raise ValueError(f"mantissa outside {self.bits}-bit range")
        if not D_MIN <= self.dexp <= D_MAX:
            raise ValueError(f"binary point {self.dexp} outside [{D_MIN}, {D_MAX}]")
        object.__setattr__(self, "mantissas", m)
        object.__setattr__(self, "dexp", int(self.dexp))

    def __len__(self):
        return len(self.mantissas)

    def __getitem__(self, i) -> FixedScalar:
        return FixedScalar(int(self.mantissas[i]), self.dexp, self.bits)

    def values(self) -> np.ndarray:
        return self.mantissas * 2.0 ** self.dexp

    def __eq__(self, other):
        if not isinstance(other, FixedVector):
            return NotImplemented
        return (self.dexp == other.dexp and self.bits == other.bits
                and np.array_equal(self.mantissas, other.mantissas))


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------

def _check_acc(acc: int) -> int:
    if acc < INT32_MIN or acc > INT32_MAX:
        raise AccumulatorOverflow(f"accumulator {acc} exceeds 32-bit signed range")
    return acc


def shift_mac(act: int, code: tuple[int, int], acc: int = 0) -> int:
    """``acc + sign * (act << exp)`` with a 32-bit signed accumulator."""
    sign, exp = code
    if act < 0:
        raise ValueError("activation must be unsigned")
    if sign == 0:
        return _check_acc(acc)
    if sign not in (-1, 1) or exp < 0:
        raise ValueError(f"invalid power-of-two code {code}")
    shifted = act << exp
    return _check_acc(acc + shifted if sign > 0 else acc - shifted)


def shift_products(acts: np.ndarray, signs: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Elementwise ``sign * (act << exp)`` on broadcast integer arrays."""
    shifted = np.left_shift(acts.astype(np.int64), exps.astype(np.int64))
    return np.where(signs > 0, shifted, np.where(signs < 0, -shifted, 0))


def check_accumulator(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflow("accumulator exceeds 32-bit signed range")
    return acc


def round_shift(num, shift: int):
    """Divide by ``2**shift`` rounding half away from zero (integers only)."""
    if shift == 0:
        return num
    half = 1 << (shift - 1)
    if isinstance(num, np.ndarray):
        mag = np.right_shift(np.abs(num) + half, shift)
        return np.where(num < 0, -mag, mag)
    mag = (abs(num) + half) >> shift
    return -mag if num < 0 else mag


def _affine_fixed(acc, a_mant, a_d, b_mant, b_d):
    # acc * a + b aligned to the finer of the two binary points, then one rounding
    e = min(a_d, b_d)
    if isinstance(acc, np.ndarray):
        acc = acc.astype(np.int64)
    num = (acc * a_mant) * (1 << (a_d - e)) + b_mant * (1 << (b_d - e))
    return round_shift(num, -e)


def requantize(acc: int, a: FixedScalar, b: FixedScalar, bits: int) -> int:
    """``round(clip(acc * a + b, 0, 2**bits - 1))`` in integer arithmetic."""
    y = _affine_fixed(int(acc), a.mantissa, a.dexp, b.mantissa, b.dexp)
    return min(max(y, 0), (1 << bits) - 1)


def requantize_array(acc: np.ndarray, a: FixedVector, b: FixedVector, bits: int) -> np.ndarray:
    """Vectorised :func:`requantize`; channel axis of ``acc`` is 0."""
    shape = (-1,) + (1,) * (acc.ndim - 1)
    a_m = a.mantissas.reshape(shape)
    b_m = b.mantissas.reshape(shape)
    y = _affine_fixed(acc, a_m, a.dexp, b_m, b.dexp)
    return np.clip(y, 0, (1 << bits) - 1)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def _encode_codes(signs: np.ndarray, exps: np.ndarray) -> bytes:
    # bits 7..6: sign as 2-bit two's complement (00 zero, 01 plus, 11 minus)
    # bits 5..0: exponent
    s = (signs.astype(np.int16) & 0x3).astype(np.uint8)
    return ((s << 6) | exps.astype(np.uint8)).astype(np.uint8).tobytes()


def _decode_codes(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = (raw >> 6) & 0x3
    signs = np.where(s == 3, -1, s).astype(np.int8)
    if np.any(s == 2):
        raise ValueError("corrupt weight code byte (sign field 0b10)")
    return signs, (raw & 0x3F).astype(np.int8)


def _split_header(blob: bytes, nlines: int = 1) -> tuple[list[str], bytes]:
    lines = []
    rest = blob
    for _ in range(nlines):
        head, sep, rest = rest.partition(b"\n")
        if not sep:
            raise ValueError("truncated header")
        lines.append(head.decode("ascii"))
    return lines, rest


def write_qtensor(path, t: QTensor) -> None:
    if t.bits > 8:
        raise ValueError("qtensor v1 stores one byte per element (M <= 8)")
    c, h, w = t.dims
    header = f"qtensor v1 {c} {h} {w} {t.bits} {float(t.scale)!r}\n".encode("ascii")
    Path(path).write_bytes(header + t.data.astype("<u1").tobytes())


def read_qtensor(path) -> QTensor:
    (line,), body = _split_header(Path(path).read_bytes())
    tok = line.split()
    if tok[:2] != ["qtensor", "v1"] or len(tok) != 7:
        raise ValueError(f"{path}: not a qtensor v1 file")
    c, h, w, m = map(int, tok[2:6])
    data = np.frombuffer(body, dtype="<u1")
    if data.size != c * h * w:
        raise ValueError(f"{path}: expected {c * h * w} bytes, got {data.size}")
    return QTensor(data.reshape(c, h, w).astype(np.int64), m, float(tok[6]))


def write_pow2(path, wts: Pow2Weights) -> None:
    n, c, kh, kw = wts.shape
    scales = wts.scales if wts.scales is not None else np.ones(n)
    header = f"pow2w v1 {n} {c} {kh} {kw} {wts.bits}\n"
    betas = " ".join(repr(float(b)) for b in scales) + "\n"
    Path(path).write_bytes((header + betas).encode("ascii")
                           + _encode_codes(wts.signs, wts.exps))


def read_pow2(path) -> Pow2Weights:
    (line, betas), body = _split_header(Path(path).read_bytes(), 2)
    tok = line.split()
    if tok[:2] != ["pow2w", "v1"] or len(tok) != 7:
        raise ValueError(f"{path}: not a pow2w v1 file")
    n, c, kh, kw, bits = map(int, tok[2:])
    raw = np.frombuffer(body, dtype=np.uint8)
    if raw.size != n * c * kh * kw:
        raise ValueError(f"{path}: expected {n * c * kh * kw} code bytes, got {raw.size}")
    signs, exps = _decode_codes(raw)
    scales = np.array([float(b) for b in betas.split()])
    return Pow2Weights(signs.reshape(n, c, kh, kw), exps.reshape(n, c, kh, kw),
                       bits, scales)


def write_int8_weights(path, w: np.ndarray) -> None:
    n, c, kh, kw = w.shape
    if w.min() < -128 or w.max() > 127:
        raise ValueError("int8 weights out of range")
    header = f"int8w v1 {n} {c} {kh} {kw}\n".encode("ascii")
    Path(path).write_bytes(header + w.astype("<i1").tobytes())


def read_int8_weights(path) -> np.ndarray:
    (line,), body = _split_header(Path(path).read_bytes())
    tok = line.split()
    if tok[:2] != ["int8w", "v1"] or len(tok) != 6:
        raise ValueError(f"{path}: not an int8w v1 file")
    n, c, kh, kw = map(int, tok[2:])
    data = np.frombuffer(body, dtype="<i1")
    if data.size != n * c * kh * kw:
        raise ValueError(f"{path}: expected {n * c * kh * kw} bytes, got {data.size}")
    return data.reshape(n, c, kh, kw).astype(np.int64)


def write_fixvec(path, *vecs: FixedVector) -> None:
    """One or more fixed-point vectors; mantissas as little-endian int32."""
    parts = []
    for v in vecs:
        parts.append(f"fixvec v1 {len(v)} {v.bits} {v.dexp}\n".encode("ascii"))
        parts.append(v.mantissas.astype("<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_fixvec(path) -> list[FixedVector]:
    blob = Path(path).read_bytes()
    out = []
    while blob:
        (line,), blob = _split_header(blob)
        tok = line.split()
        if tok[:2] != ["fixvec", "v1"] or len(tok) != 5:
            raise ValueError(f"{path}: not a fixvec v1 file")
        n, bits, d = map(int, tok[2:])
        nbytes = 4 * n
        if len(blob) < nbytes:
            raise ValueError(f"{path}: truncated mantissa block")
        m = np.frombuffer(blob[:nbytes], dtype="<i4").astype(np.int64)
        blob = blob[nbytes:]
        out.append(FixedVector(m, d, bits))
    return out


def read_ppm(path) -> QTensor:
    """8-bit binary PPM (P6) or PGM (P5) as a (c, h, w) tensor with alpha 1/255."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated image header")
        tokens.append(blob[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6"):
        raise ValueError(f"{path}: only binary P5/P6 images are supported, got {magic}")
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    c = 3 if magic == "P6" else 1
    raw = np.frombuffer(blob[pos + 1:pos + 1 + c * h * w], dtype=np.uint8)
    if raw.size != c * h * w:
        raise ValueError(f"{path}: expected {c * h * w} pixel bytes, got {raw.size}")
    return QTensor(raw.reshape(h, w, c).transpose(2, 0, 1).astype(np.int64), 8, 1 / 255)


def write_ppm(path, t: QTensor) -> None:
    c, h, w = t.dims
    if c not in (1, 3) or t.bits > 8:
        raise ValueError("PPM/PGM output needs 1 or 3 channels of at most 8 bits")
    magic = "P6" if c == 3 else "P5"
    body = t.data.transpose(1, 2, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"{magic}\n{w} {h}\n255\n".encode("ascii") + body)


def read_input(path) -> QTensor:
    """Input image: a qtensor file, or an 8-bit PPM/PGM."""
    head = Path(path).read_bytes()[:2]
    if head in (b"P5", b"P6"):
        return read_ppm(path)
    return read_qtensor(path)
