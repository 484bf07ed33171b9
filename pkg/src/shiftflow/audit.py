"""Instrumentation that checks the inference path never does real-valued
arithmetic.

Every integer array of a quantized model is re-viewed as :class:`AuditArray`,
which logs each numpy ufunc and array function it takes part in and flags
any that touches a floating-point operand or produces a floating-point
result. The real-valued bookkeeping fields (activation scales, betas, the
float terms behind a' and b') are swapped for :class:`Poison` values that
refuse to take part in arithmetic.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .fixq import FixedVector, Pow2Weights, QTensor
from .quantizer import MergedLayerParams


class RealArithmeticError(RuntimeError):
    """A real-valued field was used in arithmetic during audited inference."""


@dataclass
class AuditLog:
    ops: Counter = field(default_factory=Counter)
    float_ops: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.ops.values())


_active: list[AuditLog] = []


def _is_real(v) -> bool:
    if isinstance(v, Poison):
        return True
    if isinstance(v, np.ndarray):
        return v.dtype.kind in "fc"
    if isinstance(v, (bool, int, np.integer, np.bool_)):
        return False
    return isinstance(v, (float, complex, np.floating, np.complexfloating))


def _flatten(obj):
    if isinstance(obj, (list, tuple)):
        for o in obj:
            yield from _flatten(o)
    elif isinstance(obj, dict):
        for o in obj.values():
            yield from _flatten(o)
    else:
        yield obj


def _record(name: str, operands, result) -> None:
    if not _active:
        return
    log = _active[-1]
    log.ops[name] += 1
    real_in = any(_is_real(v) for v in _flatten(operands))
    real_out = any(_is_real(v) for v in _flatten(result))
    if real_in or real_out:
        log.float_ops.append(name)


def _unwrap(obj):
    if isinstance(obj, AuditArray):
        return obj.view(np.ndarray)
    if isinstance(obj, tuple):
        return tuple(_unwrap(o) for o in obj)
    if isinstance(obj, list):
        return [_unwrap(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _unwrap(v) for k, v in obj.items()}
    return obj


def _wrap(obj):
    if isinstance(obj, np.ndarray) and not isinstance(obj, AuditArray):
        return obj.view(AuditArray)
    if isinstance(obj, tuple):
        return tuple(_wrap(o) for o in obj)
    if isinstance(obj, list):
        return [_wrap(o) for o in obj]
    return obj


class AuditArray(np.ndarray):
    """ndarray view that reports every operation to the active audit log."""

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        res = getattr(ufunc, method)(*_unwrap(inputs), **_unwrap(kwargs))
        _record(f"{ufunc.__name__}.{method}" if method != "__call__" else ufunc.__name__,
                (inputs, _dtype_operand(kwargs.get("dtype"))), res)
        return _wrap(res)

    def __array_function__(self, func, types, args, kwargs):
        res = func(*_unwrap(args), **_unwrap(kwargs))
        _record(func.__name__, (args, _dtype_operand(kwargs.get("dtype"))), res)
        return _wrap(res)


def _dtype_operand(d):
    # a requested float dtype counts as a real-valued operation
    return np.zeros(0, dtype=d) if d is not None else None


class Poison:
    """Stand-in for a real-valued field; any arithmetic on it is an error."""

    def __init__(self, label: str):
        self.label = label

    def _fail(self, *_):
        if _active:
            _active[-1].float_ops.append(f"poison:{self.label}")
        raise RealArithmeticError(f"real-valued field {self.label!r} used in arithmetic")

    __add__ = __radd__ = __sub__ = __rsub__ = __mul__ = __rmul__ = _fail
    __truediv__ = __rtruediv__ = __floordiv__ = __rfloordiv__ = __pow__ = __rpow__ = _fail
    __neg__ = __abs__ = __float__ = __int__ = __index__ = __round__ = _fail
    __lt__ = __le__ = __gt__ = __ge__ = _fail

    def __array__(self, *args, **kwargs):
        self._fail()

    def __repr__(self):
        return f"Poison({self.label!r})"


# --------------------------------------------------------------------------
# model preparation
# --------------------------------------------------------------------------

def _audit_vec(v: FixedVector) -> FixedVector:
    return FixedVector(np.asarray(v.mantissas).view(AuditArray), v.dexp, v.bits)


def audited_model(model):
    """Copy of a quantized model whose integer fields are audited and whose
    real-valued fields are poisoned."""
    layers = []
    for i, q in enumerate(model.layers):
        w = Pow2Weights(np.asarray(q.weights.signs).view(AuditArray),
                        np.asarray(q.weights.exps).view(AuditArray), q.weights.bits,
                        Poison(f"layer {i} beta"))
        p = MergedLayerParams(_audit_vec(q.params.a), _audit_vec(q.params.b),
                              Poison(f"layer {i} merge source"))
        layers.append(replace(q, weights=w, params=p, scale=Poison(f"layer {i} alpha")))
    heads = []
    for j, q in enumerate(model.heads):
        heads.append(replace(q, weights=np.asarray(q.weights).view(AuditArray),
                             bias=np.asarray(q.bias).view(AuditArray),
                             scale=Poison(f"head {j} scale")))
    return replace(model, layers=layers, heads=heads, input_scale=Poison("input scale"))


def audited_input(x: QTensor) -> QTensor:
    return QTensor(np.asarray(x.data).view(AuditArray), x.bits, Poison("input alpha"))


@contextmanager
def recording():
    log = AuditLog()
    _active.append(log)
    try:
        yield log
    finally:
        _active.pop()


@dataclass
class AuditReport:
    log: AuditLog
    result: object

    @property
    def total_ops(self) -> int:
        return self.log.total

    @property
    def float_ops(self) -> list:
        return self.log.float_ops

    @property
    def clean(self) -> bool:
        return self.total_ops > 0 and not self.float_ops


def audit_inference(model, x: QTensor, **options) -> AuditReport:
    """Run :func:`run_inference` under instrumentation."""
    from .inference import run_inference
    m, xa = audited_model(model), audited_input(x)
    with recording() as log:
        res = run_inference(m, xa, **options)
    return AuditReport(log, res)
