"""Three-step quantization: uniform activations, power-of-two weights and
fixed-point scale merge, with Lloyd-style scale fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixq import D_MAX, D_MIN, FixedScalar, FixedVector, Pow2Weights, max_exponent

# Cap on the number of samples used to seed Lloyd via the breakpoint sweep.
SWEEP_SAMPLE_CAP = 20000


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def activation_thresholds(alpha: float, bits: int) -> np.ndarray:
    """Decision thresholds t_i = (i - 1/2) * alpha, i = 1 .. 2^M - 1."""
    return (np.arange(1, 2 ** bits) - 0.5) * alpha


def quantize_activation(x, alpha: float, bits: int):
    """Integer level of ``x`` on the grid {0 .. 2^M - 1} * alpha.

    A value sitting exactly on a threshold maps to the lower level.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    t = activation_thresholds(alpha, bits)
    q = np.searchsorted(t, x, side="left")
    return int(q) if np.ndim(q) == 0 else q.astype(np.int64)


@dataclass
class ActQuantResult:
    alpha: float
    bits: int
    thresholds: np.ndarray
    error: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _level_values_act(bits: int) -> np.ndarray:
    return np.arange(2 ** bits, dtype=np.float64)


def _level_values_pow2(bits: int) -> np.ndarray:
    return np.concatenate(([0.0], 2.0 ** np.arange(max_exponent(bits) + 1)))


def _assign(mags: np.ndarray, scale: float, levels: np.ndarray) -> np.ndarray:
    # nearest level by midpoint thresholds, boundary maps down
    t = 0.5 * (levels[:-1] + levels[1:]) * scale
    return np.searchsorted(t, mags, side="left")


def _sweep_scale(mags: np.ndarray, levels: np.ndarray) -> float:
    """Exact minimiser of sum (m - s * Q_s(m))^2 over s > 0.

    The assignment only changes at s = m / t_j, so the objective is a
    piecewise quadratic; minimise each piece in closed form.
    """
    m = mags[mags > 0]
    if m.size > SWEEP_SAMPLE_CAP:
        m = np.sort(m)[np.linspace(0, m.size - 1, SWEEP_SAMPLE_CAP).astype(np.int64)]
    top = len(levels) - 1
    mids = 0.5 * (levels[:-1] + levels[1:])           # t_1 .. t_L
    # crossing s = m / t_j moves the sample from level j down to j - 1
    ev = (m[:, None] / mids[None, :]).ravel()
    j = np.broadcast_to(np.arange(1, top + 1), (m.size, top)).ravel()
    mm = np.broadcast_to(m[:, None], (m.size, top)).ravel()
    order = np.argsort(ev, kind="stable")
    ev, j, mm = ev[order], j[order], mm[order]
    d_xq = mm * (levels[j - 1] - levels[j])
    d_qq = levels[j - 1] ** 2 - levels[j] ** 2
    s_xq = np.concatenate(([m.sum() * levels[top]], m.sum() * levels[top] + np.cumsum(d_xq)))
    s_qq = np.concatenate(([m.size * levels[top] ** 2],
                           m.size * levels[top] ** 2 + np.cumsum(d_qq)))
    lo = np.concatenate(([0.0], ev))
    hi = np.concatenate((ev, [np.inf]))
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = np.where(s_qq > 0, s_xq / s_qq, lo)
    cand = np.clip(cand, lo, hi)
    cand = np.where(np.isfinite(cand), cand, lo)
    obj = -2 * cand * s_xq + cand ** 2 * s_qq
    k = int(np.argmin(obj))
    best = float(cand[k])
    return best if best > 0 else float(m.max() / levels[top])


def _lloyd(mags: np.ndarray, levels: np.ndarray, scale: float, tol: float,
           max_iter: int, const_err: float):
    """Alternate nearest assignment and least-squares scale update."""
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        q = levels[_assign(mags, scale, levels)]
        err = float(np.sum((mags - scale * q) ** 2)) + const_err
        history.append(err)
        qq = float(np.dot(q, q))
        if qq == 0:
            break
        new = float(np.dot(mags, q)) / qq
        done = abs(new - scale) < tol * scale
        scale = new
        if done:
            break
    q = levels[_assign(mags, scale, levels)]
    err = float(np.sum((mags - scale * q) ** 2)) + const_err
    if not history or err <= history[-1]:
        history.append(err)
    return scale, err, history, it


def _fit_scale(mags, levels, init, tol, max_iter, const_err):
    runs = [_lloyd(mags, levels, init, tol, max_iter, const_err)]
    seed = _sweep_scale(mags, levels)
    runs.append(_lloyd(mags, levels, seed, tol, max_iter, const_err))
    # first run wins ties so the plain start is preferred when it is optimal
    return min(runs, key=lambda r: r[1])


def lloyd_activation_fit(samples, bits: int, tol: float = 1e-6,
                         max_iter: int = 100) -> ActQuantResult:
    """Fit the activation scale alpha for ``bits``-bit uniform quantization."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no samples to fit")
    pos = x[x > 0]
    if pos.size == 0:
        raise ValueError("all samples are non-positive; nothing to fit")
    levels = _level_values_act(bits)
    const_err = float(np.sum(x[x <= 0] ** 2))
    init = float(pos.max()) / (2 ** bits - 1)
    alpha, err, history, it = _fit_scale(pos, levels, init, tol, max_iter, const_err)
    return ActQuantResult(alpha, bits, activation_thresholds(alpha, bits), err, history, it)


def activation_error(samples, alpha: float, bits: int) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    return float(np.sum((x - alpha * quantize_activation(x, alpha, bits)) ** 2))


# --------------------------------------------------------------------------
# power-of-two weights
# --------------------------------------------------------------------------

def pow2_assign(kernel, beta: float, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest point of {0, +-2^0 .. +-2^emax} * beta, as (signs, exponents)."""
    w = np.asarray(kernel, dtype=np.float64)
    level = _assign(np.abs(w), beta, _level_values_pow2(bits))
    signs = np.where(level > 0, np.sign(w), 0).astype(np.int8)
    exps = np.where(level > 0, level - 1, 0).astype(np.int8)
    return signs, exps


def pow2_values(signs, exps) -> np.ndarray:
    return np.asarray(signs, dtype=np.float64) * 2.0 ** np.asarray(exps)


@dataclass
class Pow2Fit:
    beta: float
    signs: np.ndarray
    exps: np.ndarray
    error: float
    history: list[float] = field(default_factory=list)


def pow2_weight_fit(kernel, bits: int = 3, tol: float = 1e-6,
                    max_iter: int = 100) -> Pow2Fit:
    """Fit one kernel's scale beta and its power-of-two codes."""
    w = np.asarray(kernel, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty kernel")
    mags = np.abs(w).ravel()
    if not mags.any():
        zeros = np.zeros(w.shape, dtype=np.int8)
        return Pow2Fit(1.0, zeros, zeros.copy(), 0.0, [0.0])
    levels = _level_values_pow2(bits)
    init = float(mags.max()) / 2 ** max_exponent(bits)
    beta, err, history, _ = _fit_scale(mags, levels, init, tol, max_iter, 0.0)
    signs, exps = pow2_assign(w, beta, bits)
    return Pow2Fit(beta, signs, exps, err, history)


def pow2_error(kernel, beta: float, bits: int) -> float:
    w = np.asarray(kernel, dtype=np.float64)
    return float(np.sum((w - beta * pow2_values(*pow2_assign(w, beta, bits))) ** 2))


def quantize_weights(weights: np.ndarray, bits: int = 3) -> Pow2Weights:
    """Per-kernel fit of an (n, c, kh, kw) float weight tensor."""
    fits = [pow2_weight_fit(k, bits) for k in np.asarray(weights, dtype=np.float64)]
    return Pow2Weights(np.stack([f.signs for f in fits]), np.stack([f.exps for f in fits]),
                       bits, np.array([f.beta for f in fits]))


# --------------------------------------------------------------------------
# scale merge and scale quantization
# --------------------------------------------------------------------------

def merge_scales(gamma, bn_b, alpha_in, beta, alpha_out):
    """Fold batch-norm and quantization scales into (a', b').

    a' = gamma * alpha_in * beta / alpha_out,  b' = b / alpha_out
    """
    if np.any(np.asarray(alpha_out) <= 0):
        raise ValueError("output scale must be positive")
    a = np.asarray(gamma) * alpha_in * np.asarray(beta) / alpha_out
    b = np.asarray(bn_b) / alpha_out
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return float(a), float(b)
    return np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def _scale_candidates(v: np.ndarray, bits: int, d: int) -> np.ndarray:
    lim = 2 ** (bits - 1) - 1
    return np.clip(round_half_away(v / 2.0 ** d), -lim, lim)


def quantize_scale(v, bits: int = 8):
    """Best K-bit fixed-point representation searching d = 0 .. -15.

    A scalar gives a :class:`FixedScalar`; a vector shares one binary point
    chosen to minimise the total squared error. Ties keep the larger d.
    """
    arr = np.asarray(v, dtype=np.float64)
    flat = arr.ravel()
    best = None
    for d in range(D_MAX, D_MIN - 1, -1):
        m = _scale_candidates(flat, bits, d)
        err = float(np.sum((flat - m * 2.0 ** d) ** 2))
        if best is None or err < best[0]:
            best = (err, d, m)
    _, d, m = best
    if arr.ndim == 0:
        return FixedScalar(int(m[0]), d, bits)
    return FixedVector(m.astype(np.int64), d, bits)


def scale_error(v, fixed) -> float:
    vals = fixed.value if isinstance(fixed, FixedScalar) else fixed.values()
    return float(np.sum((np.asarray(v, dtype=np.float64) - vals) ** 2))


@dataclass(frozen=True)
class MergedLayerParams:
    """Per-kernel fixed-point (a', b') of one layer.

    ``source`` keeps the real-valued terms (gamma, b, alpha_in, alpha_out,
    beta) for audit; integer inference never reads it.
    """

    a: FixedVector
    b: FixedVector
    source: dict | None = None

    def __len__(self):
        return len(self.a)


def merge_layer(gamma, bn_b, alpha_in, beta, alpha_out, bits: int = 8) -> MergedLayerParams:
    """Scale merge followed by scale quantization for one layer."""
    a, b = merge_scales(gamma, bn_b, alpha_in, beta, alpha_out)
    src = dict(gamma=np.asarray(gamma, dtype=float), bn_b=np.asarray(bn_b, dtype=float),
               alpha_in=float(alpha_in), beta=np.asarray(beta, dtype=float),
               alpha_out=float(alpha_out), a_real=np.atleast_1d(a), b_real=np.atleast_1d(b))
    return MergedLayerParams(quantize_scale(np.atleast_1d(a), bits),
                             quantize_scale(np.atleast_1d(b), bits), src)


def identity_params(n: int, bits: int = 8) -> MergedLayerParams:
    """a' = 1, b' = 0 for every kernel."""
    return MergedLayerParams(FixedVector(np.ones(n, dtype=np.int64), 0, bits),
                             FixedVector(np.zeros(n, dtype=np.int64), 0, bits))
