import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftflow.fixq import FixedVector, Pow2Weights, QTensor
from shiftflow.inference import run_inference
from shiftflow.kernels import conv11
from shiftflow.model import FloatLayer, FloatModel, collect_calibration, quantize_input, quantize_network
from shiftflow.quantizer import (activation_error, activation_thresholds,
                                 lloyd_activation_fit, merge_layer, merge_scales, pow2_assign,
                                 pow2_error, pow2_values, pow2_weight_fit, quantize_activation,
                                 quantize_scale, quantize_weights, scale_error)

from oracles import (conv2d_fast_oracle, layer_oracle, pow2_int_values, requant_real,
                     scale_search_oracle)


# --- activations -----------------------------------------------------------

def test_quantize_activation_examples():
    assert quantize_activation(1.4, 1.0, 2) == 1
    assert quantize_activation(-0.7, 0.3, 4) == 0
    assert quantize_activation(0.5, 1.0, 2) == 0       # on a threshold -> lower level
    assert quantize_activation(2.5, 1.0, 2) == 2
    assert quantize_activation(99.0, 1.0, 2) == 3
    with pytest.raises(ValueError):
        quantize_activation(1.0, 0.0, 2)


def test_thresholds_are_midpoints():
    t = activation_thresholds(0.3, 3)
    np.testing.assert_allclose(t, (np.arange(1, 8) - 0.5) * 0.3)
    assert np.all(np.diff(t) > 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 50, allow_nan=False), st.floats(0.01, 4), st.sampled_from([2, 3, 4, 8]))
def test_threshold_rule_is_nearest_level(x, alpha, bits):
    q = quantize_activation(x, alpha, bits)
    levels = np.arange(2 ** bits) * alpha
    d = np.abs(levels - x)
    best = d.min()
    # nearest level; on an exact tie the lower one
    assert d[q] == best
    assert q == int(np.flatnonzero(d == best)[0])


def test_lloyd_on_grid_samples():
    for a0 in (0.1, 0.37, 2.0):
        r = lloyd_activation_fit([0, a0, 2 * a0, 3 * a0], 2)
        assert r.alpha == pytest.approx(a0)
        assert r.error == pytest.approx(0, abs=1e-20)


def test_lloyd_single_sample_picks_top_level():
    r = lloyd_activation_fit([2.0], 2)
    assert r.alpha == pytest.approx(2 / 3)
    assert r.error == pytest.approx(0, abs=1e-20)


def test_lloyd_errors():
    with pytest.raises(ValueError):
        lloyd_activation_fit([], 4)
    with pytest.raises(ValueError):
        lloyd_activation_fit([-1.0, 0.0], 4)


def test_lloyd_counts_nonpositive_mass():
    x = np.array([-2.0, 0.0, 1.0, 2.0, 3.0])
    r = lloyd_activation_fit(x, 2)
    assert r.error == pytest.approx(activation_error(x, r.alpha, 2))
    assert r.error >= 4.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=2, max_size=200),
       st.sampled_from([2, 3, 4]))
def test_lloyd_history_non_increasing(xs, bits):
    if max(xs) <= 0:
        return
    r = lloyd_activation_fit(xs, bits)
    h = np.array(r.history)
    assert np.all(np.diff(h) <= 1e-12 * max(1.0, h[0]))
    assert r.error == pytest.approx(activation_error(xs, r.alpha, bits), rel=1e-9, abs=1e-12)


def test_lloyd_fixture_matches_grid_oracle(fixtures_dir, pinned):
    x = np.load(fixtures_dir / "lloyd_samples.npy")
    r = lloyd_activation_fit(x, pinned["samples_bits"])
    assert r.error <= pinned["alpha_grid_error"] * 1.001
    assert abs(r.alpha - pinned["alpha_grid"]) / pinned["alpha_grid"] < 1e-2


# --- power-of-two weights --------------------------------------------------

def test_pow2_assign_example():
    s, e = pow2_assign([0.3, -0.8, 1.6], 0.4, 3)
    np.testing.assert_array_equal(s, [1, -1, 1])
    np.testing.assert_array_equal(e, [0, 1, 2])
    np.testing.assert_allclose(0.4 * pow2_values(s, e), [0.4, -0.8, 1.6])


def test_pow2_fit_on_grid():
    for beta in (0.01, 0.5, 3.0):
        f = pow2_weight_fit([4 * beta, -4 * beta], 3)
        assert f.beta == pytest.approx(beta)
        np.testing.assert_array_equal(f.exps, [2, 2])
        np.testing.assert_array_equal(f.signs, [1, -1])
        assert f.error == pytest.approx(0, abs=1e-20)


def test_pow2_fit_all_zero_kernel():
    f = pow2_weight_fit(np.zeros(9), 3)
    assert f.beta == 1.0 and not f.signs.any() and f.error == 0


def test_pow2_beta_is_least_squares_optimum():
    rng = np.random.default_rng(5)
    w = rng.normal(0, 1, 27)
    f = pow2_weight_fit(w, 3)
    q = pow2_values(f.signs, f.exps)
    assert f.beta == pytest.approx(np.dot(w, q) / np.dot(q, q), rel=1e-5)
    # with the codes fixed, nudging beta either way only increases the error
    base = np.sum((w - f.beta * q) ** 2)
    for eps in (1e-3, -1e-3):
        assert np.sum((w - f.beta * (1 + eps) * q) ** 2) > base


def test_pow2_fixture_matches_grid_oracle(fixtures_dir, pinned):
    k = np.load(fixtures_dir / "kernel27.npy")
    f = pow2_weight_fit(k, pinned["kernel_bits"])
    assert f.error <= pinned["beta_grid_error"] * 1.001
    assert f.error == pytest.approx(pow2_error(k, f.beta, 3))
    assert np.all(np.diff(f.history) <= 1e-15)


def test_quantize_weights_per_kernel():
    rng = np.random.default_rng(6)
    w = rng.normal(0, 1, (4, 2, 3, 3))
    w[1] *= 10
    q = quantize_weights(w, 3)
    assert q.shape == w.shape and len(q.scales) == 4
    assert q.scales[1] > 3 * q.scales[0]


# --- scale merge and scale quantization ------------------------------------

def test_merge_scales_examples():
    assert merge_scales(1, 0, 1, 1, 1) == (1.0, 0.0)
    a, b = merge_scales(2, 3, 0.5, 0.25, 0.5)
    assert (a, b) == pytest.approx((0.5, 6.0))
    with pytest.raises(ValueError):
        merge_scales(1, 0, 1, 1, 0)


def test_quantize_scale_examples(pinned):
    s = quantize_scale(0.75)
    assert (s.mantissa, s.dexp) == (3, -2)
    z = quantize_scale(0.0)
    assert (z.mantissa, z.dexp) == (0, 0)
    v = quantize_scale(pinned["scale_vector"])
    assert v.dexp == pinned["scale_vector_d"]
    np.testing.assert_array_equal(v.mantissas, pinned["scale_vector_mantissas"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-300, 300, allow_nan=False), min_size=1, max_size=8),
       st.sampled_from([4, 8, 12]))
def test_quantize_scale_optimal(vals, bits):
    fv = quantize_scale(np.array(vals), bits)
    d, _, err = scale_search_oracle(vals, bits)
    assert scale_error(vals, fv) == pytest.approx(err, rel=1e-12, abs=1e-300)
    assert fv.dexp == d


def test_merged_integer_layer_equals_real_forward():
    # scales chosen so a' and b' are exactly representable: no rounding gap
    rng = np.random.default_rng(7)
    c, n = 8, 5
    x = QTensor(rng.integers(0, 16, (c, 6, 6)), 4)
    w = Pow2Weights(rng.integers(-1, 2, (n, c, 1, 1)), rng.integers(0, 3, (n, c, 1, 1)))
    gamma = rng.choice([0.5, 1.0, 2.0], n)
    b = rng.choice([-1.0, 0.5, 1.5], n)
    p = merge_layer(gamma, b, 0.25, np.full(n, 0.5), 1.0)
    np.testing.assert_array_equal(p.a.values(), gamma * 0.25 * 0.5)
    y = conv11(x, w, p, 4)
    # real forward: Q_A((gamma * alpha_in * beta * conv + b) / alpha_out)
    ref = layer_oracle(x.data, w, p, "conv11", 1, 4)
    real = requant_real(np.einsum("nc,chw->nhw", w.values()[:, :, 0, 0], x.data),
                        list(gamma * 0.25 * 0.5), list(b), 4)
    np.testing.assert_array_equal(y.data, ref)
    np.testing.assert_array_equal(y.data, real)


# --- whole-network conversion ---------------------------------------------

def _identity_model(c=4, hw=6):
    w = np.eye(c).reshape(c, c, 1, 1)
    return FloatModel((c, hw, hw), [FloatLayer("conv11", w, 1.0, 0.0, bits=(4, 3, 8))],
                      input_bits=4, input_scale=1.0)


def test_identity_network_reproduces_input():
    fm = _identity_model()
    rng = np.random.default_rng(8)
    xs = [rng.integers(0, 16, (4, 6, 6)).astype(float) for _ in range(3)]
    xs[0][0, 0, 0] = 15
    qm = quantize_network(fm, collect_calibration(fm, xs))
    for x in xs:
        xq = quantize_input(qm, x)
        assert run_inference(qm, xq).output == xq


def test_two_layer_network_within_one_level_of_real_oracle():
    rng = np.random.default_rng(9)
    fm = FloatModel((6, 8, 8), [
        FloatLayer("conv11", rng.normal(0, 0.5, (12, 6, 1, 1)), rng.uniform(0.5, 1.5, 12),
                   rng.normal(0, 0.2, 12)),
        FloatLayer("conv33", rng.normal(0, 0.3, (8, 12, 3, 3)), rng.uniform(0.5, 1.5, 8),
                   rng.normal(0, 0.2, 8)),
    ], input_bits=4, input_scale=0.1)
    xs = [rng.uniform(0, 1.5, (6, 8, 8)) for _ in range(4)]
    qm = quantize_network(fm, collect_calibration(fm, xs))
    xq = quantize_input(qm, xs[0])
    res = run_inference(qm, xq, keep_layers=True)
    x = xq.data
    for i, q in enumerate(qm.layers):
        s = q.spec
        # exact accumulators, then the unquantized real a', b'
        pad = 1 if s.kind == "conv33" else 0
        acc = conv2d_fast_oracle(x, pow2_int_values(q.weights), s.stride, pad)
        src = q.params.source
        real = requant_real(acc, list(src["a_real"]), list(src["b_real"]), s.precisions[2])
        got = res.layer_outputs[i].data
        assert np.max(np.abs(got - real)) <= 1
        x = got


def test_quantization_error_non_increasing_in_bits():
    rng = np.random.default_rng(10)
    x = np.maximum(rng.normal(0.5, 1, 5000), 0)
    errs = [lloyd_activation_fit(x, m).error for m in (2, 3, 4, 8)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


def test_missing_calibration_is_an_error():
    fm = _identity_model()
    with pytest.raises(ValueError, match="layer 0"):
        quantize_network(fm, {})


def test_merge_layer_vectors_share_one_binary_point():
    p = merge_layer(np.array([1.0, 2.0]), np.array([0.1, -3.0]), 0.1, np.array([0.5, 0.25]), 0.2)
    assert isinstance(p.a, FixedVector) and isinstance(p.b, FixedVector)
    assert len(p) == 2
    np.testing.assert_allclose(p.a.values(), [0.25, 0.25], atol=2 ** -8)
