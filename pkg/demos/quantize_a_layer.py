"""
Quantizing one layer to integers
================================

Fit an activation step, power-of-two weights and a merged integer scale for a
single 1x1 layer, then check the integer layer against the float one.
"""

import numpy as np

from shiftflow.fixq import QTensor
from shiftflow.kernels import conv11
from shiftflow.quantizer import (lloyd_activation_fit, merge_layer, quantize_activation,
                                 quantize_weights)

rng = np.random.default_rng(0)

# a float 1x1 layer with batch norm folded into gamma and b
c, n = 16, 8
weight = rng.normal(0, 0.3, (n, c, 1, 1))
gamma, bn_b = rng.uniform(0.5, 1.5, n), rng.normal(0, 0.1, n)
x = np.maximum(rng.normal(0.3, 0.5, (c, 12, 12)), 0)
y = np.maximum(gamma[:, None, None] * np.einsum("nc,chw->nhw", weight[:, :, 0, 0], x)
               + bn_b[:, None, None], 0)

# 4-bit activation steps for the input and the output, fitted by Lloyd iteration
a_in = lloyd_activation_fit(x.ravel(), 4)
a_out = lloyd_activation_fit(y.ravel(), 4)
print(f"input step {a_in.alpha:.4f}, output step {a_out.alpha:.4f}, "
      f"{len(a_out.history)} iterations")

# 3-bit power-of-two weights, one scale per kernel
w = quantize_weights(weight, 3)
print("weight codes of kernel 0:", [(int(s), int(e)) for s, e in zip(w.signs[0, :6, 0, 0], w.exps[0, :6, 0, 0])])

# fold every real scale into one 8-bit a' and b' per output channel
params = merge_layer(gamma, bn_b, a_in.alpha, w.scales, a_out.alpha)
print(f"a' binary point 2^{params.a.dexp}, b' binary point 2^{params.b.dexp}")

# integer inference: shifts, adds and one fixed-point requantize
xq = QTensor(quantize_activation(x, a_in.alpha, 4), 4, a_in.alpha)
yq = conv11(xq, w, params)
err = np.abs(yq.data * a_out.alpha - y)
print(f"max error {err.max():.3f}, mean error {err.mean():.3f} (one step is {a_out.alpha:.3f})")
