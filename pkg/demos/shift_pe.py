"""
Shift-based processing elements
===============================

Power-of-two weights turn every multiply into a shift. This walks through the
shift-MAC, the four PE configurations and the line buffer of the depthwise PE.
"""

import numpy as np

from shiftflow.fixq import shift_mac
from shiftflow.inference import format_throughput, peak_throughput
from shiftflow.kernels import (PE_CONFIGS, DepthwiseLineBuffer, conv33_cycles, dw33,
                               line_buffer_registers, raster_stream)
from shiftflow.fixq import FixedVector, Pow2Weights, QTensor
from shiftflow.quantizer import MergedLayerParams

# 13 * (-4) is a left shift by two and a subtract
print("13 * -4 + 100 =", shift_mac(13, (-1, 2), 100))

for name, pe in PE_CONFIGS.items():
    act, wbits, out = pe.precision
    print(f"{name:8} {pe.k_t:3} x {pe.c_t:<3} act {act} bit, weight {wbits} bit, out {out} bit")
print(format_throughput(peak_throughput()))

# the depthwise PE sees one value per cycle and keeps only 2W+3 of them
rng = np.random.default_rng(1)
x = QTensor(rng.integers(0, 16, (2, 6, 10)), 4)
w = Pow2Weights(rng.integers(-1, 2, (2, 1, 3, 3)), rng.integers(0, 3, (2, 1, 3, 3)))
p = MergedLayerParams(FixedVector(np.array([64, 64]), -8), FixedVector(np.array([0, 0]), 0))
lb = DepthwiseLineBuffer(w, p, 10, 6)
for v in raster_stream(x.data):
    lb.push(v)
print(f"registers {lb.registers} = {line_buffer_registers(10)}, peak held {lb.peak}, "
      f"first output after {lb.first_output_at} values")
print("same as the direct depthwise layer:", lb.result() == dw33(x, w, p))

# stride 2 on the banked feature map only visits positions that produce outputs
base = conv33_cycles((3, 256, 256), 32, 1, "linebuffer")
jump = conv33_cycles((3, 256, 256), 32, 2, "banked")
print(f"stride-2 speedup: {base.compute_cycles / jump.compute_cycles:.2f}x")
