"""
Column-prior tiling
===================

Split a fused 1x1 + depthwise pair by output column so each tile fits a small
on-chip buffer, and check that the stitched result matches the untiled run.
"""

import numpy as np

from shiftflow.fixq import FixedVector, Pow2Weights, QTensor
from shiftflow.kernels import LayerSpec
from shiftflow.quantizer import MergedLayerParams
from shiftflow.tiling import execute_tiled, plan_tiles, register_cost_compare, run_chain

# keeping whole rows costs 2W+3 registers; splitting the width shrinks that
for split in (1, 2, 4):
    row, col = register_cost_compare(512, split)
    print(f"W=512 split {split}: row-prior {row}, column-prior {col} registers")

# a fused 1x1 -> depthwise pair, 15 columns wide, buffer of 7 columns
up = LayerSpec("conv11", (4, 8, 15), 8, fusion="into_dw")
stages = [up, LayerSpec("dw33", up.out_dims, 8)]
plan = plan_tiles(stages, 15, 7)
print(plan.dump(), end="")
print(f"columns fetched {plan.ddr_columns} for a width of 15")

rng = np.random.default_rng(2)


def params(n, d):
    return MergedLayerParams(FixedVector(rng.integers(20, 120, n), d),
                             FixedVector(rng.integers(-20, 20, n), -3))


args = [(Pow2Weights(rng.integers(-1, 2, (8, 4, 1, 1)), rng.integers(0, 3, (8, 4, 1, 1))), params(8, -6)),
        (Pow2Weights(rng.integers(-1, 2, (8, 1, 3, 3)), rng.integers(0, 3, (8, 1, 3, 3))), params(8, -8))]
x = QTensor(rng.integers(0, 16, (4, 8, 15)), 4)
tiled, report = execute_tiled(plan, args, x)
print("tiled equals untiled:", tiled == run_chain(stages, args, x))
print("values fetched per tile:", report.ddr_values)
