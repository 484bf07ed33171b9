"""
Hybrid dataflow for 1x1 layers
==============================

Output stationary keeps partial sums in the PEs but wants a whole kernel group
of weights on chip. Weight stationary reads each weight once but spills
partial sums. The hybrid rule picks per layer from the weight-buffer size.
"""

from shiftflow.dataflow import (OUTPUT_STATIONARY, WEIGHT_STATIONARY, choose_dataflow,
                                layer_cost)
from shiftflow.model import mobilenet_like, network_specs

capacity = 4096
specs = [s for s in network_specs(mobilenet_like(512)) if s.kind == "conv11"]
print(f"{'c x h x w -> n':>22} {'pick':>6} {'OS wram':>10} {'WS wram':>10} "
      f"{'OS traffic':>12} {'WS traffic':>12}")
for s in specs:
    c, h, w = s.in_dims
    os_, ws = (layer_cost(s, k, capacity) for k in (OUTPUT_STATIONARY, WEIGHT_STATIONARY))
    pick = "OS" if choose_dataflow(s, capacity) == OUTPUT_STATIONARY else "WS"
    print(f"{f'{c}x{h}x{w} -> {s.n}':>22} {pick:>6} {os_.wram_weight_reads:>10} "
          f"{ws.wram_weight_reads:>10} {os_.ram_traffic:>12} {ws.ram_traffic:>12}")

# The rule keeps early layers output stationary and switches the deep, wide
# ones. In between, a kernel group fits but the whole layer does not, and the
# pixel-outer loop streams the non-resident weights once per pixel: compare the
# OS and WS columns for those rows.
