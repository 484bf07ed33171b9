"""
System pipeline
===============

The accelerator is one stage in a CPU/FPGA pipeline. Threads go to the slowest
CPU stages until the accelerator is the bottleneck.
"""

from shiftflow.sysmodel import (StageSpec, assign_threads, format_report, fpga_latency_ms,
                                pipeline_throughput)

# synthetic single-thread latencies in milliseconds
stages = [StageSpec("data-forward", 60), StageSpec("encode", 8),
          StageSpec("fpga", fpga_latency_ms(7_955_000)), StageSpec("decode", 12),
          StageSpec("mbox-conf-reshape", 3), StageSpec("mbox-conf-softmax", 45),
          StageSpec("mbox-conf-flatten", 2), StageSpec("detection-visualize", 20)]

rep = pipeline_throughput(stages)
print(f"one thread each: {rep.fps:.1f} fps, bottleneck {rep.bottleneck}, "
      f"sequential {rep.sequential_fps:.1f} fps")

for cores in (7, 8, 9):
    rep = pipeline_throughput(assign_threads(stages, cores))
    print(f"{cores} CPU threads: {rep.fps:.1f} fps, bottleneck {rep.bottleneck}")

print(format_report(assign_threads(stages, 9)), end="")
