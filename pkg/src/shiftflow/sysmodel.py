"""Analytical model of the pipelined CPU/FPGA detection system: per-stage
latency, thread assignment and frame rate."""

from __future__ import annotations

from dataclasses import dataclass, replace

STAGE_NAMES = ("data-forward", "encode", "fpga", "decode", "mbox-conf-reshape",
               "mbox-conf-softmax", "mbox-conf-flatten", "detection-visualize")
PRE_PROCESSING = ("data-forward", "encode")
POST_PROCESSING = ("decode", "mbox-conf-reshape", "mbox-conf-softmax",
                   "mbox-conf-flatten", "detection-visualize")
DEFAULT_CORES = 4
FPGA_MHZ = 215.0


@dataclass(frozen=True)
class StageSpec:
    name: str
    latency_ms: float
    threads: int = 1

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ValueError(f"unknown stage {self.name!r}; expected one of {STAGE_NAMES}")
        if not self.latency_ms > 0:
            raise ValueError(f"stage {self.name}: latency must be positive, got {self.latency_ms}")
        if self.threads < 1:
            raise ValueError(f"stage {self.name}: threads must be >= 1")

    @property
    def on_cpu(self) -> bool:
        return self.name != "fpga"

    @property
    def rate(self) -> float:
        """Frames per second this stage sustains."""
        return 1000.0 * self.threads / self.latency_ms


@dataclass(frozen=True)
class PipelineReport:
    fps: float
    bottleneck: str
    utilization: dict
    sequential_fps: float

    @property
    def speedup(self) -> float:
        return self.fps / self.sequential_fps


def pipeline_throughput(stages) -> PipelineReport:
    """Steady-state frame rate of the pipeline and its bottleneck stage."""
    stages = list(stages)
    if not stages:
        raise ValueError("pipeline has no stages")
    for s in stages:
        if not s.latency_ms > 0:
            raise ValueError(f"stage {s.name}: latency must be positive")
    slow = min(stages, key=lambda s: s.rate)
    fps = slow.rate
    seq = 1000.0 / sum(s.latency_ms for s in stages)
    util = {s.name: fps / s.rate for s in stages}
    return PipelineReport(fps, slow.name, util, seq)


def assign_threads(stages, core_budget: int = DEFAULT_CORES) -> list[StageSpec]:
    """Give each CPU stage one thread, then grant the remaining budget one
    thread at a time to the slowest CPU stage (earliest stage on ties)."""
    if core_budget < 1:
        raise ValueError("need at least one CPU thread")
    out = [replace(s, threads=1) for s in stages]
    cpu = [i for i, s in enumerate(out) if s.on_cpu]
    for _ in range(core_budget - len(cpu)):
        if not cpu:
            break
        i = min(cpu, key=lambda k: (out[k].rate, k))
        out[i] = replace(out[i], threads=out[i].threads + 1)
    return out


def fpga_latency_ms(cycles: int, freq_mhz: float = FPGA_MHZ) -> float:
    """Accelerator latency of one frame from a cycle count."""
    if freq_mhz <= 0:
        raise ValueError("frequency must be positive")
    return cycles / (freq_mhz * 1e3)


def parse_stage_table(text: str) -> list[StageSpec]:
    """Read ``name latency_ms threads`` lines; ``#`` starts a comment."""
    stages = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"line {lineno}: expected 'name latency_ms [threads]'")
        try:
            threads = int(parts[2]) if len(parts) == 3 else 1
            stages.append(StageSpec(parts[0], float(parts[1]), threads))
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return stages


def format_stage_table(stages) -> str:
    return "".join(f"{s.name} {s.latency_ms:g} {s.threads}\n" for s in stages)


def format_report(stages) -> str:
    """Text breakdown grouped into pre-processing, accelerator and post-processing."""
    stages = list(stages)
    rep = pipeline_throughput(stages)
    groups = [("pre-processing", PRE_PROCESSING), ("accelerator", ("fpga",)),
              ("post-processing", POST_PROCESSING)]
    lines = []
    for title, names in groups:
        members = [s for s in stages if s.name in names]
        if not members:
            continue
        lines.append(f"{title}:")
        for s in members:
            lines.append(f"  {s.name:<22}{s.latency_ms:9.2f} ms  x{s.threads}  "
                         f"{s.latency_ms / s.threads:8.2f} ms/frame  util {rep.utilization[s.name]:5.1%}")
    lines.append(f"bottleneck: {rep.bottleneck}")
    lines.append(f"pipelined fps: {rep.fps:.2f}")
    lines.append(f"sequential fps: {rep.sequential_fps:.2f}")
    return "\n".join(lines) + "\n"
