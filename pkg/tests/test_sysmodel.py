from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shiftflow.sysmodel import (STAGE_NAMES, StageSpec, assign_threads, format_report,
                                format_stage_table, fpga_latency_ms, parse_stage_table,
                                pipeline_throughput)

CPU = [n for n in STAGE_NAMES if n != "fpga"]


def test_bottleneck_example():
    stages = [StageSpec("encode", 10), StageSpec("decode", 40, 2), StageSpec("mbox-conf-softmax", 30)]
    rep = pipeline_throughput(stages)
    assert rep.bottleneck == "mbox-conf-softmax"
    assert rep.fps == pytest.approx(1000 / 30)
    assert rep.utilization["mbox-conf-softmax"] == pytest.approx(1.0)


def test_fpga_bound_pipeline():
    stages = [StageSpec("fpga", 37)] + [StageSpec(n, 20) for n in CPU]
    rep = pipeline_throughput(stages)
    assert rep.bottleneck == "fpga" and rep.fps == pytest.approx(27.03, abs=0.01)


def test_single_stage_pipelined_equals_sequential():
    rep = pipeline_throughput([StageSpec("fpga", 37)])
    assert rep.fps == pytest.approx(rep.sequential_fps) and rep.speedup == pytest.approx(1)


def test_stage_validation():
    with pytest.raises(ValueError):
        StageSpec("fpga", 0)
    with pytest.raises(ValueError):
        StageSpec("fpga", 5, 0)
    with pytest.raises(ValueError):
        StageSpec("nms", 5)
    with pytest.raises(ValueError):
        pipeline_throughput([])


def test_assign_equal_latency_one_each():
    stages = [StageSpec(n, 10) for n in CPU]
    assert [s.threads for s in assign_threads(stages, len(stages))] == [1] * len(stages)


def test_assign_softmax_twice_as_slow():
    stages = [StageSpec(n, 20 if n == "mbox-conf-softmax" else 10) for n in CPU]
    out = assign_threads(stages, len(stages) + 1)
    assert {s.name: s.threads for s in out}["mbox-conf-softmax"] == 2
    assert sum(s.threads for s in out) == len(stages) + 1


def test_assign_errors_and_fpga_untouched():
    with pytest.raises(ValueError):
        assign_threads([StageSpec("encode", 5)], 0)
    out = assign_threads([StageSpec("fpga", 50), StageSpec("encode", 5)], 5)
    assert out[0].threads == 1 and out[1].threads == 5      # budget counts CPU threads


stage_lists = st.lists(st.tuples(st.sampled_from(STAGE_NAMES), st.floats(0.5, 200),
                                 st.integers(1, 4)), min_size=1, max_size=8)


@given(stage_lists)
def test_pipelined_at_least_sequential(spec):
    rep = pipeline_throughput([StageSpec(*s) for s in spec])
    assert rep.fps >= rep.sequential_fps * (1 - 1e-12)


@given(stage_lists)
def test_extra_bottleneck_thread_never_hurts(spec):
    stages = [StageSpec(*s) for s in spec]
    rep = pipeline_throughput(stages)
    i = next(k for k, s in enumerate(stages) if s.name == rep.bottleneck)
    more = list(stages)
    more[i] = replace(more[i], threads=more[i].threads + 1)
    assert pipeline_throughput(more).fps >= rep.fps


@given(stage_lists)
def test_dropping_visualize_never_hurts(spec):
    stages = [StageSpec(*s) for s in spec]
    rest = [s for s in stages if s.name != "detection-visualize"]
    if rest:
        assert pipeline_throughput(rest).fps >= pipeline_throughput(stages).fps


@given(stage_lists, st.integers(1, 16))
def test_assign_is_deterministic_and_in_budget(spec, budget):
    stages = [StageSpec(*s) for s in spec]
    a, b = assign_threads(stages, budget), assign_threads(stages, budget)
    assert a == b
    cpu = [s for s in a if s.on_cpu]
    assert all(s.threads >= 1 for s in a)
    assert sum(s.threads for s in cpu) <= max(budget, len(cpu))


def test_stage_table_roundtrip(fixtures_dir):
    stages = parse_stage_table((fixtures_dir / "stages.txt").read_text())
    assert [s.name for s in stages] == list(STAGE_NAMES)
    assert parse_stage_table(format_stage_table(stages)) == stages
    with pytest.raises(ValueError, match="line 2"):
        parse_stage_table("encode 5\nfpga\n")
    with pytest.raises(ValueError, match="line 1"):
        parse_stage_table("encode fast 1\n")


def test_report_groups():
    text = format_report([StageSpec(n, 10) for n in STAGE_NAMES])
    lines = text.splitlines()
    assert lines[0] == "pre-processing:" and "accelerator:" in lines and "post-processing:" in lines
    assert lines[-2] == "pipelined fps: 100.00"


def test_fpga_latency_from_cycles():
    assert fpga_latency_ms(215_000) == pytest.approx(1.0)
    assert fpga_latency_ms(7_955_000) == pytest.approx(37.0)
    with pytest.raises(ValueError):
        fpga_latency_ms(10, 0)
