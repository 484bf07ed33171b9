import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from shiftflow import model as M
from shiftflow.audit import AuditArray, Poison, RealArithmeticError, audit_inference, recording
from shiftflow.cli import main
from shiftflow.fixq import QTensor, read_qtensor
from shiftflow.inference import (REPORTED_GOPS, compare_float, peak_throughput, run_inference,
                                 sqnr_db)

from oracles import layer_oracle


@pytest.fixture(scope="module")
def toy(fixtures_dir):
    return M.load_model(fixtures_dir / "toy_model"), read_qtensor(fixtures_dir / "toy_input.qtensor")


@pytest.fixture(scope="module")
def toy_float(fixtures_dir):
    with np.load(fixtures_dir / "toy_calib.npz") as z:
        xs = list(z["inputs"])
    return M.load_float_model(fixtures_dir / "toy_float.npz"), xs


def with_bits(fm, m):
    return replace(fm, layers=[replace(L, bits=(m,) + L.bits[1:]) for L in fm.layers])


# --- end-to-end runs ---------------------------------------------------------

def test_toy_model_pinned_hash(toy, pinned):
    qm, x = toy
    res = run_inference(qm, x)
    assert res.digest() == pinned["toy_output_sha256"]
    assert list(res.output.dims) == pinned["toy_output_dims"]


def test_toy_model_matches_layer_oracle(toy):
    qm, x = toy
    data = x.data
    for q in qm.layers:
        data = layer_oracle(data, q.weights, q.params, q.spec.kind, q.spec.stride, q.spec.precisions[2])
    np.testing.assert_array_equal(run_inference(qm, x).output.data, data)


@pytest.mark.parametrize("limit", [9, 12, 20])
def test_tiled_equals_untiled(toy, limit):
    qm, x = toy
    assert run_inference(qm, x, tiled=True, buffer_limit=limit).digest() == run_inference(qm, x).digest()


def test_runs_are_deterministic(toy):
    qm, x = toy
    a, b = run_inference(qm, x), run_inference(qm, x)
    assert a.digest() == b.digest()
    assert a.output.data.tobytes() == b.output.data.tobytes()
    assert a.cost == b.cost and a.cycles == b.cycles


def test_example_network_shape():
    fm = M.mobilenet_like(32, width=0.125)
    assert len(fm.layers) == 22 and len(fm.heads) == 2
    body, heads = fm.specs()
    assert body[0].kind == "conv33" and body[0].stride == 2
    assert all(h.kind == "head11" and h.in_dims == body[-1].out_dims for h in heads)


def test_example_network_runs_with_heads():
    fm = M.mobilenet_like(32, width=0.125)
    rng = np.random.default_rng(0)
    xs = [rng.uniform(0, 1, fm.input_dims) for _ in range(2)]
    qm = M.quantize_network(fm, M.collect_calibration(fm, xs))
    res = run_inference(qm, M.quantize_input(qm, xs[0]), weight_buffer_capacity=1024)
    assert [h.data.shape[0] for h in res.heads] == [24, 126]
    assert res.cost.macs > 0 and res.cycles.total > 0
    assert set(res.dataflows) >= {"output_stationary", "weight_stationary"}


# --- integer-only audit -------------------------------------------------------

def test_audit_is_clean(toy):
    qm, x = toy
    rep = audit_inference(qm, x)
    assert rep.clean and rep.total_ops > 0
    assert rep.result.digest() == run_inference(qm, x).digest()


def test_audit_flags_float_arithmetic():
    a = np.arange(4).view(AuditArray)
    with recording() as log:
        _ = a + 1
        _ = a * 0.5
    assert log.total == 2 and len(log.float_ops) == 1


def test_poison_refuses_arithmetic():
    p = Poison("alpha")
    with pytest.raises(RealArithmeticError):
        p * 2
    with pytest.raises(RealArithmeticError):
        np.asarray(p)


# --- float comparison ------------------------------------------------------

def test_sqnr_of_on_grid_model_is_exact():
    fm = M.FloatModel((4, 6, 6), [M.FloatLayer("conv11", np.eye(4).reshape(4, 4, 1, 1), 1.0, 0.0,
                                                bits=(4, 3, 8))], input_bits=4, input_scale=1.0)
    rng = np.random.default_rng(1)
    xs = [rng.integers(0, 16, (4, 6, 6)).astype(float) for _ in range(2)]
    rep = compare_float(M.quantize_network(fm, M.collect_calibration(fm, xs)), fm, xs)
    assert rep.end_to_end == float("inf")
    assert "exact" in rep.format()


def test_sqnr_finite_positive_and_monotone_in_m(toy_float):
    fm, xs = toy_float
    vals = []
    for m in (2, 3, 4, 8):
        f = with_bits(fm, m)
        rep = compare_float(M.quantize_network(f, M.collect_calibration(f, xs)), f, xs)
        assert 0 < rep.end_to_end < float("inf")
        vals.append(rep.end_to_end)
    assert vals == sorted(vals)


def test_sqnr_db():
    assert sqnr_db([1, 2], [1, 2]) == float("inf")
    assert sqnr_db([3, 4], [3, 3]) == pytest.approx(10 * np.log10(25))


# --- throughput --------------------------------------------------------------

def test_peak_throughput():
    rows = {r.pe: r.peak_gops for r in peak_throughput()}
    assert rows["PE_11"] == pytest.approx(220.16)
    assert rows["PE_33"] == pytest.approx(10.32)
    assert REPORTED_GOPS <= rows["PE_11"]
    assert all(r.peak_gops == 0 for r in peak_throughput(freq_mhz=0))


# --- model files -------------------------------------------------------------

def test_model_roundtrip(tmp_path, toy):
    qm, x = toy
    M.save_model(qm, tmp_path / "m")
    back = M.load_model(tmp_path / "m")
    assert run_inference(back, x).digest() == run_inference(qm, x).digest()


def test_float_model_roundtrip(tmp_path):
    fm = M.mobilenet_like(32, width=0.125)
    M.save_float_model(fm, tmp_path / "f.npz")
    back = M.load_float_model(tmp_path / "f.npz")
    assert len(back.layers) == 22 and len(back.heads) == 2
    np.testing.assert_array_equal(back.layers[5].weight, fm.layers[5].weight)
    np.testing.assert_array_equal(back.heads[1].bn_b, fm.heads[1].bn_b)


def test_model_with_heads_roundtrip(tmp_path):
    fm = M.mobilenet_like(32, width=0.125)
    rng = np.random.default_rng(2)
    xs = [rng.uniform(0, 1, fm.input_dims)]
    qm = M.quantize_network(fm, M.collect_calibration(fm, xs))
    M.save_model(qm, tmp_path / "m")
    x = M.quantize_input(qm, xs[0])
    assert run_inference(M.load_model(tmp_path / "m"), x).digest() == run_inference(qm, x).digest()


def _copy_toy(fixtures_dir, dst):
    dst.mkdir()
    for f in (fixtures_dir / "toy_model").iterdir():
        (dst / f.name).write_bytes(f.read_bytes())
    return dst


def test_manifest_errors_name_the_layer(tmp_path, fixtures_dir):
    d = _copy_toy(fixtures_dir, tmp_path / "m")
    (d / "layer01.pow2").unlink()
    with pytest.raises((ValueError, OSError), match="layer 1"):
        M.load_model(d)
    d = _copy_toy(fixtures_dir, tmp_path / "m2")
    text = (d / "model.txt").read_text().replace("n=16", "n=17")
    (d / "model.txt").write_text(text)
    with pytest.raises(ValueError, match="layer 2"):
        M.load_model(d)
    (d / "model.txt").write_text("nonsense\n")
    with pytest.raises(ValueError, match="header"):
        M.load_model(d)


def test_bad_chain_rejected():
    fm = M.mobilenet_like(32, width=0.125)
    L = fm.layers[4]
    fm.layers[4] = replace(L, weight=L.weight[:, :-1])
    with pytest.raises(ValueError, match="layer 4"):
        fm.specs()


# --- command line ------------------------------------------------------------

def test_cli_quantize_and_run(tmp_path, capsys):
    out = tmp_path / "net"
    assert main(["quantize", "--example", "--input-hw", "32", "--width", "0.125", "--batch", "2",
                 "--out", str(out), "--save-float", str(tmp_path / "f.npz")]) == 0
    assert "22 layers, 2 heads" in capsys.readouterr().out
    img = QTensor(np.random.default_rng(3).integers(0, 256, (3, 32, 32)), 8, 1 / 255)
    from shiftflow.fixq import write_ppm
    write_ppm(tmp_path / "img.ppm", img)
    assert main(["run", "--model", str(out), "--input", str(tmp_path / "img.ppm"),
                 "--output", str(tmp_path / "y.qtensor"), "--tiled", "--buffer-limit", "9",
                 "--capacity", "inf"]) == 0
    text = capsys.readouterr().out
    assert "sha256" in text and "head 1" in text and "ram_traffic" in text
    assert read_qtensor(tmp_path / "y.qtensor").bits == 4
    assert main(["compare", "--model", str(out), "--float-model", str(tmp_path / "f.npz"),
                 "--inputs", str(tmp_path / "img.ppm")]) == 0
    assert "end-to-end" in capsys.readouterr().out


def test_cli_run_toy(fixtures_dir, pinned, capsys):
    assert main(["run", "--model", str(fixtures_dir / "toy_model"),
                 "--input", str(fixtures_dir / "toy_input.qtensor")]) == 0
    assert pinned["toy_output_sha256"] in capsys.readouterr().out


def test_cli_quantize_from_float(tmp_path, fixtures_dir, capsys):
    assert main(["quantize", "--float-model", str(fixtures_dir / "toy_float.npz"),
                 "--calib", str(fixtures_dir / "toy_calib.npz"), "--out", str(tmp_path / "q")]) == 0
    assert (tmp_path / "q" / "model.txt").exists()


def test_cli_compare(fixtures_dir, capsys):
    assert main(["compare", "--model", str(fixtures_dir / "toy_model"),
                 "--float-model", str(fixtures_dir / "toy_float.npz"),
                 "--inputs", str(fixtures_dir / "toy_calib.npz")]) == 0
    assert "dB" in capsys.readouterr().out


def test_cli_tile_plan(fixtures_dir, capsys):
    assert main(["tile-plan", "--kind", "conv11", "--dims", "4,6,15", "--n", "8", "--fuse-dw",
                 "--buffer-limit", "7"]) == 0
    out = capsys.readouterr().out
    assert "tile 1: cols [5,10) halo(1,1)" in out and "fetched columns 19" in out
    assert main(["tile-plan", "--model", str(fixtures_dir / "toy_model"), "--layer", "1",
                 "--buffer-limit", "9"]) == 0
    assert "tiles" in capsys.readouterr().out


def test_cli_dataflow_sweep(tmp_path, fixtures_dir, capsys):
    assert main(["dataflow-sweep", "--example", "--input-hw", "64", "--width", "0.25",
                 "--capacities", "256,inf", "--csv", str(tmp_path / "c.csv")]) == 0
    assert "weight_stationary" in capsys.readouterr().out
    assert (tmp_path / "c.csv").read_text().startswith("layer,kind")
    assert main(["dataflow-sweep", "--model", str(fixtures_dir / "toy_model")]) == 0


def test_cli_pipeline(fixtures_dir, capsys):
    stages = str(fixtures_dir / "stages.txt")
    assert main(["pipeline", "--stages", stages, "--assign", "--cores", "9"]) == 0
    assert "pipelined fps: 27.03" in capsys.readouterr().out
    assert main(["pipeline", "--stages", stages, "--fpga-cycles", "7955000"]) == 0
    assert "bottleneck: data-forward" in capsys.readouterr().out


def test_cli_peak(capsys):
    assert main(["peak"]) == 0
    assert "220.16" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    assert main(["run", "--model", str(tmp_path / "missing"), "--input", "x"]) == 2
    assert "shiftflow run" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "shiftflow", "peak"], capture_output=True,
                         text=True, check=True).stdout
    assert "PE_11" in out
