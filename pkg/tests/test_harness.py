import json

import numpy as np
import pytest

from equicheck.harness import bench, body_order, cli, model_check, smoothness, sweep
from equicheck.irreps import IrrepsError
from equicheck.model import ModelConfig, ParseError, Structure

TINY = ModelConfig(l_max=2, m_max=1, n_blocks=1, channels=8, heads=2, d_ffn=16, d_edge=8, n_radial=8)


# --------------------------------------------------------------------------
# sweep


@pytest.mark.parametrize("err,label", [(0.0, "strict"), (1e-5, "strict"), (2e-5, "marginal"), (1e-3, "broken")])
def test_classify(err, label):
    assert sweep.classify(err) == label


def test_small_sweep():
    rep = sweep.equivariance_sweep("swiglu_s2", 2, None, [(6, 6), (8, 8)], trials=3)
    assert [r.classification for r in rep.rows] == ["broken", "strict"]
    gate = sweep.equivariance_sweep("gate", 2, 1, [(6, 6)], trials=2)
    assert gate.rows[0].path == "attention" and gate.rows[0].classification == "strict"


def test_sweep_report_deterministic():
    a = sweep.equivariance_sweep("s2", 2, None, [(8, 8)], trials=2, seed=5)
    b = sweep.equivariance_sweep("s2", 2, None, [(8, 8)], trials=2, seed=5)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    assert a.to_csv().splitlines()[0] == "op,path,l_max,m_max,r_phi,r_theta,trials,error,classification"


def test_compare_with_reference_rules():
    row = sweep.SweepRow("swiglu_s2", "ffn", 2, None, 6, 6, 1, 5e-4, "marginal")
    (cell,) = sweep.compare_with_reference(sweep.SweepReport([row]))
    assert cell["expected"] == "not strict" and not cell["match"]
    row = sweep.SweepRow("s2", "ffn", 2, None, 6, 6, 1, 5e-4, "marginal")
    assert sweep.compare_with_reference(sweep.SweepReport([row]))[0]["match"]
    off_table = sweep.SweepRow("s2", "ffn", 2, None, 7, 7, 1, 0.0, "strict")
    assert sweep.compare_with_reference(sweep.SweepReport([off_table])) == []


# --------------------------------------------------------------------------
# body order


def test_pair_validation(tmp_path):
    with pytest.raises(IrrepsError):
        body_order.CounterexamplePair("bad", [[1, 0, 0]], [[2, 0, 0]])
    with pytest.raises(IrrepsError):
        body_order.CounterexamplePair("bad", [[0, 0, 0]], [[0, 0, 0]])
    pair = body_order.angle_pair()
    path = tmp_path / "pair.json"
    path.write_text(json.dumps(pair.to_dict()))
    back = body_order.CounterexamplePair.from_json(path)
    assert back.name == "angle-90-vs-120"
    np.testing.assert_array_equal(back.env_b, pair.env_b)


def test_identical_pair_never_separates():
    r = body_order.body_order_probe("swiglu_s2", 1, body_order.identical_pair(), seeds=2)
    assert r["max"] == 0.0 and r["verdict"] == "indistinguishable"


def test_probe_rejects_ffn_count():
    with pytest.raises(IrrepsError):
        body_order.body_order_probe("gate", 4, body_order.angle_pair())


# --------------------------------------------------------------------------
# smoothness


def test_scan_spec_parse():
    s = smoothness.ScanSpec.parse("moving_atom = 2\ndirection = 1, 0, 0\nt_start=-0.1\nt_stop=0.1\nstep=0.01\n")
    assert s.direction == (1.0, 0.0, 0.0) and s.halved().step == 0.005


@pytest.mark.parametrize("text", [
    "moving_atom = 2\ndirection = 1, 0\nt_start=0\nt_stop=1\nstep=0.1",
    "moving_atom = 2\ndirection = 1, 0, 0\nt_start=0\nt_stop=1",
    "moving_atom = 2\ndirection = 1, 0, 0\nt_start=0\nt_stop=1\nstep=-0.1",
    "moving_atom = 2\ndirection = 1, 0, 0\nt_start=1\nt_stop=0\nstep=0.1",
    "moving_atom = x\ndirection = 1, 0, 0\nt_start=0\nt_stop=1\nstep=0.1",
    "moving_atom 2",
])
def test_scan_spec_errors(text):
    with pytest.raises(ParseError):
        smoothness.ScanSpec.parse(text)


def test_crossings_of_default_scenario():
    structure, scan = smoothness.default_scenario()
    (c,) = smoothness.crossings(structure, scan, 5.0)
    assert np.linalg.norm(structure.positions[2] + [c, 0, 0]) == pytest.approx(5.0)


def test_boundary_jump():
    rows = np.array([[0.0, 1.0], [1.0, 1.5], [2.0, 4.0], [3.0, 4.1]])
    assert smoothness.boundary_jump(rows, [1.5]) == 2.5
    assert smoothness.boundary_jump(rows, [7.0]) == 0.0


def test_no_crossing_gives_zero_jumps():
    s = Structure(np.array([6, 6]), np.array([[0.0, 0, 0], [1.5, 0, 0]]))
    scan = smoothness.ScanSpec(1, (0, 1.0, 0), 0.0, 0.02, 0.01)
    rep = smoothness.smoothness_scan(s, scan, TINY)
    assert rep["crossings"] == [] and rep["jump_on"] == rep["jump_off"] == 0.0
    assert rep["halving_ratio"] is None


# --------------------------------------------------------------------------
# benchmarks


def test_bench_fused_small():
    r = bench.bench_fused(l_max=2, m_max=1, n_edges=64, repetitions=1)
    assert r.equal
    assert (r.permutations_fused, r.permutations_unfused) == (0, 2)


def test_bench_tp_agreement():
    r = bench.bench_tp((1, 2, 3), repetitions=1, channels=4)
    assert max(r.agreement) <= 1e-5
    with pytest.raises(ValueError):
        bench.bench_tp((2, 4))


def test_loglog_slope():
    x = np.array([2.0, 4, 8, 16])
    assert bench.loglog_slope(x, 3 * x**4) == pytest.approx(4.0)


# --------------------------------------------------------------------------
# model check


def test_model_check_small():
    results = model_check.model_check(TINY, trials=2, n_atoms=5)
    by = {r.name: r for r in results}
    assert set(by) == {"energy_invariance", "force_equivariance", "sublayer_equivariance",
                       "permutation", "translation", "locality", "extensivity"}
    assert all(r.passed for r in results)
    assert model_check.summarize(results) and not model_check.summarize(results, expect_broken=True)


def test_summarize_expect_broken():
    ok = model_check.CheckResult("permutation", 0.0, 0.0, True)
    bad_rot = model_check.CheckResult("energy_invariance", 1e-2, 1e-5, False, "broken")
    bad_perm = model_check.CheckResult("permutation", 1.0, 0.0, False)
    assert model_check.summarize([ok, bad_rot], expect_broken=True)
    assert not model_check.summarize([bad_perm, bad_rot], expect_broken=True)
    assert not model_check.summarize([ok, bad_rot])


# --------------------------------------------------------------------------
# CLI


def test_render_formats():
    rows = [{"a": 1, "b": 0.5}]
    text = cli.render("csv", rows, {"n": 1}, {"t": 0.25})
    assert text == "a,b\n1,5.000000e-01\n\n# summary\nn,1\n\n# timings\nt,2.500000e-01\n"
    doc = json.loads(cli.render("json", rows, {"n": 1}))
    assert doc == {"rows": rows, "summary": {"n": 1}}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("\n".join(f"{k} = {v}" for k, v in [
        ("l_max", 2), ("m_max", 1), ("n_blocks", 1), ("channels", 8), ("heads", 2), ("d_ffn", 16),
        ("d_edge", 8), ("n_radial", 8),
    ]))
    return path


def test_cli_model_check(tiny_config, tmp_path):
    out = tmp_path / "report.json"
    argv = ["model-check", "--config", str(tiny_config), "--trials", "2", "--format", "json", "--out", str(out)]
    assert cli.main(argv) == 0
    assert json.loads(out.read_text())["summary"]["passed"] is True
    assert cli.main(argv + ["--expect-broken"]) == 1


def test_cli_custom_sweep_is_byte_identical(capsys):
    argv = ["sweep", "--op", "swiglu_s2", "--l-max", "2", "--grids", "6x6,8x8", "--trials", "2"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == first


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["sweep", "--op", "s2"],
    ["sweep", "--op", "s2", "--l-max", "2", "--grids", "8by8"],
    ["model-check", "--config", "/nonexistent/file.cfg"],
    ["model-check", "--seed", "-1"],
    ["smoothness", "--scan", "x.txt"],
    ["body-order", "--num-ffns", "4"],
])
def test_cli_usage_errors(argv, capsys):
    assert cli.main(argv) == 2


def test_cli_bad_config_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("colour = blue\n")
    assert cli.main(["model-check", "--config", str(path)]) == 2
