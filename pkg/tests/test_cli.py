import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from roesserlip.cli import main
from roesserlip.model import ConvLayerSpec, NetworkSpec, random_network, save_network

GOLDEN = Path(__file__).parent / "golden"
TINY = GOLDEN / "tiny_conv.json"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def _drop_timing(obj):
    if isinstance(obj, dict):
        return {k: _drop_timing(v) for k, v in obj.items() if not k.startswith("time_") and k != "solve_time"}
    if isinstance(obj, list):
        return [_drop_timing(v) for v in obj]
    return obj


def _close(a, b, rel):
    if isinstance(a, dict):
        assert a.keys() == b.keys()
        for k in a:
            _close(a[k], b[k], rel)
    elif isinstance(a, list):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _close(x, y, rel)
    elif isinstance(a, float):
        assert a == pytest.approx(b, rel=rel)
    else:
        assert a == b


@pytest.fixture
def single_tap(tmp_path):
    path = tmp_path / "tap.json"
    save_network(NetworkSpec(4, 4, 1, [ConvLayerSpec.from_taps(np.full((1, 1, 1, 1), -2.5))]), path)
    return path


def test_realize_golden(capsys):
    code, out = run(capsys, "realize", TINY)
    assert code == 0
    expected = json.loads((GOLDEN / "realize_tiny.json").read_text())
    got = json.loads(out)
    expected.pop("model")
    got.pop("model")
    assert got == expected
    assert got["n1"] == got["n2"] == 6


def test_realize_writes_matrices(capsys, tmp_path):
    path = tmp_path / "sys.json"
    code, _ = run(capsys, "realize", TINY, "--matrices", path)
    assert code == 0
    doc = json.loads(path.read_text())
    assert np.array(doc["A12"]).shape == (6, 6)


def test_bench_golden(capsys):
    code, out = run(capsys, "bench-random", "--instances", 2, "--d1-list", "5,10", "--seed", 7, "--format", "json")
    assert code == 0
    expected = json.loads((GOLDEN / "bench_seed7.json").read_text())
    _close(_drop_timing(json.loads(out)), expected, rel=1e-6)


def test_bench_single_instance_csv(capsys):
    code, out = run(capsys, "bench-random", "--instances", 1, "--d1-list", "5")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["instance"] for r in rows] == ["0", "mean"]
    values = [float(rows[0][k]) for k in ("roesser_sdp", "toeplitz_d5", "hinf_grid")]
    assert all(v >= 0 for v in values)
    assert rows[0]["status"] == "ok"


def test_bench_toeplitz_columns_nondecreasing(capsys):
    code, out = run(capsys, "bench-random", "--instances", 3, "--d1-list", "3,6,12", "--seed", 2, "--format", "json")
    assert code == 0
    for row in json.loads(out)["rows"]:
        cols = [row["toeplitz_d3"], row["toeplitz_d6"], row["toeplitz_d12"]]
        assert all(b >= a - 1e-9 for a, b in zip(cols, cols[1:]))


def test_single_tap_lipschitz(capsys, single_tap):
    code, out = run(capsys, "lipschitz", single_tap)
    assert code == 0
    report = json.loads(out)
    assert report["gamma"] == pytest.approx(2.5, abs=1e-6)
    assert report["validation"] == "pass"


def test_method_ordering(capsys, tmp_path):
    path = tmp_path / "layer.json"
    layer = ConvLayerSpec.from_taps(np.random.default_rng(11).standard_normal((1, 1, 3, 3)))
    save_network(NetworkSpec(10, 10, 1, [layer]), path)
    gammas = {}
    for method in ("toeplitz", "hinf-grid", "roesser-sdp"):
        code, out = run(capsys, "lipschitz", path, "--method", method, "--trials", 10)
        assert code == 0
        gammas[method] = json.loads(out)["gamma"]
    assert gammas["toeplitz"] <= gammas["hinf-grid"] <= gammas["roesser-sdp"] + 1e-4


def test_hybrid_reports_qc_spectrum(capsys, tmp_path):
    path = tmp_path / "hybrid.json"
    save_network(random_network(np.random.default_rng(3), 6, [(3, 2)], [4]), path)
    code, out = run(capsys, "lipschitz", path, "--trials", 10)
    assert code == 0
    report = json.loads(out)
    assert report["kind"] == "hybrid"
    assert max(report["Q_C_eigenvalues"]) <= 1e-9


def test_simulate_diff(capsys, tmp_path):
    path = tmp_path / "net.json"
    save_network(random_network(np.random.default_rng(4), 9, [(3, 2), (5, 3)]), path)
    code, out = run(capsys, "simulate", path, "--seed", 1)
    assert code == 0
    report = json.loads(out)
    assert report["max_abs_diff"] <= 1e-10
    assert len(report["layers"]) == 2


def test_check_fresh_certificate(capsys, tmp_path):
    model = tmp_path / "net.json"
    cert = tmp_path / "cert.json"
    save_network(random_network(np.random.default_rng(5), 6, [(3, 2), (3, 1)]), model)
    code, _ = run(capsys, "lipschitz", model, "--cert", cert, "--trials", 10)
    assert code == 0
    code, out = run(capsys, "check", model, cert, "--trials", 10)
    assert code == 0
    assert json.loads(out)["validation"] == "pass"


def test_check_rejects_corrupted_certificate(capsys, tmp_path, single_tap):
    cert = tmp_path / "cert.json"
    assert run(capsys, "lipschitz", single_tap, "--cert", cert)[0] == 0
    doc = json.loads(cert.read_text())
    doc["gamma_sq"] *= 0.5
    doc["gamma"] = doc["gamma_sq"] ** 0.5
    cert.write_text(json.dumps(doc))
    code, out = run(capsys, "check", single_tap, cert, "--trials", 5)
    assert code == 3
    assert json.loads(out)["validation"] == "fail"


def test_seed_determinism(capsys, tmp_path):
    path = tmp_path / "net.json"
    save_network(random_network(np.random.default_rng(6), 6, [(3, 2), (3, 1)]), path)
    first = _drop_timing(json.loads(run(capsys, "lipschitz", path, "--seed", 3, "--trials", 10)[1]))
    second = _drop_timing(json.loads(run(capsys, "lipschitz", path, "--seed", 3, "--trials", 10)[1]))
    assert first == second


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "lipschitz")[0] == 1
    assert run(capsys, "bench-random", "--d1-list", "a,b")[0] == 1
    assert run(capsys, "realize", TINY, "--layer", 4)[0] == 1
    assert run(capsys, "lipschitz", tmp_path / "missing.json")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "lipschitz", bad)[0] == 2
    bad.write_text(json.dumps({"input": {"height": 4}}))
    assert run(capsys, "simulate", bad)[0] == 2


def test_output_file_and_csv(capsys, tmp_path, single_tap):
    out = tmp_path / "report.csv"
    code, text = run(capsys, "lipschitz", single_tap, "--out", "csv", "--output", out)
    assert code == 0 and text == ""
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert rows[0]["method"] == "roesser-sdp"
    assert float(rows[0]["gamma"]) == pytest.approx(2.5, abs=1e-6)
