import csv
import json

import numpy as np
import pytest

from teammmse import bench
from teammmse.bench import ExperimentSpec, cdf_table, emit_cdf, main, read_rows, run_experiment
from teammmse.duality import CouplingMatrices
from teammmse.errors import ConfigError
from teammmse.netgen import Config, Scenario


def _config(**kw):
    sc = Scenario.desk(num_users=3, pilot_len=2)
    return Config(sc, master_seed=kw.get("seed", 1), num_drops=kw.get("drops", 2), num_samples=kw.get("samples", 200))


def _write_config(path, **kw):
    path.write_text(json.dumps(_config(**kw).to_dict()))
    return path


def test_row_count(tmp_path):
    spec = ExperimentSpec(_config(), schemes=("multicell", "centralized"), out_dir=tmp_path)
    rows = run_experiment(spec)
    assert len(rows) == 2 * 3 * 2 * 3 == 36
    with open(tmp_path / "rates.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == bench.COLUMNS
    assert len(read_rows(tmp_path / "rates.csv")) == 36
    summary = json.loads((tmp_path / "summary.json").read_text())
    g = summary["groups"]["centralized/uatf"]
    assert g["n"] == 6 and g["p5"] <= g["mean"]
    assert (tmp_path / "cdf.csv").exists()


def test_rows_in_drop_order(tmp_path):
    rows = run_experiment(ExperimentSpec(_config(drops=3), schemes=("centralized",), out_dir=tmp_path))
    drops = [r[0] for r in rows]
    assert drops == sorted(drops)


def test_deterministic_bytes(tmp_path):
    outs = []
    for i, threads in enumerate((1, 1, 2)):
        d = tmp_path / str(i)
        run_experiment(ExperimentSpec(_config(), schemes=("local", "mixed"), out_dir=d, threads=threads))
        outs.append((d / "rates.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    d = tmp_path / "other"
    run_experiment(ExperimentSpec(_config(seed=2), schemes=("local", "mixed"), out_dir=d))
    assert (d / "rates.csv").read_bytes() != outs[0]


def test_cdf_examples():
    t = cdf_table([(0, 0, "a", "uatf", 3.0, 0.0)])
    vals, q = t[("a", "uatf")]
    assert vals.tolist() == [3.0] and q.tolist() == [0.5]
    t = cdf_table([(0, 0, "a", "uatf", 2.0, 0.0), (0, 1, "a", "uatf", 1.0, 0.0)])
    vals, q = t[("a", "uatf")]
    assert vals.tolist() == [1.0, 2.0] and q.tolist() == [0.25, 0.75]


def test_cdf_monotone(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(0, k, s, "coh", float(x), 0.0) for k, x in enumerate(rng.uniform(0, 3, 50)) for s in ("a", "b")]
    table = emit_cdf(rows, tmp_path / "cdf.csv")
    for vals, q in table.values():
        assert np.all(np.diff(vals) >= 0) and np.all(np.diff(q) > 0)
        assert q.min() > 0 and q.max() < 1


def test_spec_validation():
    with pytest.raises(ConfigError, match="schemes"):
        ExperimentSpec(_config(), schemes=("bogus",))
    with pytest.raises(ConfigError, match="bounds"):
        ExperimentSpec(_config(), bounds=("nope",))
    with pytest.raises(ConfigError, match="shared_aps"):
        ExperimentSpec(_config(), shared_aps=(9,))


def test_cli_run_and_cdf(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", drops=1)
    out = tmp_path / "out"
    assert main(["--out-dir", str(out), "--seed", "4", "run", str(cfg), "--schemes", "centralized,mixed",
                 "--bounds", "uatf", "--shared-aps", "0,1"]) == 0
    rows = read_rows(out / "rates.csv")
    assert len(rows) == 1 * 3 * 2 * 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["master_seed"] == 4
    cdf_out = tmp_path / "cdf"
    assert main(["--out-dir", str(cdf_out), "cdf", str(out / "rates.csv")]) == 0
    assert (cdf_out / "cdf.csv").read_text().startswith("scheme,bound,rate_bits_per_symbol,quantile")


def test_cli_maxmin_with_diagnostics(tmp_path):
    cfg = _write_config(tmp_path / "c.json", drops=1)
    out = tmp_path / "out"
    assert main(["--out-dir", str(out), "--diagnostics", "run", str(cfg), "--schemes", "centralized",
                 "--power", "maxmin"]) == 0
    traces = list((out / "diagnostics").glob("*.csv"))
    assert len(traces) == 1
    rows = [r for r in read_rows(out / "rates.csv") if r[3] == "uatf"]
    vals = np.array([r[4] for r in rows])
    assert vals.max() / vals.min() - 1 < 1e-4


def test_cli_config_error(tmp_path, capsys):
    doc = _config().to_dict()
    doc["num_users"] = "many"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["run", str(path)]) == 2
    assert "num_users" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_cli_duality(tmp_path, capsys):
    C = CouplingMatrices(np.ones(2), [[0.0, 0.1], [0.2, 0.0]], np.ones(2), np.ones(2))
    path = tmp_path / "c.json"
    path.write_text(C.to_json())
    assert main(["--out-dir", str(tmp_path / "o"), "duality-solve", str(path)]) == 0
    res = json.loads((tmp_path / "o" / "duality.json").read_text())
    np.testing.assert_allclose(res["p_dl"], [1.122449, 1.224490], atol=1e-6)
    bad = tmp_path / "bad.json"
    bad.write_text(C.with_targets(100.0).to_json())
    assert main(["duality-solve", str(bad)]) == 3


def test_cleanup_on_failure(tmp_path, monkeypatch):
    spec = ExperimentSpec(_config(), schemes=("centralized",), out_dir=tmp_path)
    real = bench.emit_cdf

    def boom(rows, path):
        real(rows, path)
        raise RuntimeError("disk full")

    monkeypatch.setattr(bench, "emit_cdf", boom)
    with pytest.raises(RuntimeError):
        run_experiment(spec)
    assert not any((tmp_path / n).exists() for n in ("rates.csv", "summary.json", "cdf.csv"))
