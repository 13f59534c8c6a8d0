import csv
import json

import pytest
from pydantic import ValidationError

from renyi_qkd import cli
from renyi_qkd.cli import COLUMNS, main, run_scan, run_single
from renyi_qkd.config import RunConfig, load_config, parse_alpha_grid
from renyi_qkd.optimizer import InfeasibleSetError, SolverFailure

FAST = {"alpha_grid": "log:1.001:2:6"}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_rejections():
    with pytest.raises(ValidationError):
        RunConfig(alpha=0.9)
    with pytest.raises(ValidationError):
        RunConfig(alpah=1.5)
    with pytest.raises(ValidationError):
        RunConfig(N=1.5e5 + 0.5)
    with pytest.raises(ValidationError):
        RunConfig(loss=1.0)
    with pytest.raises(ValidationError):
        RunConfig(alpha_grid="lin:1:2:3")
    with pytest.raises(ValidationError):
        RunConfig(protocol="b92")
    with pytest.raises(ValidationError):
        RunConfig(p_gen=1.0)


def test_config_coercions(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("N: 1.0e+5\nalpha: '1.25'\ndepol_p: 0.02\n")
    cfg = RunConfig(**load_config(path))
    assert cfg.N == 100_000 and isinstance(cfg.N, int)
    assert cfg.alpha == 1.25
    assert RunConfig(N="1e6").N == 10**6
    grid = parse_alpha_grid("log:1.001:2:5")
    assert len(grid) == 5 and grid[0] == pytest.approx(1.001) and grid[-1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        parse_alpha_grid([1.5, 0.9])


def test_run_single_noiseless_positive():
    res = run_single(RunConfig(depol_p=0.0, loss=0.0, alpha=1.5, N=10**6))
    assert res.status == "converged" and res.exit_code == 0
    assert res.report.key_rate > 0


def test_run_single_beyond_threshold():
    res = run_single(RunConfig(depol_p=0.25, alpha=1.5, N=10**6))
    assert res.status == "zero_rate" and res.exit_code == 2
    assert res.report.key_rate == 0.0


def test_main_exit_codes(tmp_path):
    assert main(["run", "--alpha", "0.9"]) == 1
    assert main(["run", "--bogus", "1"]) == 1
    assert main(["scan", "--axis", "loss", "--values", "1.5", "--alpha", "1.5"]) == 1
    out = tmp_path / "r.csv"
    assert main(["run", "--depol_p", "0.25", "--alpha", "1.5", "--N", "1e6", "--output_path", str(out)]) == 2
    rows = read_csv(out)
    assert rows[0]["status"] == "zero_rate"


def test_run_appends_rows_and_log(tmp_path):
    out = tmp_path / "r.csv"
    args = ["run", "--alpha", "1.2", "--N", "1e6", "--output-path", str(out)]
    assert main(args) == 0
    assert main(args) == 0
    rows = read_csv(out)
    assert len(rows) == 2 and list(rows[0]) == list(COLUMNS)
    entries = [json.loads(line) for line in (tmp_path / "r.log.jsonl").read_text().splitlines()]
    events = {e["event"] for e in entries}
    assert {"config", "fw_iter", "certificate", "alpha_point", "result"} <= events


def test_rerun_identical_csv(tmp_path):
    paths = []
    for i in range(2):
        out = tmp_path / f"s{i}.csv"
        code = main(["scan", "--axis", "blocksize", "--values", "1e5", "1e6",
                     "--alpha_grid", FAST["alpha_grid"], "--output_path", str(out)])
        assert code == 0
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_scan_order_and_workers():
    cfg = RunConfig(alpha=1.1, N=10**6)
    values = [0.3, 0.0, 0.1]
    serial = run_scan(cfg, "loss", values, workers=1)
    parallel = run_scan(cfg, "loss", values, workers=2)
    assert [r.config.loss for r in serial] == values
    assert [r.csv_row() for r in serial] == [r.csv_row() for r in parallel]


def test_workers_from_env(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli._workers() == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "x")
    with pytest.raises(ValueError):
        cli._workers()


def test_failures_recorded_in_row(monkeypatch):
    real = cli.key_rate_at

    def flaky(inst, fp, sp, alpha, settings, run_log):
        if inst.meta["loss"] == 0.2:
            raise SolverFailure("synthetic failure", "solver_error")
        if inst.meta["loss"] == 0.4:
            raise InfeasibleSetError("synthetic infeasibility", ["pe"])
        return real(inst, fp, sp, alpha, settings, run_log)

    monkeypatch.setattr(cli, "key_rate_at", flaky)
    results = run_scan(RunConfig(alpha=1.1, N=10**6), "loss", [0.0, 0.2, 0.4], workers=1)
    assert [r.status for r in results] == ["converged", "solver_failure", "infeasible"]
    assert [r.exit_code for r in results] == [0, 4, 3]
    row = results[2].csv_row()
    assert row["status"] == "infeasible" and row["key_rate"] == "" and row["loss"] == 0.4
    assert "pe" in results[2].reason


def test_alpha_scan_mode():
    res = run_single(RunConfig(N=10**5, **FAST))
    assert res.status == "converged"
    assert res.report.alpha in parse_alpha_grid(FAST["alpha_grid"])
    points = [e for e in res.log if e["event"] == "alpha_point"]
    assert len(points) == 6
    assert res.report.key_rate == max(p["key_rate"] for p in points)
