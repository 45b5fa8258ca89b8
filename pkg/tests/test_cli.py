import csv
import math

import numpy as np
import pytest

from msat import experiments
from msat.analytics import knee_gamma, tau_star
from msat.cli import main
from msat.config import ExperimentConfig, dump_config, load_config
from msat.policies import PolicyConfig
from msat.simulator import TRACE_CSV_HEADER, run

import oracles

SMALL = ["--horizon", "20000", "--replications", "2", "--set", "bootstrap=100", "--set", "burn_in=500"]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# configuration

def test_defaults_match_channel_values():
    cfg = ExperimentConfig()
    assert cfg.channel.n_channels == 2 and cfg.channel.lam == pytest.approx(1 / 3)
    assert cfg.resolved_theta == -0.08


def test_config_file_then_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[channel]\nn = 3\nlambda = 1/4\n[experiment]\ngammas = 0.01, 0.02\nseed = 9\n"
                   "[effective_bandwidth]\ntheta = -0.5\n")
    cfg = load_config(str(ini), "paper-fig2b", {"experiment.seed": "11", "mu": "0.75"})
    assert cfg.n_channels == 3 and cfg.lam == 0.25 and cfg.mu == 0.75
    assert cfg.gammas == (0.01, 0.02) and cfg.seed == 11
    assert cfg.policy == "ms-mt" and cfg.theta == -0.5
    # dump and reload is lossless
    again = tmp_path / "again.ini"
    again.write_text(dump_config(cfg))
    assert load_config(str(again)) == cfg


def test_qos_pair_sets_theta():
    cfg = load_config(overrides={"epsilon": "1e-3", "buffer_b": "100"})
    assert cfg.resolved_theta == pytest.approx(math.log(1e-3) / 100)


@pytest.mark.parametrize("overrides", [{"gammas": ""}, {"theta": "0.1"}, {"policy": "x"}, {"nope": "1"},
                                       {"horizon": "10", "burn_in": "100"}, {"lam": "-1"}])
def test_bad_configs_are_rejected(overrides):
    with pytest.raises((ValueError, KeyError)):
        load_config(overrides=overrides)


def test_show_config(capsys):
    assert main(["show-config", "--preset", "paper-fig3", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "policy = ms-at" in out and "gammas = 0.03" in out and "seed = 4" in out


def test_empty_grid_exit_code(capsys):
    assert main(["sweep", "--gammas", ""]) == 2
    assert "gamma grid is empty" in capsys.readouterr().err


def test_missing_config_file_exit_code(tmp_path):
    assert main(["show-config", "--config", str(tmp_path / "missing.ini")]) == 2


# ---------------------------------------------------------------------------
# sweep

def test_sweep_writes_outputs_and_is_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        rc = main(["sweep", "--gammas", "0.01,0.2", "--out", str(d), "--seed", "3"] + SMALL)
        assert rc == 0
        outs.append(d)
    a, b = outs
    lines = (a / "summary.csv").read_text().splitlines()
    assert lines[0] == ",".join(experiments.SUMMARY_HEADER)
    assert len(lines) == 3
    for name in ("summary.csv", "points.csv", "traces/point_00.csv", "traces/point_01.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "traces/point_00.csv").read_text().splitlines()[0] == ",".join(TRACE_CSV_HEADER)
    assert "[experiment]" in (a / "config.ini").read_text()
    rows = _read_csv(a / "summary.csv")
    assert float(rows[0]["tau"]) == pytest.approx(oracles.tau_star(0.01, 2, 1 / 3, 1 / 2, 0.25), rel=1e-12)
    assert float(rows[0]["eb_closed"]) == pytest.approx(float(rows[0]["tau"]), rel=1e-12)
    assert rows[0]["feasible"] in ("0", "1")


def test_sweep_point_closed_vs_sim():
    cfg = ExperimentConfig(gammas=(0.01,), horizon=200_000, replications=3, bootstrap=100)
    res = experiments.run_sweep(cfg)
    p = res.points[0]
    assert p.error is None
    assert p.eb_sim == pytest.approx(p.eb_closed, rel=0.02)
    assert p.th_sim == pytest.approx(p.eb_closed, rel=0.02)
    assert p.feasible


def test_mt_is_below_at_at_equal_gamma():
    gamma = 0.02
    base = dict(gammas=(gamma,), horizon=200_000, replications=3, bootstrap=100, calibration_horizon=100_000)
    at = experiments.run_sweep(ExperimentConfig(policy="ms-at", **base)).points[0]
    mt = experiments.run_sweep(ExperimentConfig(policy="ms-mt", **base)).points[0]
    assert 0 < mt.p_tx < 1
    assert mt.eb_sim < at.eb_sim
    assert mt.eb_sim < mt.th_sim  # random transmission hurts the tail more than the mean


def test_at_inf_sweep_uses_loose_closed_forms():
    cfg = ExperimentConfig(policy="ms-at-inf", gammas=(0.3,), horizon=50_000, replications=2, bootstrap=50)
    p = experiments.run_sweep(cfg).points[0]
    assert math.isinf(p.tau)
    assert p.th_closed == pytest.approx(oracles.ms_inf_throughput(2, 1 / 3, 1 / 2, 0.25), abs=1e-12)


def test_failed_point_is_recorded(tmp_path, capsys):
    # an explicit block length longer than the run makes the estimator fail at that point
    rc = main(["sweep", "--gammas", "0.05", "--out", str(tmp_path), "--horizon", "5000", "--replications", "1",
               "--set", "eb_block_len=100000", "--set", "burn_in=0"])
    assert rc == 1
    assert "FAILED" in capsys.readouterr().out
    rows = _read_csv(tmp_path / "points.csv")
    assert rows[0]["error"]


def test_parallel_sweep_matches_serial():
    base = dict(gammas=(0.01, 0.05), horizon=20_000, replications=2, bootstrap=50, burn_in=100)
    serial = experiments.run_sweep(ExperimentConfig(**base))
    par = experiments.run_sweep(ExperimentConfig(workers=2, **base))
    for a, b in zip(serial.points, par.points):
        assert a.row() == b.row()


# ---------------------------------------------------------------------------
# debt histogram

def test_debt_histogram(tmp_path):
    cfg = ExperimentConfig(gammas=(0.0, 0.03, 10.0), horizon=100_000, burn_in=0, calibration_horizon=50_000)
    hists = {(h.gamma, h.policy): h for h in experiments.run_debt_histogram(cfg, str(tmp_path))}
    # gamma = 0: no transmissions, debt centred at zero
    assert hists[(0.0, "ms-at")].centered_min == hists[(0.0, "ms-at")].centered_max == 0.0
    at = hists[(0.03, "ms-at")]
    tau = at.tau
    assert at.centered_max < 1.0 + 1e-9
    assert at.centered_min > -20
    # MT at the same collision level falls behind the AT target
    assert hists[(0.03, "ms-mt")].centered_min < at.centered_min
    # a loose level sends both policies to the always-transmit limit
    np.testing.assert_array_equal(hists[(10.0, "ms-at")].counts, hists[(10.0, "ms-mt")].counts)
    rows = _read_csv(tmp_path / "debt_hist.csv")
    assert set(rows[0]) == set(experiments.HIST_HEADER)
    total = sum(float(r["fraction"]) for r in rows if r["gamma"] == "0.03" and r["policy"] == "ms-at")
    assert total == pytest.approx(1.0)
    assert tau == pytest.approx(tau_star(0.03, cfg.channel))


def test_centered_debt_balance_side():
    tau = 0.3
    tr = run(PolicyConfig.at(tau), ExperimentConfig().channel, 200_000, 5)
    d = experiments.centered_debt(tr, tau)
    assert d.max() < 1.0
    # busy stretches put the debt behind, but it keeps returning to the target
    half = len(d) // 2
    assert d[:half].min() > -40 and d[half:].min() > -40
    assert (d[half:] > -tau).mean() > 0.5


def test_debt_histogram_cli(tmp_path, capsys):
    rc = main(["debt-hist", "--gammas", "0.03", "--out", str(tmp_path), "--horizon", "20000",
               "--set", "calibration_horizon=20000"])
    assert rc == 0
    assert (tmp_path / "debt_hist.csv").exists()
    assert "ms-mt" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# verification suite

VERIFY_SMALL = ["--horizon", "200000", "--replications", "3", "--set", "bootstrap=100", "--gammas", "0.01,0.05"]


def test_verify_passes(tmp_path, capsys):
    rc = main(["verify", "--out", str(tmp_path)] + VERIFY_SMALL)
    out = capsys.readouterr().out
    assert rc == 0, out
    assert "all checks passed" in out
    rows = _read_csv(tmp_path / "verify_report.csv")
    names = {r["check"] for r in rows}
    assert {"interval-bounds", "coupling", "feasibility", "dp-myopic", "spectral-dense-eig",
            "eb-ms-inf-vs-success-kernel", "queue-decay", "supremum-bound"} <= names
    assert any(r["status"] == "info" for r in rows)
    dp = _read_csv(tmp_path / "dp_report.csv")
    assert all(int(r["violations"]) == 0 for r in dp)


def test_verify_inject_fault_fails(tmp_path, capsys):
    rc = main(["verify", "--inject-fault", "--out", str(tmp_path), "--skip", "spectral", "--skip", "dp-myopic",
               "--skip", "feasibility", "--skip", "supremum-bound", "--skip", "coupling"] + VERIFY_SMALL)
    out = capsys.readouterr().out
    assert rc == 1
    assert "[FAIL] interval-bounds" in out


def test_verify_single_channel(tmp_path):
    cfg = ExperimentConfig(n_channels=1, gammas=(0.02,), horizon=1_000_000, replications=1, bootstrap=100)
    rep = experiments.run_verifications(cfg, str(tmp_path), skip=("coupling",))
    assert rep.ok, "\n".join(rep.lines())


def test_knee_matches_oracle():
    cfg = ExperimentConfig()
    closed = experiments.closed_forms(cfg, [0.0])[0]
    assert knee_gamma(closed.eb_loose, cfg.channel) == pytest.approx(0.06654847844695215, rel=1e-9)
