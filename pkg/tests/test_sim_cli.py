import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from predamm import sim
from predamm.cli import main
from predamm.market_data import PriceSeries, synth_gbm


def write_config(path, body):
    path.write_text(yaml.safe_dump(body, sort_keys=False), encoding="utf-8")
    return path


def gbm_config(tmp_path, n=1500, **extra):
    body = {"version": 1, "seed": 7, "data": {"source": "synth_gbm", "n": n}, "liquidity": {"lead": 0}}
    body.update(extra)
    return write_config(tmp_path / "gbm.yaml", body)


def csv_config(tmp_path, data_path, **data):
    return write_config(tmp_path / "csv.yaml", {"data": {"source": "csv", "path": str(data_path), **data}})


def run_cli(*argv):
    return main([str(a) for a in argv])


def independent_report(events_csv):
    with open(events_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))

    def total(name):
        return sum(float(r[name]) for r in rows if r[name] != "")

    def mean(name):
        vals = [float(r[name]) for r in rows if r[name] != ""]
        return sum(vals) / len(vals) if vals else 0.0

    cap = total("active_capital")
    return {
        "events": len(rows),
        "rebalances": int(total("rebalanced")),
        "cum_divergence_off": total("div_loss_off"),
        "cum_divergence_on": total("div_loss_on"),
        "cum_slippage": total("slippage"),
        "mean_prediction_slippage": mean("pred_slippage"),
        "mean_expected_load": mean("expected_load"),
        "fees_accrued": total("fee_accrued"),
        "fees_distributed": total("fee_distributed"),
        "fees_carried": total("fee_carried"),
        "capital_efficiency": total("fee_active") / cap if cap > 0 else 0.0,
        "mean_center_error": mean("center_error"),
    }


# -- replay ---------------------------------------------------------------------------

def test_constant_series_has_no_events_or_losses(tmp_path, capsys):
    data = tmp_path / "flat.csv"
    PriceSeries(np.arange(300), np.full(300, 0.4), np.zeros(300)).to_csv(data)
    assert run_cli("replay", "--config", csv_config(tmp_path, data), "--out", tmp_path / "run") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["events"] == 0
    assert out["cum_divergence_off"] == out["cum_divergence_on"] == out["cum_slippage"] == 0.0


def test_gbm_replay_on_beats_off_and_is_reproducible(tmp_path, capsys):
    cfg = gbm_config(tmp_path)
    assert run_cli("replay", "--config", cfg, "--out", tmp_path / "a") == 0
    first = json.loads(capsys.readouterr().out)
    assert run_cli("replay", "--config", cfg, "--out", tmp_path / "b") == 0
    assert first["events"] > 100
    assert first["cum_divergence_on"] < first["cum_divergence_off"]
    for name in ("events.csv", "predictions.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_the_series(tmp_path):
    cfg = gbm_config(tmp_path, n=400)
    run_cli("replay", "--config", cfg, "--out", tmp_path / "a")
    run_cli("replay", "--config", cfg, "--seed", 8, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "b" / "events.csv").read_bytes()
    assert yaml.safe_load((tmp_path / "b" / "config.yaml").read_text())["seed"] == 8


def test_report_rederived_from_csv(tmp_path, capsys):
    cfg = gbm_config(tmp_path, n=800)
    run_cli("replay", "--config", cfg, "--out", tmp_path / "run")
    replay_out = json.loads(capsys.readouterr().out)
    assert run_cli("report", tmp_path / "run") == 0
    reported = json.loads(capsys.readouterr().out)
    expected = independent_report(tmp_path / "run" / "events.csv")
    assert reported.keys() == expected.keys()
    for key, value in expected.items():
        assert reported[key] == pytest.approx(value, rel=1e-12, abs=1e-300), key
        assert replay_out[key] == reported[key], key


def test_fee_conservation_per_event(tmp_path):
    cfg = sim.load_config(gbm_config(tmp_path, n=1000), out=tmp_path / "run")
    rep = sim.run_replay(cfg)
    assert abs(rep.fees_distributed + rep.fees_carried - rep.fees_accrued) <= 1e-9
    for row in sim.read_event_csv(tmp_path / "run" / "events.csv"):
        assert abs(row["fee_distributed"] + row["fee_carried"] - row["fee_accrued"]) <= 1e-9


def test_report_metrics_finite_and_non_negative(tmp_path):
    rep = sim.run_replay(sim.load_config(gbm_config(tmp_path, n=600), out=tmp_path / "run"))
    for value in vars(rep).values():
        assert np.isfinite(value) and value >= 0


def test_price_column_matches_normalised_input(tmp_path):
    s = synth_gbm(3, 400)
    prices = s.v / (1 - s.v)
    with open(tmp_path / "prices.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "price", "signal"])
        for t, p, signal in zip(s.t, prices, s.signal):
            w.writerow([int(t), repr(float(p)), repr(float(signal))])
    s.to_csv(tmp_path / "v.csv")
    assert run_cli("replay", "--config", csv_config(tmp_path, tmp_path / "prices.csv"),
                   "--price-column", "--out", tmp_path / "p") == 0
    assert run_cli("replay", "--config", csv_config(tmp_path, tmp_path / "v.csv"), "--out", tmp_path / "v") == 0
    ours = sim.report(tmp_path / "p")
    ref = sim.report(tmp_path / "v")
    assert ours.events == ref.events
    assert ours.cum_divergence_off == pytest.approx(ref.cum_divergence_off, rel=1e-9)


# -- configuration errors ----------------------------------------------------------

@pytest.mark.parametrize("body,needle", [
    ({"seed": 1, "pool": {"cc": 1}}, "pool.cc"),
    ({"data": {"source": "synth_gbm"}}, "seed is required"),
    ({"version": 2, "seed": 1}, "version"),
    ({"seed": 1, "data": {"source": "csv"}}, "data.path"),
    ({"seed": 1, "liquidity": {"sigma": "wide"}}, "liquidity.sigma"),
    ({"seed": 1, "predictor": {"window": 3}}, "window"),
    ({"seed": 1, "agent": {"environment": "casino"}}, "agent.environment"),
])
def test_invalid_config_exits_one(tmp_path, capsys, body, needle):
    cfg = write_config(tmp_path / "bad.yaml", body)
    assert run_cli("replay", "--config", cfg, "--out", tmp_path / "run") == 1
    assert needle in capsys.readouterr().err


def test_exponent_literals_parse_as_numbers(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nevents:\n  event_band: 1e-4\npredictor:\n  lr: 5e-3\n", encoding="utf-8")
    loaded = sim.load_config(cfg)
    assert loaded.events.event_band == 1e-4 and loaded.predictor.lr == 5e-3


def test_missing_config_and_data_files(tmp_path):
    assert run_cli("replay", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "r") == 1
    assert run_cli("replay", "--config", csv_config(tmp_path, tmp_path / "nope.csv"), "--out", tmp_path / "r") == 1


def test_default_config_round_trips(tmp_path):
    path = tmp_path / "default.yaml"
    path.write_text(sim.default_config_yaml(seed=5), encoding="utf-8")
    assert sim.load_config(path) == sim.SimConfig(seed=5)


# -- training pipelines ------------------------------------------------------------

def sine_training_config(tmp_path, name, epochs, mae=1.0):
    return write_config(tmp_path / f"{name}.yaml", {
        "seed": 2,
        "data": {"source": "synth_sine", "n": 200},
        "predictor": {"window": 20, "hidden": 8, "epochs": epochs, "batch": 16, "lr": 5e-3},
        "checks": {"predictor_mae": mae},
    })


def test_train_predictor_convergence_failure_exits_two(tmp_path, capsys):
    cfg = sine_training_config(tmp_path, "strict", epochs=1, mae=1e-9)
    assert run_cli("train-predictor", "--config", cfg, "--out", tmp_path / "run") == 2
    assert "convergence" in capsys.readouterr().err
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["check_passed"] is False
    assert (tmp_path / "run" / "predictor.npz").is_file()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    assert run_cli("train-predictor", "--config", sine_training_config(tmp_path, "full", 4),
                   "--out", tmp_path / "straight") == 0
    assert run_cli("train-predictor", "--config", sine_training_config(tmp_path, "half", 2),
                   "--out", tmp_path / "split") == 0
    assert run_cli("train-predictor", "--config", sine_training_config(tmp_path, "full", 4),
                   "--out", tmp_path / "split", "--checkpoint", tmp_path / "split" / "predictor.npz") == 0
    for name in ("predictor_curve.csv", "predictor.npz"):
        assert (tmp_path / "straight" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()


def test_resume_rejects_different_architecture(tmp_path):
    run_cli("train-predictor", "--config", sine_training_config(tmp_path, "a", 1), "--out", tmp_path / "a")
    other = write_config(tmp_path / "b.yaml", {"seed": 2, "data": {"source": "synth_sine", "n": 200},
                                               "predictor": {"window": 20, "hidden": 4, "epochs": 2}})
    assert run_cli("train-predictor", "--config", other, "--out", tmp_path / "b",
                   "--checkpoint", tmp_path / "a" / "predictor.npz") == 1


def test_train_agent_controlled_environment(tmp_path, capsys):
    cfg = write_config(tmp_path / "agent.yaml", {
        "seed": 0,
        "predictor": {"window": 20},
        "agent": {"environment": "controlled", "episodes": 20, "max_updates": 300, "filters": 8,
                  "value_units": 8, "advantage_units": 8, "batch": 16, "learn_start": 16, "target_sync": 20},
    })
    assert run_cli("train-agent", "--config", cfg, "--out", tmp_path / "run") == 0
    assert json.loads(capsys.readouterr().out)["updates"] == 300
    header = (tmp_path / "run" / "episodes.csv").read_text().splitlines()[0]
    assert header == "episode,event_offset,cost,reward,cum_reward,action,nudge_value"
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["check_passed"] is True


def test_train_agent_on_events_needs_a_predictor(tmp_path, capsys):
    cfg = write_config(tmp_path / "agent.yaml", {"seed": 0, "data": {"source": "synth_sine", "n": 200}})
    assert run_cli("train-agent", "--config", cfg, "--out", tmp_path / "run") == 1
    assert "checkpoint" in capsys.readouterr().err


# -- evaluation ---------------------------------------------------------------------

def test_zero_lead_gives_identical_regimes(tmp_path):
    cfg = write_config(tmp_path / "eval.yaml", {"seed": 0, "data": {"source": "synth_sine", "n": 600},
                                                 "liquidity": {"lead": 0}})
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "run") == 0
    run = tmp_path / "run"
    assert (run / "events_predictive.csv").read_bytes() == (run / "events_lookback.csv").read_bytes()
    ev = sim.run_evaluate(sim.load_config(cfg, out=tmp_path / "again"))
    assert ev.predictive == ev.lookback
    assert ev.center_error_ratio == 1.0


def test_evaluate_requires_checkpoint_for_positive_lead(tmp_path, capsys):
    cfg = write_config(tmp_path / "eval.yaml", {"seed": 0, "data": {"source": "synth_sine", "n": 300}})
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "run") == 1
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "run",
                   "--checkpoint", tmp_path / "missing.npz") == 1


def test_evaluate_rejects_mismatched_lead(tmp_path):
    run_cli("train-predictor", "--config", sine_training_config(tmp_path, "p", 1), "--out", tmp_path / "p")
    cfg = write_config(tmp_path / "eval.yaml", {"seed": 0, "data": {"source": "synth_sine", "n": 300},
                                                 "predictor": {"window": 20, "hidden": 8},
                                                 "liquidity": {"lead": 3}})
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "e",
                   "--checkpoint", tmp_path / "p" / "predictor.npz") == 1


def test_console_entry_point_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "predamm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("replay", "train-predictor", "train-agent", "evaluate", "report"):
        assert command in out.stdout
