import numpy as np
import pytest

from predamm.market_data import PriceSeries, synth_sine
from predamm.neural import save_checkpoint
from predamm.predictor import (
    Predictor,
    PredictorConfig,
    build_dataset,
    equilibrium_target,
    make_window,
    train_supervised,
    write_curve_csv,
)

SMALL = PredictorConfig(window=20, hidden=16, horizon=5, epochs=30, batch=10, lr=1e-2, seed=0)


def constant_series(n=120, value=0.7):
    return PriceSeries(np.arange(n), np.full(n, value), np.zeros(n))


def test_window_exact_fit():
    s = synth_sine(50)
    w = make_window(s, None, 49)
    assert w.shape == (50, 3)
    assert np.array_equal(w[:, 0], s.v)
    assert np.all(w[:, 2] == 0)


def test_window_needs_history():
    with pytest.raises(ValueError):
        make_window(synth_sine(50), None, 48)


def test_window_reads_nudge_history():
    s = synth_sine(60)
    w = make_window(s, {55: 0.3, 9: 0.9}, 59)
    assert w[55 - 10, 2] == 0.3
    assert np.count_nonzero(w[:, 2]) == 1
    arr = np.zeros(60)
    arr[55] = 0.3
    assert np.array_equal(make_window(s, arr, 59), w)


def test_zero_weight_network_predicts_half():
    model = Predictor(PredictorConfig(window=10, hidden=4, horizon=2))
    for p in model.params.values():
        p[...] = 0
    assert model.predict(np.random.default_rng(0).normal(size=(10, 3))) == 0.5


def test_prediction_deterministic_and_bounded(rng):
    model = Predictor(PredictorConfig(window=10, hidden=8, horizon=2))
    window = rng.normal(size=(10, 3)) * 50
    assert model.predict(window) == model.predict(window.copy())
    assert 0 < model.predict(window) < 1


def test_zero_nudge_column_is_the_default():
    s = synth_sine(80)
    model = Predictor(PredictorConfig(window=20, hidden=8, horizon=2))
    assert model.predict(make_window(s, None, 70, 20)) == model.predict(make_window(s, np.zeros(80), 70, 20))


def test_equilibrium_target_is_identity_on_unit_curve():
    v = np.linspace(0.05, 0.95, 19)
    assert np.allclose(equilibrium_target(v), v, atol=1e-15)


def test_series_too_short():
    with pytest.raises(ValueError):
        build_dataset(synth_sine(24), SMALL)


def test_constant_series_learns_the_constant():
    model = Predictor(SMALL)
    history = train_supervised(model, constant_series(), SMALL)
    assert abs(model.predict(np.column_stack([np.full(20, 0.7), np.zeros(20), np.zeros(20)])) - 0.7) < 1e-2
    # a flat series has no volatility, so the expected-load floor is the same every epoch
    floors = {round(h.mean_expected_load, 15) for h in history}
    assert len(floors) == 1
    assert history[-1].objective - history[-1].mean_expected_load < 1e-2


def test_training_is_seed_deterministic():
    s = synth_sine(120)
    cfg = PredictorConfig(window=20, hidden=8, horizon=5, epochs=3, batch=16, seed=3)
    runs = []
    for _ in range(2):
        model = Predictor(cfg)
        train_supervised(model, s, cfg)
        runs.append(np.concatenate([p.ravel() for p in model.params.values()]))
    assert np.array_equal(runs[0], runs[1])


def test_resume_matches_uninterrupted(tmp_path):
    s = synth_sine(150)
    cfg = PredictorConfig(window=20, hidden=8, horizon=5, epochs=4, batch=16, seed=1)
    straight = Predictor(cfg)
    full = train_supervised(straight, s, cfg)

    part = Predictor(cfg)
    first = train_supervised(part, s, cfg, epochs=2)
    part.save(tmp_path / "p.npz")
    resumed = Predictor.load(tmp_path / "p.npz")
    rest = train_supervised(resumed, s, cfg)

    assert [h.mean_abs_err for h in first + rest] == [h.mean_abs_err for h in full]
    for k, p in straight.params.items():
        assert np.array_equal(p, resumed.params[k])


def test_checkpoint_kind_checked(tmp_path):
    save_checkpoint(tmp_path / "x.npz", {"w": np.zeros(1)}, {"kind": "agent"})
    with pytest.raises(ValueError):
        Predictor.load(tmp_path / "x.npz")


def test_curve_csv_header(tmp_path):
    model = Predictor(PredictorConfig(window=20, hidden=4, horizon=5, epochs=1, batch=32))
    history = train_supervised(model, synth_sine(80), model.config)
    write_curve_csv(tmp_path / "c.csv", history)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_abs_err,mean_expected_load,objective"
    assert len(lines) == 1 + len(history)


def test_config_validation():
    with pytest.raises(ValueError):
        PredictorConfig(window=3, horizon=5)
    with pytest.raises(ValueError):
        PredictorConfig(horizon=0)
