import numpy as np
import pytest

from predamm.agent import AgentConfig, QNetwork
from predamm.neural import (
    LSTM,
    Adam,
    Conv1D,
    Dense,
    LastStep,
    LeakyReLU,
    Sequential,
    ShapeError,
    TimeMean,
    adam_update,
    glorot,
    grad_check,
    leaky_relu,
    load_checkpoint,
    lstm_step,
    save_checkpoint,
    sigmoid,
)


def test_leaky_relu_values():
    assert leaky_relu(2.0) == 2.0
    assert leaky_relu(-1.0) == pytest.approx(-0.01)
    assert leaky_relu(0.0) == 0.0


def test_leaky_relu_monotone_and_continuous():
    x = np.linspace(-3, 3, 10_001)
    y = leaky_relu(x)
    assert np.all(np.diff(y) > 0)
    assert abs(leaky_relu(1e-12) - leaky_relu(-1e-12)) < 1e-11


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_glorot_bounds():
    w = glorot(np.random.default_rng(0), 30, 20, (20, 30))
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_dense_zero_weights():
    layer = Dense(3, 4)
    layer.params["W"][...] = 0
    assert np.all(layer.forward(np.ones((2, 3))) == 0)


def test_dense_identity_passthrough():
    layer = Dense(3, 3)
    layer.params["W"][...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(layer.forward(x), x)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        Dense(3, 4).forward(np.ones((2, 5)))


def test_lstm_step_zero_weights():
    cell = LSTM(3, 4)
    for p in cell.params.values():
        p[...] = 0
    h, c = lstm_step(cell, np.ones(3), np.zeros(4), np.zeros(4))
    assert np.all(h == 0) and np.all(c == 0)
    c_prev = np.array([1.0, -2.0, 0.5, 4.0])
    _, c = lstm_step(cell, np.zeros(3), np.zeros(4), c_prev)
    assert np.allclose(c, 0.5 * c_prev, atol=0)


def test_lstm_step_matches_layer_forward(rng):
    cell = LSTM(3, 5, rng=rng)
    x = rng.normal(size=(1, 4, 3))
    hs = cell.forward(x)
    h, c = np.zeros(5), np.zeros(5)
    for t in range(4):
        h, c = lstm_step(cell, x[0, t], h, c)
        assert np.allclose(h, hs[0, t], atol=1e-15)


def test_lstm_step_shape_check():
    with pytest.raises(ShapeError):
        lstm_step(LSTM(3, 4), np.ones(2), np.zeros(4), np.zeros(4))


def test_conv_same_padding_length(rng):
    conv = Conv1D(3, filters=7, kernel=3, rng=rng)
    assert conv.forward(rng.normal(size=(2, 11, 3))).shape == (2, 11, 7)


def test_conv_matches_direct_sum(rng):
    conv = Conv1D(2, filters=3, kernel=3, rng=rng)
    conv.params["b"][...] = rng.normal(size=3)
    x = rng.normal(size=(1, 6, 2))
    xp = np.pad(x[0], ((1, 1), (0, 0)))
    direct = np.array([
        [sum(xp[t + k] @ conv.params["W"][k][:, f] for k in range(3)) + conv.params["b"][f] for f in range(3)]
        for t in range(6)
    ])
    assert np.allclose(conv.forward(x)[0], direct, atol=1e-14)


# -- gradient checks -------------------------------------------------------------

def _stack_cases(rng):
    return {
        "dense-4x3": (Dense(3, 4, rng=rng), rng.normal(size=(5, 3)), rng.normal(size=(5, 4))),
        "dense-leaky": (Dense(3, 4, "leaky-relu", rng), rng.normal(size=(5, 3)), rng.normal(size=(5, 4))),
        "leaky": (LeakyReLU(), rng.normal(size=(4, 6)), rng.normal(size=(4, 6))),
        "conv": (Conv1D(3, 5, 3, "leaky-relu", rng), rng.normal(size=(2, 7, 3)), rng.normal(size=(2, 7, 5))),
        "lstm": (Sequential([LSTM(3, 4, rng), LastStep()]), rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 4))),
        "lstm-dense": (
            Sequential([LSTM(3, 6, rng), LastStep(), Dense(6, 1, rng=rng)]),
            rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 1)),
        ),
        "time-mean": (Sequential([Conv1D(2, 4, 3, rng=rng), TimeMean()]),
                      rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 4))),
    }


@pytest.mark.parametrize("name", ["dense-4x3", "dense-leaky", "leaky", "conv", "lstm", "lstm-dense", "time-mean"])
def test_layer_gradients_on_ten_instances(name):
    for seed in range(10):
        model, x, target = _stack_cases(np.random.default_rng(seed))[name]
        if not model.params:
            # parameter-free layer: check the input gradient instead
            y = model.forward(x)
            dx = model.backward(y - target)
            num = np.zeros_like(x)
            for i in np.ndindex(x.shape):
                old = x[i]
                x[i] = old + 1e-5
                lp = 0.5 * np.sum((model.forward(x) - target) ** 2)
                x[i] = old - 1e-5
                lm = 0.5 * np.sum((model.forward(x) - target) ** 2)
                x[i] = old
                num[i] = (lp - lm) / 2e-5
            assert np.max(np.abs(dx - num) / np.maximum(np.abs(dx) + np.abs(num), 1e-8)) < 1e-4
            continue
        report = grad_check(model, x, target, tolerance=1e-4)
        assert report.passed, (name, seed, report.failing())


def test_linear_net_passes_tight_tolerance(rng):
    model = Sequential([Dense(4, 3, rng=rng), Dense(3, 2, rng=rng)])
    report = grad_check(model, rng.normal(size=(6, 4)), rng.normal(size=(6, 2)), tolerance=1e-6)
    assert report.passed, report.errors


def test_dueling_q_stack_gradients(rng):
    cfg = AgentConfig(filters=8, value_units=5, advantage_units=5)
    net = QNetwork(channels=4, config=cfg, rng=rng)
    report = grad_check(net, rng.normal(size=(3, 6, 4)), rng.normal(size=(3, 2)), max_coords=40, rng=rng)
    assert report.passed, report.failing()


def test_corrupted_gradient_fails(rng):
    class Broken(Dense):
        def backward(self, dy):
            out = super().backward(dy)
            self.grads["W"] = self.grads["W"] * 1.01
            return out

    report = grad_check(Broken(3, 2, rng=rng), rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
    assert not report.passed
    assert "W" in report.failing()


# -- Adam --------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    Adam().step(p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.2, 0.0])
    adam_update(Adam(lr=1e-3), p, {"w": g})
    # m_hat / sqrt(v_hat) = g / |g| on the first step
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p["w"], expected, rtol=1e-12, atol=1e-15)


def test_adam_opposite_gradients_shrink_second_step():
    opt = Adam(lr=1e-3)
    p = {"w": np.array([0.0])}
    opt.step(p, {"w": np.array([1.0])})
    first = p["w"][0]
    opt.step(p, {"w": np.array([-1.0])})
    second = p["w"][0] - first
    # two-step hand recursion of the moment buffers
    m = 0.9 * 0.1 - 0.1
    v = 0.999 * 0.001 + 0.001
    step = -1e-3 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert second == pytest.approx(step, rel=1e-12)
    assert abs(second) < abs(first)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_identical_seeds_identical_trajectories():
    def run(seed):
        rng = np.random.default_rng(seed)
        model = Sequential([Dense(3, 5, "leaky-relu", rng), Dense(5, 1, rng=rng)])
        opt = Adam()
        x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 1))
        for _ in range(20):
            out = model.forward(x)
            model.backward((out - y) / y.size)
            opt.step(model.params, model.grads)
        return np.concatenate([p.ravel() for p in model.params.values()])

    assert np.array_equal(run(4), run(4))


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array([1.5])}
    save_checkpoint(tmp_path / "x.npz", arrays, {"kind": "test", "n": 3})
    back, meta = load_checkpoint(tmp_path / "x.npz")
    assert meta == {"kind": "test", "n": 3}
    assert back.keys() == arrays.keys()
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    arrays = {"w": np.linspace(0, 1, 7)}
    save_checkpoint(tmp_path / "1.npz", arrays, {"k": 1})
    save_checkpoint(tmp_path / "2.npz", arrays, {"k": 1})
    assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()


def test_foreign_archive_rejected(tmp_path):
    np.savez(tmp_path / "plain.npz", w=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "plain.npz")
