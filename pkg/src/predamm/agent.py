"""Event-driven environment and reward for a dueling double deep Q-network.

The agent decides, at every price event, whether to inject a gaussian input
``nudge`` into the forecaster's feature history or to leave it alone. The
reward is +1/0/-1 depending on whether the realised step loss (forecast
error plus expected load) falls below, on, or above a tolerance.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import asdict, dataclass
from enum import IntEnum

import numpy as np

from . import kernels
from .market_data import PriceSeries
from .neural import Adam, Conv1D, Dense, TimeMean, load_checkpoint, save_checkpoint
from .predictor import Predictor, equilibrium_target, expected_load_at, make_window, window_volatility
from .rebalance import ShiftedPool, accrue_shortfall, InventoryLedger, pseudo_arbitrage_shift

EQUALITY_BAND = 1e-12
STATE_CHANNELS = 9


class Action(IntEnum):
    INSERT_NUDGE = 0
    DO_NOTHING = 1


@dataclass(frozen=True)
class EventConfig:
    event_band: float = 1e-4

    def __post_init__(self):
        if not self.event_band > 0:
            raise ValueError("event_band must be positive")


@dataclass(frozen=True)
class RewardConfig:
    loss_threshold: float = 0.005
    gamma: float = 0.98

    def __post_init__(self):
        if not self.loss_threshold > 0 or not 0 < self.gamma < 1:
            raise ValueError("need loss_threshold > 0 and gamma in (0, 1)")


@dataclass(frozen=True)
class AgentConfig:
    dueling: bool = True
    filters: int = 100
    kernel: int = 3
    value_units: int = 50
    advantage_units: int = 50
    lr: float = 1e-3
    batch: int = 50
    replay_capacity: int = 10_000
    target_sync: int = 100
    learn_start: int = 50
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 5_000
    insert_mean: float = 0.0
    insert_std: float = 0.3
    episodes: int = 5
    seed: int = 0


def detect_event(values, t0, config: EventConfig = EventConfig()):
    """Steps until the value leaves the relative band around ``values[t0]``.

    Returns the smallest ``k >= 1`` with ``values[t0 + k]`` outside
    ``[v (1 - event_band), v (1 + event_band)]``, or ``None`` when the series ends
    first.
    """
    if isinstance(values, PriceSeries):
        values = values.v
    values = np.asarray(values, dtype=float)
    if not 0 <= t0 < values.size:
        raise IndexError(f"t0={t0} outside series of length {values.size}")
    k = kernels.scan_event(values, int(t0), float(config.event_band))
    return None if k < 0 else int(k)


def step_loss(fair_value, forecast, expected_load):
    return abs(float(fair_value) - float(forecast)) + float(expected_load)


def reward(cost, config: RewardConfig = RewardConfig()):
    if cost < 0:
        raise ValueError("step loss must be non-negative")
    if abs(cost - config.loss_threshold) <= EQUALITY_BAND:
        return 0
    return -1 if cost > config.loss_threshold else 1


def cumulative_reward(rewards, gamma):
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    r = np.asarray(rewards, dtype=float)
    return float(np.sum(gamma ** np.arange(r.size) * r))


def dueling_q(value, advantages):
    """Combine a state value ``(N, 1)`` and advantages ``(N, A)`` into Q-values."""
    value = np.asarray(value, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    return value + advantages - advantages.mean(axis=-1, keepdims=True)


class QNetwork:
    """Two conv layers, time-averaged trunk, then value/advantage streams.

    With ``dueling=False`` the streams are replaced by a single head that
    outputs both Q-values directly.
    """

    def __init__(self, channels=STATE_CHANNELS, config: AgentConfig = AgentConfig(), rng=None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.dueling = config.dueling
        f = config.filters
        self.parts = {
            "conv1": Conv1D(channels, f, config.kernel, "leaky-relu", rng),
            "conv2": Conv1D(f, f, config.kernel, "leaky-relu", rng),
        }
        self.pool = TimeMean()
        if self.dueling:
            self.parts["value1"] = Dense(f, config.value_units, "leaky-relu", rng)
            self.parts["value2"] = Dense(config.value_units, 1, rng=rng)
            self.parts["adv1"] = Dense(f, config.advantage_units, "leaky-relu", rng)
            self.parts["adv2"] = Dense(config.advantage_units, len(Action), rng=rng)
        else:
            self.parts["head1"] = Dense(f, config.advantage_units, "leaky-relu", rng)
            self.parts["head2"] = Dense(config.advantage_units, len(Action), rng=rng)

    @property
    def params(self):
        return {f"{n}.{k}": v for n, layer in self.parts.items() for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, layer in self.parts.items() for k, v in layer.grads.items()}

    def forward(self, states):
        p = self.parts
        trunk = self.pool.forward(p["conv2"].forward(p["conv1"].forward(states)))
        if not self.dueling:
            return p["head2"].forward(p["head1"].forward(trunk))
        value = p["value2"].forward(p["value1"].forward(trunk))
        adv = p["adv2"].forward(p["adv1"].forward(trunk))
        return dueling_q(value, adv)

    __call__ = forward

    def backward(self, dq):
        p = self.parts
        if self.dueling:
            dvalue = dq.sum(axis=1, keepdims=True)
            dadv = dq - dq.mean(axis=1, keepdims=True)
            dtrunk = p["value1"].backward(p["value2"].backward(dvalue))
            dtrunk = dtrunk + p["adv1"].backward(p["adv2"].backward(dadv))
        else:
            dtrunk = p["head1"].backward(p["head2"].backward(dq))
        return p["conv1"].backward(p["conv2"].backward(self.pool.backward(dtrunk)))

    def copy_from(self, other: "QNetwork"):
        for k, v in other.params.items():
            self.params[k][...] = v


def td_target(r, s_next, q_online, q_target, gamma, terminal=False):
    """Double-DQN target: online network picks the action, target network scores it."""
    r = np.asarray(r, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    if gamma == 0 or np.all(terminal):
        return r.copy() if r.ndim else float(r)
    single = np.ndim(r) == 0
    best = np.argmax(np.atleast_2d(q_online(s_next)), axis=1)
    scored = np.atleast_2d(q_target(s_next))[np.arange(best.size), best]
    y = np.atleast_1d(r) + gamma * np.where(np.atleast_1d(terminal), 0.0, scored)
    return float(y[0]) if single else y


@dataclass(frozen=True)
class NudgePolicy:
    insert_mean: float = 0.0
    insert_std: float = 0.3
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 5_000

    def exploration(self, step):
        frac = min(1.0, step / self.decay_steps) if self.decay_steps > 0 else 1.0
        return self.start + frac * (self.end - self.start)

    def sample_nudge(self, rng):
        """Gaussian draw truncated to the open interval (-1, 1) by rejection."""
        while True:
            e = rng.normal(self.insert_mean, self.insert_std)
            if -1.0 < e < 1.0:
                return float(e)


def select_action(q_net, state, exploration, rng, policy: NudgePolicy = NudgePolicy()):
    """Epsilon-greedy choice; returns ``(action, nudge_value or None)``."""
    if rng.random() < exploration:
        action = Action(int(rng.integers(len(Action))))
    else:
        q = np.asarray(q_net(np.asarray(state)[None]), dtype=float).reshape(-1)
        action = Action(int(np.argmax(q)))
    nudge_value = policy.sample_nudge(rng) if action is Action.INSERT_NUDGE else None
    return action, nudge_value


class ReplayBuffer:
    def __init__(self, capacity=10_000):
        self.capacity = capacity
        self.items = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, state, action, r, next_state, done):
        self.items.append((state, int(action), float(r), next_state, bool(done)))

    def sample(self, batch, rng):
        idx = rng.choice(len(self.items), size=batch, replace=len(self.items) < batch)
        s, a, r, s2, d = zip(*(self.items[i] for i in idx))
        return np.stack(s), np.array(a), np.array(r), np.stack(s2), np.array(d)


# -- tabular machinery --------------------------------------------------------

def _check_transitions(T):
    T = np.asarray(T, dtype=float)
    if T.ndim != 3 or np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, atol=1e-12):
        raise ValueError("transition tensor must be (S, A, S) with stochastic rows")
    return T


def bellman_apply(T, R, K, gamma):
    """``(BK)(s, a) = sum_s' T(s,a,s') [R(s,a,s') + gamma max_a' K(s', a')]``."""
    T = _check_transitions(T)
    R = np.broadcast_to(np.asarray(R, dtype=float), T.shape)
    best = np.asarray(K, dtype=float).max(axis=1)
    return np.einsum("ijk,ijk->ij", T, R + gamma * best[None, None, :])


def value_iteration(T, R, gamma, tol=1e-12, max_iter=100_000):
    K = np.zeros(np.asarray(T).shape[:2])
    for _ in range(max_iter):
        nxt = bellman_apply(T, R, K, gamma)
        if np.max(np.abs(nxt - K)) < tol:
            return nxt
        K = nxt
    raise RuntimeError("value iteration did not converge")


def q_learning_tabular(T, R, gamma, rng, alpha=0.5, sweeps=10_000, tol=1e-13):
    """Sampled Q-learning sweeping every (s, a) pair each round."""
    T = _check_transitions(T)
    R = np.broadcast_to(np.asarray(R, dtype=float), T.shape)
    S, A, _ = T.shape
    Q = np.zeros((S, A))
    for _ in range(sweeps):
        old = Q.copy()
        for s in range(S):
            for a in range(A):
                s2 = int(rng.choice(S, p=T[s, a]))
                Q[s, a] += alpha * (R[s, a, s2] + gamma * Q[s2].max() - Q[s, a])
        if np.max(np.abs(Q - old)) < tol:
            break
    return Q


# -- environments -------------------------------------------------------------

class ControlledEnvironment:
    """Random observations; INSERT_NUDGE always earns +1 and DO_NOTHING -1."""

    def __init__(self, length=50, window=50, channels=STATE_CHANNELS, seed=0):
        self.length, self.window, self.channels = length, window, channels
        self.rng = np.random.default_rng(seed)

    def _obs(self):
        return self.rng.normal(size=(self.window, self.channels))

    def reset(self):
        self.steps = 0
        return self._obs()

    def step(self, action, nudge_value=None):
        self.steps += 1
        r = 1 if action == Action.INSERT_NUDGE else -1
        done = self.steps >= self.length
        return self._obs(), r, done, {"event_offset": 1, "cost": 0.0 if r > 0 else 1.0}


class EventEnvironment:
    """Price-event replay around a frozen forecaster.

    Decisions happen only at price events. The step loss compares the
    forecast made at the event with the equilibrium valuation ``horizon``
    intervals later; the pool follows the valuation by pseudo-arbitrage so
    its inventory can be observed.
    """

    def __init__(self, series: PriceSeries, predictor: Predictor, c=1.0,
                 event_config=EventConfig(), reward_config=RewardConfig()):
        self.series = series
        self.predictor = predictor
        self.c = float(c)
        self.event_config = event_config
        self.reward_config = reward_config
        self.window = predictor.config.window
        self.horizon = predictor.config.horizon
        if len(series) < self.window + self.horizon + 1:
            raise ValueError("series too short for one window plus one event")

    def reset(self):
        self.nudge_history = np.zeros(len(self.series))
        self.t = self.window - 1
        self.last_loss = 0.0
        self.pool = ShiftedPool.at_valuation(self.c, float(self.series.v[self.t]))
        self.x0, self.y0 = self.pool.x, self.pool.y
        self.ledger = InventoryLedger()
        self.v_ref = float(self.series.v[self.t])
        return self._state()

    def _prediction(self):
        return self.predictor.predict(make_window(self.series, self.nudge_history, self.t, self.window))

    def _load(self, fair_value):
        lo = self.t - self.window + 1
        return expected_load_at(fair_value, window_volatility(self.series.v[lo: self.t + 1]), self.horizon)

    def _state(self):
        win = make_window(self.series, self.nudge_history, self.t, self.window)
        v_now = float(self.series.v[self.t])
        fair_value = float(equilibrium_target(v_now))
        scalars = [
            self._prediction(),
            fair_value,
            np.log10(self._load(fair_value) + 1e-12) / 12.0,
            self.last_loss,
            self.pool.x / self.x0,
            self.pool.y / self.y0,
        ]
        return np.concatenate([win, np.tile(scalars, (self.window, 1))], axis=1)

    def step(self, action, nudge_value=None):
        if action == Action.INSERT_NUDGE:
            self.nudge_history[self.t] = 0.0 if nudge_value is None else nudge_value
        forecast = self._prediction()
        fair_value = float(equilibrium_target(self.series.v[self.t + self.horizon]))
        cost = step_loss(fair_value, forecast, self._load(fair_value))
        r = reward(cost, self.reward_config)
        self.last_loss = cost
        k = detect_event(self.series.v, self.t, self.event_config)
        done = k is None or self.t + k + self.horizon >= len(self.series)
        if not done:
            self.t += k
            v_new = float(self.series.v[self.t])
            shift = pseudo_arbitrage_shift(self.pool.curve, self.v_ref, v_new)
            self.pool = ShiftedPool(self.pool.x, self.pool.y, shift.curve)
            self.ledger = accrue_shortfall(self.ledger, shift)
            self.v_ref = v_new
        info = {"event_offset": 0 if k is None else k, "cost": cost, "forecast": forecast, "fair_value": fair_value}
        return self._state(), r, done, info


class DDQNAgent:
    def __init__(self, config: AgentConfig = AgentConfig(), channels=STATE_CHANNELS, gamma=0.98):
        self.config = config
        self.gamma = gamma
        self.rng = np.random.default_rng(config.seed)
        self.online = QNetwork(channels, config, np.random.default_rng([config.seed, 1]))
        self.target = QNetwork(channels, config, np.random.default_rng([config.seed, 1]))
        self.target.copy_from(self.online)
        self.adam = Adam(lr=config.lr)
        self.replay = ReplayBuffer(config.replay_capacity)
        self.policy = NudgePolicy(config.insert_mean, config.insert_std, config.eps_start,
                                          config.eps_end, config.eps_decay_steps)
        self.steps = 0
        self.updates = 0

    def act(self, state, greedy=False):
        explore = 0.0 if greedy else self.policy.exploration(self.steps)
        return select_action(self.online, state, explore, self.rng, self.policy)

    def greedy_action(self, state):
        return Action(int(np.argmax(self.online(np.asarray(state)[None])[0])))

    def observe(self, state, action, r, next_state, done):
        self.replay.add(state, action, r, next_state, done)
        self.steps += 1
        if len(self.replay) >= max(self.config.learn_start, 1):
            return self.update()
        return None

    def update(self):
        s, a, r, s2, d = self.replay.sample(self.config.batch, self.rng)
        y = td_target(r, s2, self.online, self.target, self.gamma, d)
        q = self.online(s)
        err = q[np.arange(a.size), a] - y
        dq = np.zeros_like(q)
        dq[np.arange(a.size), a] = err / a.size
        self.online.backward(dq)
        self.adam.step(self.online.params, self.online.grads)
        self.updates += 1
        if self.updates % self.config.target_sync == 0:
            self.target.copy_from(self.online)
        return 0.5 * float(np.mean(err * err))

    def save(self, path):
        arrays = {f"online.{k}": v for k, v in self.online.params.items()}
        arrays.update({f"target.{k}": v for k, v in self.target.params.items()})
        meta = {"kind": "agent", "config": asdict(self.config), "gamma": self.gamma,
                "steps": self.steps, "updates": self.updates}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "agent":
            raise ValueError(f"{path} is not an agent checkpoint")
        agent = cls(AgentConfig(**meta["config"]), gamma=meta["gamma"])
        for k, p in agent.online.params.items():
            p[...] = arrays[f"online.{k}"]
        for k, p in agent.target.params.items():
            p[...] = arrays[f"target.{k}"]
        agent.steps, agent.updates = int(meta["steps"]), int(meta["updates"])
        return agent


@dataclass(frozen=True)
class StepRecord:
    episode: int
    event_offset: int
    cost: float
    reward: int
    cum_reward: float
    action: str
    nudge_value: float


def train_agent(env, agent: DDQNAgent, episodes, max_updates=None):
    """Run ``episodes`` episodes, learning online; returns one record per decision."""
    records = []
    for ep in range(episodes):
        state = env.reset()
        done = False
        discount, running = 1.0, 0.0
        while not done:
            action, nudge_value = agent.act(state)
            nxt, r, done, info = env.step(action, nudge_value)
            agent.observe(state, action, r, nxt, done)
            running += discount * r
            discount *= agent.gamma
            records.append(StepRecord(ep, int(info["event_offset"]), float(info["cost"]), int(r), running,
                                      action.name, 0.0 if nudge_value is None else nudge_value))
            state = nxt
            if max_updates is not None and agent.updates >= max_updates:
                return records
    return records


def write_episode_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "event_offset", "cost", "reward", "cum_reward", "action", "nudge_value"])
        for rec in records:
            w.writerow([rec.episode, rec.event_offset, repr(rec.cost), rec.reward, repr(rec.cum_reward),
                        rec.action, repr(rec.nudge_value)])
