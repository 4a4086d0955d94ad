"""Config loading and the replay / train / evaluate pipelines.

Every run writes into one directory: the resolved config, per-event CSVs,
checkpoints and a ``summary.json``. Nothing time-dependent is written, so a
repeated run with the same config and seed is byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .agent import (
    Action,
    AgentConfig,
    ControlledEnvironment,
    DDQNAgent,
    EventConfig,
    EventEnvironment,
    RewardConfig,
    detect_event,
    train_agent,
    write_episode_csv,
)
from .amm import BondingCurve, X, swap
from .liquidity import IncentiveSchedule, allocate_fees, rolling_sigma, tiled_positions
from .losses import divergence_loss, linear_slippage
from .market_data import PriceSeries, load_csv, synth_gbm, synth_sine
from .predictor import (
    Predictor,
    PredictorConfig,
    equilibrium_target,
    expected_load_at,
    make_window,
    train_supervised,
    window_volatility,
    write_curve_csv,
)
from .rebalance import (
    InventoryLedger,
    ShiftedPool,
    accrue_shortfall,
    arbitrage_profit,
    needs_rebalance,
    pseudo_arbitrage_shift,
    rebalance_deposit,
)

CONFIG_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class ConvergenceError(RuntimeError):
    """A training run finished but failed its convergence check."""


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class DataSection:
    source: str = "synth_gbm"
    path: Optional[str] = None
    price_column: bool = False
    n: int = 10_000
    mu: float = 0.0
    sigma: float = 0.01
    p0: float = 1.0
    period: float = 200.0
    amplitude: float = 0.1
    center: float = 0.5


@dataclass(frozen=True)
class PoolSection:
    c: float = 1.0
    rebalance_threshold: float = 0.01
    fee_rate: float = 0.003
    trade_fraction: float = 0.01


@dataclass(frozen=True)
class LiquiditySection:
    positions: int = 20
    sigma: Optional[float] = None
    lead: Optional[int] = None


@dataclass(frozen=True)
class CheckSection:
    predictor_mae: float = 0.005
    agent_probe_states: int = 100


@dataclass(frozen=True)
class AgentSection:
    environment: str = "events"
    episodes: int = 3
    max_updates: Optional[int] = None
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


@dataclass(frozen=True)
class PredictorSection:
    window: int = 50
    hidden: int = 100
    horizon: int = 5
    epochs: int = 50
    batch: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.9
    ema_decay: float = 0.99


@dataclass(frozen=True)
class CheckpointSection:
    predictor: Optional[str] = None
    agent: Optional[str] = None


@dataclass(frozen=True)
class SimConfig:
    version: int = CONFIG_VERSION
    seed: Optional[int] = None
    out: Optional[str] = None
    data: DataSection = field(default_factory=DataSection)
    pool: PoolSection = field(default_factory=PoolSection)
    events: EventConfig = field(default_factory=EventConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    agent: AgentSection = field(default_factory=AgentSection)
    liquidity: LiquiditySection = field(default_factory=LiquiditySection)
    checks: CheckSection = field(default_factory=CheckSection)
    checkpoints: CheckpointSection = field(default_factory=CheckpointSection)

    @property
    def lead(self):
        return self.predictor.horizon if self.liquidity.lead is None else self.liquidity.lead

    def predictor_config(self):
        return PredictorConfig(seed=self.seed or 0, **asdict(self.predictor))

    def agent_config(self):
        keep = {f.name for f in fields(AgentConfig)}
        return AgentConfig(seed=self.seed or 0, **{k: v for k, v in asdict(self.agent).items() if k in keep})


def _coerce(value, default, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot, e.g. 1e-4, as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


_OPTIONAL_PROTOTYPES = {"Optional[float]": 0.0, "Optional[int]": 0, "Optional[str]": ""}


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}; "
                          f"allowed: {', '.join(sorted(known))}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        where = f"{prefix}.{name}" if prefix else name
        current = getattr(defaults, name)
        if current is None:
            # optional fields: check against the declared type instead of the default
            current = _OPTIONAL_PROTOTYPES.get(str(known[name].type))
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value or {}, where)
        else:
            kwargs[name] = _coerce(value, current, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def config_from_dict(raw) -> SimConfig:
    raw = dict(raw or {})
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}; expected {CONFIG_VERSION}")
    cfg = _build(SimConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path, seed=None, out=None, price_column=None) -> SimConfig:
    """Read a YAML config and apply command-line overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    raw = dict(raw or {})
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    if price_column:
        raw.setdefault("data", {})
        raw["data"] = {**raw["data"], "price_column": True}
    return config_from_dict(raw)


def validate(cfg: SimConfig):
    d = cfg.data
    if d.source not in ("synth_gbm", "synth_sine", "csv"):
        raise ConfigError(f"data.source must be synth_gbm, synth_sine or csv, got {d.source!r}")
    if d.source == "csv" and not d.path:
        raise ConfigError("data.path is required when data.source is csv")
    if d.source.startswith("synth") and cfg.seed is None:
        raise ConfigError("seed is required for synthetic data (set `seed:` or pass --seed)")
    if cfg.seed is not None and not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if not cfg.pool.c > 0 or not 0 <= cfg.pool.fee_rate < 1 or not 0 < cfg.pool.trade_fraction < 1:
        raise ConfigError("pool: need c > 0, 0 <= fee_rate < 1 and 0 < trade_fraction < 1")
    if not cfg.pool.rebalance_threshold > 0:
        raise ConfigError("pool.rebalance_threshold must be positive")
    if cfg.liquidity.positions < 1 or cfg.lead < 0:
        raise ConfigError("liquidity: need positions >= 1 and lead >= 0")
    if cfg.liquidity.sigma is not None and not cfg.liquidity.sigma > 0:
        raise ConfigError("liquidity.sigma must be positive when set")
    if cfg.agent.environment not in ("events", "controlled"):
        raise ConfigError("agent.environment must be events or controlled")
    try:
        cfg.predictor_config()
        cfg.agent_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: SimConfig):
    return asdict(cfg)


def load_series(cfg: SimConfig) -> PriceSeries:
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.path, price_column=d.price_column)
    if d.source == "synth_gbm":
        return synth_gbm(cfg.seed, d.n, d.mu, d.sigma, d.p0)
    return synth_sine(d.n, d.period, d.amplitude, d.center)


def prepare_run_dir(cfg: SimConfig, out=None) -> Path:
    out = out or cfg.out
    if not out:
        raise ConfigError("no output directory: set `out:` or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
    return path


def _write_summary(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- replay -------------------------------------------------------------------

EVENT_COLUMNS = [
    "t", "event_offset", "v", "v_next", "div_loss_off", "div_loss_on", "rebalanced",
    "deposit_value", "slippage", "fee_accrued", "fee_distributed", "fee_carried",
    "fee_active", "active_capital", "fee_center", "center_error", "forecast",
    "pred_slippage", "expected_load",
]


@dataclass(frozen=True)
class RunReport:
    events: int
    rebalances: int
    cum_divergence_off: float
    cum_divergence_on: float
    cum_slippage: float
    mean_prediction_slippage: float
    mean_expected_load: float
    fees_accrued: float
    fees_distributed: float
    fees_carried: float
    capital_efficiency: float
    mean_center_error: float

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"report metric {f.name}={val} is not finite and non-negative")

    @property
    def divergence_ratio(self):
        """OFF over ON cumulative divergence loss (inf when ON is exactly zero)."""
        if self.cum_divergence_on == 0:
            return math.inf if self.cum_divergence_off > 0 else 1.0
        return self.cum_divergence_off / self.cum_divergence_on


def _mean(values):
    return float(sum(values) / len(values)) if values else 0.0


def report_from_rows(rows) -> RunReport:
    """Aggregate per-event rows (dicts of floats, ``None`` for blanks)."""
    def col(name):
        return [r[name] for r in rows if r[name] is not None]

    active_capital = sum(col("active_capital"))
    return RunReport(
        events=len(rows),
        rebalances=int(sum(col("rebalanced"))),
        cum_divergence_off=float(sum(col("div_loss_off"))),
        cum_divergence_on=float(sum(col("div_loss_on"))),
        cum_slippage=float(sum(col("slippage"))),
        mean_prediction_slippage=_mean(col("pred_slippage")),
        mean_expected_load=_mean(col("expected_load")),
        fees_accrued=float(sum(col("fee_accrued"))),
        fees_distributed=float(sum(col("fee_distributed"))),
        fees_carried=float(sum(col("fee_carried"))),
        capital_efficiency=float(sum(col("fee_active")) / active_capital) if active_capital > 0 else 0.0,
        mean_center_error=_mean(col("center_error")),
    )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_event_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in EVENT_COLUMNS])


def read_event_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != EVENT_COLUMNS:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append({k: (None if v == "" else float(v)) for k, v in rec.items()})
    return rows


class _Forecaster:
    """Centre of the fee distribution scheduled ``lead`` intervals ahead.

    ``predictive`` uses the trained model (persistence until a full window
    exists or when no model is given); ``lookback`` always uses the current
    equilibrium valuation.
    """

    def __init__(self, series, model: Optional[Predictor], lead, mode):
        self.series, self.model, self.lead, self.mode = series, model, lead, mode
        if mode == "predictive" and model is not None and lead not in (0, model.config.horizon):
            raise ConfigError(f"liquidity.lead={lead} must equal the checkpoint horizon "
                              f"{model.config.horizon} (or 0)")

    def __call__(self, t):
        current = float(equilibrium_target(self.series.v[t]))
        if self.mode == "lookback" or self.lead == 0 or self.model is None:
            return current
        w = self.model.config.window
        if t < w - 1:
            return current
        return self.model.predict(make_window(self.series, None, t, w))


def _replay_rows(cfg: SimConfig, series: PriceSeries, forecaster: _Forecaster):
    c = cfg.pool.c
    primary = BondingCurve(c)
    lead = cfg.lead
    v = series.v
    positions = tiled_positions(cfg.liquidity.positions)
    schedule = IncentiveSchedule()
    on_pool = ShiftedPool.at_valuation(c, float(v[0]))
    ledger = InventoryLedger()
    window = cfg.predictor.window
    rows = []
    t = 0
    while True:
        k = detect_event(v, t, cfg.events)
        if k is None:
            break
        t_new = t + k
        v_old, v_new = float(v[t]), float(v[t_new])

        # OFF: arbitrageurs move the primary pool to the new equilibrium
        div_off = float(divergence_loss(primary, v_old, v_new))
        # ON: the curve follows the oracle; only residual arbitrage remains
        shift = pseudo_arbitrage_shift(on_pool.curve, v_old, v_new)
        on_pool = ShiftedPool(on_pool.x, on_pool.y, shift.curve)
        ledger = accrue_shortfall(ledger, shift)
        div_on = abs(float(arbitrage_profit(on_pool.curve, on_pool.x, on_pool.y, v_new)))
        rebalanced, deposit_value = False, 0.0
        if needs_rebalance(ledger, on_pool, cfg.pool.rebalance_threshold):
            (dx, dy), on_pool, ledger = rebalance_deposit(on_pool, ledger, v_new)
            rebalanced = True
            deposit_value = abs(v_new * dx + (1.0 - v_new) * dy)

        # retail round trip against the (virtual) pool at the new equilibrium
        pool_state = on_pool.virtual()
        size = cfg.pool.trade_fraction * pool_state.x
        slip = float(linear_slippage(primary, pool_state.x, size))
        y_out, after = swap(pool_state, X, size)
        fee = cfg.pool.fee_rate * (v_new * size + (1.0 - v_new) * y_out)

        dist = schedule.distribution_at(t_new)
        alloc = allocate_fees(positions, fee, dist)
        active = [p for p in positions if p.contains(v_new)]
        fee_active = sum(alloc.amounts[p.owner] for p in active)
        active_capital = sum(p.liquidity for p in active)
        realized_now = float(equilibrium_target(v_new))
        entries = schedule.log.entries
        scheduled = bool(entries) and entries[0].effective_t <= t_new
        center_error = abs(dist.mu - realized_now) if scheduled else None
        schedule.log.record_realized(t_new, realized_now)

        # publish the next centre
        forecast = forecaster(t_new)
        sigma = cfg.liquidity.sigma or rolling_sigma(v[max(0, t_new - 49): t_new + 1])
        schedule.shift_concentration(t_new, forecast, lead, sigma)
        if t_new + lead < len(series):
            target = float(equilibrium_target(v[t_new + lead]))
            pred_slip = abs(target - forecast)
            lo = max(0, t_new - window + 1)
            vol = window_volatility(v[lo: t_new + 1])
            e_load = float(expected_load_at(target, vol, max(lead, 1)))
        else:
            pred_slip, e_load = None, None

        rows.append({
            "t": t_new, "event_offset": k, "v": v_old, "v_next": v_new,
            "div_loss_off": div_off, "div_loss_on": div_on, "rebalanced": rebalanced,
            "deposit_value": deposit_value, "slippage": slip, "fee_accrued": fee,
            "fee_distributed": alloc.distributed, "fee_carried": alloc.carried_over,
            "fee_active": fee_active, "active_capital": active_capital, "fee_center": dist.mu,
            "center_error": center_error, "forecast": forecast, "pred_slippage": pred_slip,
            "expected_load": e_load,
        })
        t = t_new
    return rows, schedule


def _rows_roundtrip(rows):
    """Parse rows the way ``report`` will so in-memory and CSV reports agree."""
    return [{k: (None if _fmt(r[k]) == "" else float(_fmt(r[k]))) for k in EVENT_COLUMNS} for r in rows]


def _load_predictor(cfg: SimConfig, required=False):
    path = cfg.checkpoints.predictor
    if path is None:
        if required:
            raise ConfigError("a predictor checkpoint is required (checkpoints.predictor or --checkpoint)")
        return None
    if not Path(path).is_file():
        raise ConfigError(f"predictor checkpoint not found: {path}")
    return Predictor.load(path)


def run_replay(cfg: SimConfig, out=None) -> RunReport:
    """Event replay with pseudo-arbitrage ON and OFF side by side."""
    run_dir = prepare_run_dir(cfg, out)
    series = load_series(cfg)
    forecaster = _Forecaster(series, _load_predictor(cfg), cfg.lead, "predictive")
    rows, schedule = _replay_rows(cfg, series, forecaster)
    write_event_csv(run_dir / "events.csv", rows)
    schedule.log.to_csv(run_dir / "predictions.csv")
    report = report_from_rows(_rows_roundtrip(rows))
    _write_summary(run_dir / "summary.json", {"command": "replay", "report": asdict(report)})
    return report


def report(path) -> RunReport:
    """Recompute a run report from a run directory or an events CSV."""
    path = Path(path)
    csv_path = path / "events.csv" if path.is_dir() else path
    if not csv_path.is_file():
        raise ConfigError(f"no events CSV at {csv_path}")
    return report_from_rows(read_event_csv(csv_path))


# -- training -----------------------------------------------------------------

def run_train_predictor(cfg: SimConfig, out=None, resume=None, epochs=None):
    """Train (or resume) the forecaster; raises ``ConvergenceError`` on a failed check."""
    run_dir = prepare_run_dir(cfg, out)
    series = load_series(cfg)
    pcfg = cfg.predictor_config()
    if resume is not None:
        if not Path(resume).is_file():
            raise ConfigError(f"checkpoint not found: {resume}")
        model = Predictor.load(resume)
        if asdict(replace(model.config, epochs=pcfg.epochs)) != asdict(pcfg):
            raise ConfigError("checkpoint was trained with a different predictor config")
        model.config = pcfg
    else:
        model = Predictor(pcfg)
    history = train_supervised(model, series, pcfg, epochs=epochs)
    curve_path = run_dir / "predictor_curve.csv"
    if resume is not None and curve_path.is_file():
        with open(curve_path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            for s in history:
                w.writerow([s.epoch, repr(s.mean_abs_err), repr(s.mean_expected_load), repr(s.objective)])
    else:
        write_curve_csv(curve_path, history)
    model.save(run_dir / "predictor.npz")
    final = history[-1].mean_abs_err if history else float("nan")
    passed = bool(final < cfg.checks.predictor_mae) if model.epochs_done >= pcfg.epochs else None
    _write_summary(run_dir / "summary.json", {
        "command": "train-predictor", "epochs_done": model.epochs_done,
        "final_mean_abs_err": final, "check_passed": passed,
    })
    if passed is False:
        raise ConvergenceError(f"final mean |v' - v'_p| = {final:.3g} >= {cfg.checks.predictor_mae}")
    return model, history


def _probe_controlled(agent: DDQNAgent, cfg: SimConfig):
    rng = np.random.default_rng([cfg.seed or 0, 2])
    states = rng.normal(size=(cfg.checks.agent_probe_states, cfg.predictor.window, 9))
    return all(agent.greedy_action(s) == Action.INSERT_NUDGE for s in states)


def run_train_agent(cfg: SimConfig, out=None, resume=None):
    run_dir = prepare_run_dir(cfg, out)
    acfg = cfg.agent_config()
    agent = DDQNAgent.load(resume) if resume is not None else DDQNAgent(acfg, gamma=cfg.reward.gamma)
    if cfg.agent.environment == "controlled":
        env = ControlledEnvironment(window=cfg.predictor.window, seed=cfg.seed or 0)
    else:
        series = load_series(cfg)
        env = EventEnvironment(series, _load_predictor(cfg, required=True), cfg.pool.c,
                               cfg.events, cfg.reward)
    records = train_agent(env, agent, cfg.agent.episodes, cfg.agent.max_updates)
    write_episode_csv(run_dir / "episodes.csv", records)
    agent.save(run_dir / "agent.npz")
    if cfg.agent.environment == "controlled":
        passed = _probe_controlled(agent, cfg)
        detail = "greedy policy picks the dominant action"
    else:
        rewards = np.array([r.reward for r in records], dtype=float)
        fifth = max(1, rewards.size // 5)
        passed = bool(rewards[-fifth:].mean() >= rewards[:fifth].mean())
        detail = "late mean reward >= early mean reward"
    _write_summary(run_dir / "summary.json", {
        "command": "train-agent", "updates": agent.updates, "decisions": len(records),
        "check": detail, "check_passed": passed,
    })
    if not passed:
        raise ConvergenceError(f"agent check failed: {detail}")
    return agent, records


# -- evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    predictive: RunReport
    lookback: RunReport

    @property
    def center_error_ratio(self):
        if self.predictive.mean_center_error == 0:
            return math.inf if self.lookback.mean_center_error > 0 else 1.0
        return self.lookback.mean_center_error / self.predictive.mean_center_error


def run_evaluate(cfg: SimConfig, out=None) -> EvaluationReport:
    """Predictive fee centring against the look-back baseline on the same replay."""
    run_dir = prepare_run_dir(cfg, out)
    series = load_series(cfg)
    model = _load_predictor(cfg, required=cfg.lead > 0)
    reports = {}
    for mode in ("predictive", "lookback"):
        rows, _ = _replay_rows(cfg, series, _Forecaster(series, model, cfg.lead, mode))
        write_event_csv(run_dir / f"events_{mode}.csv", rows)
        reports[mode] = report_from_rows(_rows_roundtrip(rows))
    result = EvaluationReport(reports["predictive"], reports["lookback"])
    _write_summary(run_dir / "summary.json", {
        "command": "evaluate", "predictive": asdict(result.predictive),
        "lookback": asdict(result.lookback),
    })
    return result


def default_config_yaml(seed=0):
    return yaml.safe_dump(config_to_dict(replace(SimConfig(), seed=seed)), sort_keys=False)

