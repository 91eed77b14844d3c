"""Flat dotted-key run configuration: defaults, file loading, overrides, presets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(parse):
    def inner(v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("none", "null", "")):
            return None
        return parse(v)
    return inner


def _int_list(v) -> list[int]:
    if isinstance(v, str):
        v = json.loads(v) if v.strip().startswith("[") else [x for x in v.split(",") if x.strip()]
    return [int(x) for x in v]


def _float_list(v) -> list[float]:
    if isinstance(v, str):
        v = json.loads(v) if v.strip().startswith("[") else [x for x in v.split(",") if x.strip()]
    return [float(x) for x in v]


def _choice(*options):
    def inner(v):
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return inner


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable
    help: str


KEYS: dict[str, Key] = {
    # belief distribution
    "belief.mu_left": Key(-0.5, float, "mean of the left belief Gaussian"),
    "belief.sigma_left": Key(0.25, float, "std dev of the left belief Gaussian"),
    "belief.mu_right": Key(0.3, float, "mean of the right belief Gaussian"),
    "belief.sigma_right": Key(0.3, float, "std dev of the right belief Gaussian"),
    "belief.p_left": Key(0.55, float, "probability of drawing from the left Gaussian"),
    "belief.resample_bound": Key(0.8, float, "beliefs beyond +/- this bound are redrawn"),
    # user features
    "user.pf_min": Key(1.8, float, "polarization factor lower bound (uniform)"),
    "user.pf_max": Key(2.2, float, "polarization factor upper bound (uniform)"),
    "user.malleability": Key(1.0, float, "malleability (constant for all users)"),
    "user.om_min": Key(0.4, float, "open-mindedness lower bound (uniform)"),
    "user.om_max": Key(0.6, float, "open-mindedness upper bound (uniform)"),
    "user.rate_min": Key(1.01, float, "satisfaction growth/decay rate lower bound"),
    "user.rate_max": Key(1.10, float, "satisfaction growth/decay rate upper bound"),
    # interaction
    "interact.p_spread": Key(8.0, float, "click-probability spread (exponent or multiplier)"),
    "interact.p_max": Key(0.8, float, "maximum click probability"),
    "interact.spread_mode": Key("exponent", _choice("exponent", "multiplier"), "how p_spread enters the click formula"),
    "interact.satisfaction_threshold": Key(0.25, float, "satisfaction below which churn becomes possible (0 disables)"),
    "interact.engagement_increment": Key(0.05, float, "engagement gained per click"),
    "interact.rate_mode": Key("per_interaction", _choice("per_interaction", "per_user"), "when growth/decay rates are drawn"),
    # environment
    "env.horizon": Key(100, int, "interactions kept in the observation window"),
    "env.user_lifespan": Key(500, int, "episode length cap for evaluation"),
    "env.train_lifespan": Key(100, int, "episode length cap during training"),
    "env.reward_scheme": Key("uniform", _choice("uniform", "polarizing", "depolarizing", "custom"), "click reward preset"),
    "env.click_rewards": Key(None, _opt(_float_list), "7 click rewards, required when reward_scheme=custom"),
    "env.attrition_penalty": Key(-1.0, float, "reward added when the user churns"),
    "env.survival_bonus": Key(0.0, float, "reward added when the lifespan is reached"),
    "env.observation_mode": Key("aggregate", _choice("matrix", "aggregate"), "agent observation encoder"),
    # agent
    "agent.kind": Key("dqn", _choice("random", "baseline", "tabular", "dqn"), "policy family"),
    "agent.gamma": Key(0.97, float, "discount factor"),
    "agent.alpha": Key(0.1, float, "tabular learning rate"),
    "agent.lr": Key(1e-3, float, "network learning rate"),
    "agent.optimizer": Key("adam", _choice("adam", "sgd"), "network optimizer"),
    "agent.loss": Key("mse", _choice("mse", "huber"), "TD loss"),
    "agent.hidden": Key(None, _opt(_int_list), "hidden layer sizes (default depends on observation mode)"),
    "agent.batch_size": Key(64, int, "replay minibatch size"),
    "agent.replay_capacity": Key(200_000, int, "replay buffer capacity"),
    "agent.target_sync": Key(1000, int, "train steps between target-network copies"),
    "agent.train_freq": Key(8, int, "environment steps per gradient step"),
    "agent.learning_starts": Key(5000, int, "transitions collected before learning starts"),
    "agent.epsilon_start": Key(1.0, float, "initial exploration rate"),
    "agent.epsilon_min": Key(0.02, float, "exploration floor"),
    "agent.epsilon_schedule": Key("linear", _choice("linear", "exponential"), "exploration decay shape"),
    "agent.epsilon_decay_span": Key(0.3, float, "linear decay length as a fraction of the episode budget"),
    "agent.epsilon_decay": Key(0.99, float, "per-episode factor for exponential decay"),
    "agent.profiling_steps": Key(25, int, "baseline profiling length"),
    "agent.prioritized": Key(False, _bool, "use prioritized replay"),
    # run
    "run.name": Key("run", str, "run label used in summaries"),
    "run.tier": Key("desk", _choice("smoke", "desk", "full"), "training budget tier"),
    "run.budget_episodes": Key(None, _opt(int), "training episodes (overrides the tier)"),
    "run.max_wall_clock": Key(None, _opt(float), "training time cap in seconds"),
    "run.workers": Key(1, int, "experience-collector workers"),
    "run.envs_per_worker": Key(64, int, "parallel environments per worker"),
    "run.eval_population": Key(1000, int, "evaluation population size"),
    "run.eval_seed": Key(2022, int, "seed of the fixed evaluation population"),
    "run.seed": Key(0, int, "root seed for training"),
    "run.outdir": Key("runs/run", str, "output directory"),
    "run.checkpoint_every": Key(0, int, "episodes between periodic checkpoints (0 = final only)"),
    "run.curve_window": Key(None, _opt(int), "episodes per training-curve point (default budget/50)"),
    "run.trajectory_stride": Key(10, int, "step stride of exported belief trajectories"),
    "run.hist_bins": Key(50, int, "belief histogram bins"),
}

TIER_BUDGETS = {"smoke": 2_000, "desk": 50_000, "full": 1_000_000}

PRESETS: dict[str, dict[str, Any]] = {
    "random": {"agent.kind": "random", "env.reward_scheme": "uniform", "run.name": "random"},
    "baseline": {"agent.kind": "baseline", "env.reward_scheme": "uniform", "run.name": "baseline"},
    "no-manip": {"agent.kind": "dqn", "env.reward_scheme": "uniform", "run.name": "no-manip"},
    "polarize": {"agent.kind": "dqn", "env.reward_scheme": "polarizing", "run.name": "polarize"},
    "depolarize": {"agent.kind": "dqn", "env.reward_scheme": "depolarizing", "run.name": "depolarize"},
}


def defaults() -> dict[str, Any]:
    return {k: spec.default for k, spec in KEYS.items()}


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, name + "."))
        else:
            out[name] = v
    return out


def load_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return flatten(data)


def _apply(cfg: dict, key: str, value) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg[key] = KEYS[key].parse(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def resolve(
    file_values: dict | None = None,
    overrides: dict | None = None,
    preset: str | None = None,
) -> dict[str, Any]:
    """Defaults, then preset, then file, then command-line overrides."""
    cfg = defaults()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown experiment {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            _apply(cfg, k, v)
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            _apply(cfg, k, v)
    if cfg["env.reward_scheme"] == "custom":
        rewards = cfg["env.click_rewards"]
        if rewards is None or len(rewards) != 7:
            raise ConfigError("env.reward_scheme=custom needs env.click_rewards with 7 values")
    return cfg


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def describe_keys() -> str:
    width = max(len(k) for k in KEYS)
    lines = [f"  {k:<{width}}  {spec.help} (default: {spec.default})" for k, spec in KEYS.items()]
    return "\n".join(lines)
