"""Training and evaluation loops, experiment construction and calibration sweeps."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .agents import (
    BaselineAgent,
    DqnAgent,
    DqnConfig,
    EpsilonSchedule,
    RandomAgent,
    TabularAgent,
    save_agent,
)
from .dynamics import (
    N_CATEGORIES,
    BeliefDistributionParams,
    InteractionParams,
    UserBatch,
    UserGenParams,
    _click_probability,
    _shift,
    category_bounds,
    category_of_bias,
)
from .environment import EnvConfig, RecEnv, RewardScheme, VecRecEnv

log = logging.getLogger(__name__)

# stream tags keep the RNG streams of different purposes disjoint
STREAM_AGENT, STREAM_LEARNER, STREAM_WORKER, STREAM_EVAL, STREAM_CALIBRATE = range(5)


def stream(seed: int, *tags: int) -> np.random.Generator:
    """RNG for (root seed, purpose, index...), derived through ``SeedSequence``."""
    return np.random.default_rng([int(seed), *map(int, tags)])


# ---------------------------------------------------------------------------
# experiment description
# ---------------------------------------------------------------------------


@dataclass
class AgentSpec:
    kind: str = "dqn"
    dqn: DqnConfig = field(default_factory=DqnConfig)
    alpha: float = 0.1
    profiling_steps: int = 25
    epsilon_start: float = 1.0
    epsilon_min: float = 0.02
    epsilon_schedule: str = "linear"
    epsilon_decay_span: float = 0.3
    epsilon_decay: float = 0.99
    train_freq: int = 8
    learning_starts: int = 5000


@dataclass
class ExperimentConfig:
    name: str = "run"
    env: EnvConfig = field(default_factory=EnvConfig)
    train_lifespan: int = 100
    agent: AgentSpec = field(default_factory=AgentSpec)
    budget_episodes: int = 50_000
    max_wall_clock: float | None = None
    eval_population: int = 1000
    eval_seed: int = 2022
    seed: int = 0
    workers: int = 1
    envs_per_worker: int = 64
    outdir: Path | None = None
    checkpoint_every: int = 0
    curve_window: int | None = None
    trajectory_stride: int = 10
    hist_bins: int = 50
    flat: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.budget_episodes < 0 or self.eval_population < 1 or self.workers < 1:
            raise ValueError("budgets, population and worker count must be positive")
        if self.envs_per_worker < 1 or self.train_lifespan < 1:
            raise ValueError("envs_per_worker and train_lifespan must be >= 1")

    @property
    def train_env(self) -> EnvConfig:
        return replace(self.env, user_lifespan=self.train_lifespan)

    def schedule(self) -> EpsilonSchedule:
        a = self.agent
        return EpsilonSchedule(
            epsilon_start=a.epsilon_start,
            epsilon_min=a.epsilon_min,
            decay_span=max(1.0, a.epsilon_decay_span * self.budget_episodes),
            decay=a.epsilon_decay,
            mode=a.epsilon_schedule,
        )


def experiment_from_flat(flat: dict) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from a resolved flat key dict."""
    f = flat
    if f["env.reward_scheme"] == "custom":
        rewards = tuple(f["env.click_rewards"])
    else:
        rewards = RewardScheme.preset(f["env.reward_scheme"]).click_rewards
    scheme = RewardScheme(rewards, f["env.attrition_penalty"], f["env.survival_bonus"])
    env = EnvConfig(
        horizon=f["env.horizon"],
        user_lifespan=f["env.user_lifespan"],
        reward_scheme=scheme,
        belief=BeliefDistributionParams(
            f["belief.mu_left"], f["belief.sigma_left"], f["belief.mu_right"],
            f["belief.sigma_right"], f["belief.p_left"], f["belief.resample_bound"],
        ),
        user=UserGenParams(
            f["user.pf_min"], f["user.pf_max"], f["user.malleability"],
            f["user.om_min"], f["user.om_max"], f["user.rate_min"], f["user.rate_max"],
        ),
        interaction=InteractionParams(
            p_spread=f["interact.p_spread"],
            p_max=f["interact.p_max"],
            satisfaction_threshold=f["interact.satisfaction_threshold"],
            engagement_increment=f["interact.engagement_increment"],
            spread_mode=f["interact.spread_mode"],
            rate_mode=f["interact.rate_mode"],
            rate_min=f["user.rate_min"],
            rate_max=f["user.rate_max"],
        ),
        observation_mode=f["env.observation_mode"],
    )
    hidden = f["agent.hidden"]
    if hidden is None:
        hidden = (128, 64) if env.observation_mode == "matrix" else (32, 32)
    dqn = DqnConfig(
        gamma=f["agent.gamma"],
        lr=f["agent.lr"],
        optimizer=f["agent.optimizer"],
        loss=f["agent.loss"],
        batch_size=f["agent.batch_size"],
        replay_capacity=f["agent.replay_capacity"],
        target_sync=f["agent.target_sync"],
        hidden=tuple(hidden),
        prioritized=f["agent.prioritized"],
    )
    agent = AgentSpec(
        kind=f["agent.kind"],
        dqn=dqn,
        alpha=f["agent.alpha"],
        profiling_steps=f["agent.profiling_steps"],
        epsilon_start=f["agent.epsilon_start"],
        epsilon_min=f["agent.epsilon_min"],
        epsilon_schedule=f["agent.epsilon_schedule"],
        epsilon_decay_span=f["agent.epsilon_decay_span"],
        epsilon_decay=f["agent.epsilon_decay"],
        train_freq=f["agent.train_freq"],
        learning_starts=f["agent.learning_starts"],
    )
    budget = f["run.budget_episodes"]
    if budget is None:
        budget = cfgmod.TIER_BUDGETS[f["run.tier"]]
    return ExperimentConfig(
        name=f["run.name"],
        env=env,
        train_lifespan=f["env.train_lifespan"],
        agent=agent,
        budget_episodes=budget,
        max_wall_clock=f["run.max_wall_clock"],
        eval_population=f["run.eval_population"],
        eval_seed=f["run.eval_seed"],
        seed=f["run.seed"],
        workers=f["run.workers"],
        envs_per_worker=f["run.envs_per_worker"],
        outdir=Path(f["run.outdir"]) if f["run.outdir"] else None,
        checkpoint_every=f["run.checkpoint_every"],
        curve_window=f["run.curve_window"],
        trajectory_stride=f["run.trajectory_stride"],
        hist_bins=f["run.hist_bins"],
        flat=dict(flat),
    )


def make_experiment(preset: str | None = None, **overrides) -> ExperimentConfig:
    """Convenience: preset name plus ``section__key=value`` overrides."""
    flat = {k.replace("__", "."): v for k, v in overrides.items()}
    return experiment_from_flat(cfgmod.resolve(overrides=flat, preset=preset))


def make_agent(config: ExperimentConfig, rng: np.random.Generator | None = None):
    spec = config.agent
    if spec.kind == "random":
        return RandomAgent()
    if spec.kind == "baseline":
        return BaselineAgent(spec.profiling_steps)
    schedule = config.schedule()
    if spec.kind == "tabular":
        if config.env.observation_mode != "aggregate":
            raise ValueError("the tabular agent needs env.observation_mode=aggregate")
        return TabularAgent(spec.alpha, spec.dqn.gamma, schedule)
    if spec.kind == "dqn":
        rng = rng if rng is not None else stream(config.seed, STREAM_AGENT)
        scale = config.env.horizon if config.env.observation_mode == "aggregate" else 1.0
        return DqnAgent(config.env.observation_shape, spec.dqn, rng, obs_scale=scale, schedule=schedule)
    raise ValueError(f"unknown agent kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# single episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    actions: list[int]
    clicks: list[bool]
    rewards: list[float]
    beliefs: list[float]
    initial_belief: float
    final_belief: float
    attrition_step: int | None
    ideology: int

    def __len__(self) -> int:
        return len(self.actions)


def run_episode(env: RecEnv, agent, rng: np.random.Generator, learn: bool = False) -> EpisodeRecord:
    """Play one episode on a single-user environment; learning hooks fire only if ``learn``."""
    agent.reset_slots(np.array([0]), 1)
    obs = env.reset()
    initial = env.user.belief
    actions, clicks, rewards, beliefs = [], [], [], []
    attrition_step = None
    done = False
    while not done:
        action = int(agent.act(obs[None], rng, greedy=not learn)[0])
        result = env.step(action)
        done = result.done
        clicked = result.info["clicked"]
        agent.record(np.array([0]), np.array([action]), np.array([clicked]))
        if learn:
            agent.store(obs[None], np.array([action]), np.array([result.reward]),
                        result.observation[None], np.array([result.info["attrited"]]))
            agent.learn(rng)
        actions.append(action)
        clicks.append(clicked)
        rewards.append(result.reward)
        beliefs.append(result.info["user_belief"])
        if result.info["attrited"]:
            attrition_step = result.info["step_index"]
        obs = result.observation
    return EpisodeRecord(
        actions, clicks, rewards, beliefs, initial, env.user.belief, attrition_step,
        int(category_of_bias(initial)),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingCurve:
    episodes: list[int] = field(default_factory=list)
    ctr: list[float] = field(default_factory=list)
    mean_abs_shift: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)


@dataclass
class TrainResult:
    agent: object
    curve: TrainingCurve
    episodes: int
    env_steps: int
    train_steps: int
    wall_clock: float


class _Collector:
    """One worker: its own batch of environments and RNG streams."""

    def __init__(self, config: ExperimentConfig, index: int):
        self.env_rng = stream(config.seed, STREAM_WORKER, index, 0)
        self.act_rng = stream(config.seed, STREAM_WORKER, index, 1)
        self.env = VecRecEnv(config.train_env, config.envs_per_worker, self.env_rng)
        self.obs = self.env.observe()
        self.clicks = np.zeros(self.env.n, dtype=np.int64)

    def step(self, agent):
        obs = self.obs
        actions = agent.act(obs, self.act_rng)
        result = self.env.step(actions)
        return obs, actions, result


def train(config: ExperimentConfig, progress=None) -> TrainResult:
    """Run the episode budget; heuristic agents are returned untouched."""
    start = time.perf_counter()
    agent = make_agent(config)
    curve = TrainingCurve()
    learns = isinstance(agent, (DqnAgent, TabularAgent))
    if not learns or config.budget_episodes == 0:
        return TrainResult(agent, curve, 0, 0, 0, 0.0)

    spec = config.agent
    schedule = config.schedule()
    window = config.curve_window or max(1, config.budget_episodes // 50)
    learner_rng = stream(config.seed, STREAM_LEARNER)
    collectors = [_Collector(config, i) for i in range(config.workers)]
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    episodes = env_steps = train_steps = 0
    win_clicks = win_recs = 0
    win_shift = []
    pending_updates = 0.0
    next_ckpt = config.checkpoint_every or None
    try:
        while episodes < config.budget_episodes:
            if config.max_wall_clock is not None and time.perf_counter() - start > config.max_wall_clock:
                log.info("wall-clock budget reached after %d episodes", episodes)
                break
            agent.epsilon = schedule.value(episodes)
            if pool is None:
                outputs = [c.step(agent) for c in collectors]
            else:
                outputs = list(pool.map(lambda c: c.step(agent), collectors))

            # consume in worker order so results do not depend on thread timing
            for c, (obs, actions, res) in zip(collectors, outputs):
                s = res.stepped
                agent.store(obs[s], actions[s], res.reward[s], res.observation[s], res.attrited[s])
                c.clicks += res.clicked
                env_steps += int(s.sum())
                pending_updates += s.sum() / spec.train_freq
                done_idx = np.flatnonzero(res.done)
                for i in done_idx:
                    if episodes >= config.budget_episodes:
                        break
                    episodes += 1
                    win_clicks += int(c.clicks[i])
                    win_recs += int(c.env.steps[i])
                    win_shift.append(abs(c.env.users.belief[i] - c.env.initial_belief[i]))
                    if episodes % window == 0:
                        curve.episodes.append(episodes)
                        curve.ctr.append(win_clicks / max(win_recs, 1))
                        curve.mean_abs_shift.append(float(np.mean(win_shift)))
                        win_clicks = win_recs = 0
                        win_shift = []
                        if progress is not None:
                            progress(episodes, curve)
                if len(done_idx):
                    c.clicks[done_idx] = 0
                    c.env.reset(done_idx)
                c.obs = c.env.observe()

            if isinstance(agent, DqnAgent):
                ready = len(agent.replay) >= max(spec.learning_starts, spec.dqn.batch_size)
                while pending_updates >= 1.0:
                    pending_updates -= 1.0
                    if ready:
                        agent.learn(learner_rng)
                        train_steps += 1

            if next_ckpt is not None and episodes >= next_ckpt and config.outdir is not None:
                save_agent(Path(config.outdir) / "checkpoints" / f"ep{next_ckpt:08d}.ckpt", agent, config.flat)
                next_ckpt += config.checkpoint_every
    finally:
        if pool is not None:
            pool.shutdown()
    agent.epsilon = schedule.value(episodes)
    return TrainResult(agent, curve, episodes, env_steps, train_steps, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    agent_name: str
    actions: np.ndarray         # (users, lifespan) int8, -1 once the episode is over
    clicks: np.ndarray          # (users, lifespan) bool
    rewards: np.ndarray         # (users, lifespan) float
    beliefs: np.ndarray         # (users, lifespan + 1) belief after each step, frozen after exit
    lengths: np.ndarray         # steps taken per user
    attrited: np.ndarray        # bool per user
    ideology: np.ndarray        # category of the initial belief

    @property
    def population(self) -> int:
        return len(self.lengths)

    @property
    def initial_beliefs(self) -> np.ndarray:
        return self.beliefs[:, 0]

    @property
    def final_beliefs(self) -> np.ndarray:
        return self.beliefs[np.arange(self.population), self.lengths]

    @property
    def total_clicks(self) -> int:
        return int(self.clicks.sum())

    @property
    def total_recommendations(self) -> int:
        return int(self.lengths.sum())

    @property
    def ctr(self) -> float:
        return self.total_clicks / max(self.total_recommendations, 1)

    @property
    def attrition_rate(self) -> float:
        return float(self.attrited.mean())

    def record(self, i: int) -> EpisodeRecord:
        n = int(self.lengths[i])
        return EpisodeRecord(
            actions=self.actions[i, :n].astype(int).tolist(),
            clicks=self.clicks[i, :n].tolist(),
            rewards=self.rewards[i, :n].tolist(),
            beliefs=self.beliefs[i, 1:n + 1].tolist(),
            initial_belief=float(self.beliefs[i, 0]),
            final_belief=float(self.beliefs[i, n]),
            attrition_step=n if self.attrited[i] else None,
            ideology=int(self.ideology[i]),
        )

    @property
    def records(self) -> list[EpisodeRecord]:
        return [self.record(i) for i in range(self.population)]

    def histograms(self, bins: int = 50):
        """(initial, final) belief histograms."""
        from .metrics import belief_histogram
        return belief_histogram(self.initial_beliefs, bins), belief_histogram(self.final_beliefs, bins)

    def composition(self):
        """Per-ideology mean action distribution at every step."""
        from .metrics import composition_matrix
        return composition_matrix(self)


def generate_population(config: ExperimentConfig, n: int | None = None) -> UserBatch:
    rng = stream(config.eval_seed, STREAM_EVAL, 0)
    return UserBatch.create(n or config.eval_population, config.env.belief, config.env.user, rng)


def evaluate(agent, config: ExperimentConfig, population: UserBatch | None = None,
             name: str | None = None) -> EvaluationReport:
    """One greedy, non-learning episode per user of the fixed population."""
    users = population if population is not None else generate_population(config)
    env_cfg = config.env
    rng_env = stream(config.eval_seed, STREAM_EVAL, 1)
    rng_act = stream(config.eval_seed, STREAM_EVAL, 2)
    env = VecRecEnv(env_cfg, len(users), rng_env, users=users)
    n, life = env.n, env_cfg.user_lifespan
    agent.reset_slots(np.arange(n), n)

    actions = np.full((n, life), -1, dtype=np.int8)
    clicks = np.zeros((n, life), dtype=bool)
    rewards = np.zeros((n, life))
    beliefs = np.zeros((n, life + 1))
    beliefs[:, 0] = env.users.belief
    attrited = np.zeros(n, dtype=bool)
    for t in range(life):
        if not env.active.any():
            beliefs[:, t + 1:] = beliefs[:, t:t + 1]
            break
        a = agent.act(env.observe(), rng_act, greedy=True)
        res = env.step(a)
        agent.record(np.flatnonzero(res.stepped), a, res.clicked)
        actions[res.stepped, t] = a[res.stepped]
        clicks[:, t] = res.clicked
        rewards[:, t] = res.reward
        attrited |= res.attrited
        beliefs[:, t + 1] = env.users.belief
    return EvaluationReport(
        agent_name=name or config.name,
        actions=actions,
        clicks=clicks,
        rewards=rewards,
        beliefs=beliefs,
        lengths=env.steps.copy(),
        attrited=attrited,
        ideology=category_of_bias(beliefs[:, 0]),
    )


# ---------------------------------------------------------------------------
# calibration sweeps
# ---------------------------------------------------------------------------


def calibrate_attrition(config: ExperimentConfig, n_users: int = 1000, max_steps: int | None = None) -> np.ndarray:
    """Fraction of users still active after each step under random recommendations.

    Entry ``t`` is the alive fraction after ``t`` recommendations (entry 0 is 1).
    """
    max_steps = max_steps or config.env.user_lifespan
    env_cfg = replace(config.env, user_lifespan=max_steps)
    rng = stream(config.seed, STREAM_CALIBRATE, 0)
    env = VecRecEnv(env_cfg, n_users, rng)
    alive = [1.0]
    for _ in range(max_steps):
        if env.active.any():
            env.step(rng.integers(0, N_CATEGORIES, env.n))
        alive.append(float(env.users.alive.mean()))
    return np.array(alive)


def shift_profile(config: ExperimentConfig, users_per_cell: int = 20_000) -> np.ndarray:
    """Mean one-step belief shift by (user ideology category, content category) at engagement 1.

    Users in a bucket are drawn uniformly over the part of the bucket inside the
    resample bound, with per-user features from the usual generators.
    """
    rng = stream(config.seed, STREAM_CALIBRATE, 1)
    up = config.env.user
    bound = config.env.belief.resample_bound
    grid = np.zeros((N_CATEGORIES, N_CATEGORIES))
    for k in range(N_CATEGORIES):
        lo, hi = category_bounds(k)
        lo, hi = max(lo, -bound), min(hi, bound)
        for j in range(N_CATEGORIES):
            belief = rng.uniform(lo, hi, users_per_cell)
            pf = rng.uniform(up.pf_min, up.pf_max, users_per_cell)
            c_lo, c_hi = category_bounds(j)
            bias = rng.uniform(c_lo, c_hi, users_per_cell)
            shift = _shift(belief, bias, pf, up.malleability, 1.0)
            grid[k, j] = float(np.mean(np.clip(belief + shift, -1, 1) - belief))
    return grid


def click_prob_grid(config: ExperimentConfig, n: int = 101, open_mindedness: float | None = None):
    """Click probability over a ``n x n`` lattice of (user belief, content bias)."""
    up = config.env.user
    om = open_mindedness if open_mindedness is not None else 0.5 * (up.om_min + up.om_max)
    axis = np.linspace(-1.0, 1.0, n)
    ub, cb = np.meshgrid(axis, axis, indexing="ij")
    return axis, _click_probability(ub, cb, om, config.env.interaction)
