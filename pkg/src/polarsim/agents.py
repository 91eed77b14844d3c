"""Recommendation policies: random, CTR-profiling baseline, tabular Q-learning and DQN.

All agents share a batched interface so one code path drives a single
episode or hundreds of parallel ones:

* ``reset_slots(idx, n_slots)`` clears per-episode state for the given slots,
* ``act(obs, rng, greedy=False)`` returns one category index per slot,
* ``record(idx, actions, clicked)`` feeds back what happened (baseline counts),
* ``store(...)`` / ``learn(rng)`` are the learning hooks (no-ops for heuristics).
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import N_CATEGORIES, PoliticsCategory
from .neuralnet import Mlp, OptimizerState, apply_gradients
from .storage import read_container, write_container

# ---------------------------------------------------------------------------
# action selection primitives
# ---------------------------------------------------------------------------


def random_act(rng: np.random.Generator) -> PoliticsCategory:
    return PoliticsCategory(int(rng.integers(0, N_CATEGORIES)))


def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator) -> PoliticsCategory:
    q = np.asarray(q_values, dtype=float)
    if q.shape != (N_CATEGORIES,) or not np.all(np.isfinite(q)):
        raise ValueError("q_values must be 7 finite numbers")
    return PoliticsCategory(int(epsilon_greedy_batch(q[None, :], epsilon, rng)[0]))


def epsilon_greedy_batch(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Row-wise epsilon-greedy; ``argmax`` ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    greedy = np.argmax(q, axis=1)
    if epsilon == 0.0:
        return greedy
    explore = rng.random(len(q)) < epsilon
    randoms = rng.integers(0, N_CATEGORIES, len(q))
    return np.where(explore, randoms, greedy)


@dataclass
class EpsilonSchedule:
    """Exploration rate by episode index, non-increasing and floored at ``epsilon_min``.

    ``linear`` falls from start to min over ``decay_span`` episodes;
    ``exponential`` multiplies by ``decay`` once per episode.
    """

    epsilon_start: float = 1.0
    epsilon_min: float = 0.02
    decay_span: float = 1000.0
    decay: float = 0.99
    mode: str = "linear"

    def __post_init__(self):
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if self.mode not in ("linear", "exponential"):
            raise ValueError("mode must be 'linear' or 'exponential'")

    def value(self, episode: int) -> float:
        if self.mode == "exponential":
            v = self.epsilon_start * self.decay ** max(episode, 0)
        else:
            frac = min(max(episode, 0) / self.decay_span, 1.0) if self.decay_span > 0 else 1.0
            v = self.epsilon_start + frac * (self.epsilon_min - self.epsilon_start)
        return max(self.epsilon_min, v)


# ---------------------------------------------------------------------------
# baseline profiling agent
# ---------------------------------------------------------------------------


@dataclass
class BaselineState:
    recs: np.ndarray = field(default_factory=lambda: np.zeros(N_CATEGORIES, dtype=np.int64))
    clicks: np.ndarray = field(default_factory=lambda: np.zeros(N_CATEGORIES, dtype=np.int64))
    profiling_steps: int = 25


def _baseline_choose(recs, clicks, profiling_steps: int, rng) -> np.ndarray:
    recs = np.asarray(recs, dtype=float)
    clicks = np.asarray(clicks, dtype=float)
    out = np.empty(len(recs), dtype=np.int64)
    profiling = recs.sum(axis=1) < profiling_steps
    if profiling.any():
        # Laplace-smoothed CTR weights; uniform when nothing has been observed
        w = (clicks[profiling] + 1.0) / (recs[profiling] + 1.0)
        cdf = np.cumsum(w, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(int(profiling.sum()))
        out[profiling] = np.minimum((cdf <= u[:, None]).sum(axis=1), N_CATEGORIES - 1)
    exploit = ~profiling
    if exploit.any():
        r = recs[exploit]
        ctr = np.divide(clicks[exploit], r, out=np.zeros_like(r), where=r > 0)
        out[exploit] = np.argmax(ctr, axis=1)
    return out


def baseline_act(state: BaselineState, rng: np.random.Generator) -> PoliticsCategory:
    choice = _baseline_choose(state.recs[None, :], state.clicks[None, :], state.profiling_steps, rng)
    return PoliticsCategory(int(choice[0]))


def baseline_update(state: BaselineState, action, clicked: bool) -> BaselineState:
    recs = state.recs.copy()
    clicks = state.clicks.copy()
    recs[int(action)] += 1
    clicks[int(action)] += int(bool(clicked))
    return BaselineState(recs, clicks, state.profiling_steps)


# ---------------------------------------------------------------------------
# tabular Q-learning
# ---------------------------------------------------------------------------


def tabular_q_update(table, state_key, action, reward, next_state_key, done, alpha, gamma, n_actions=N_CATEGORIES):
    """One Q-learning backup on a dict table (missing states read as zeros)."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must be in [0, 1)")
    q = table.setdefault(state_key, np.zeros(n_actions))
    bootstrap = 0.0 if done else gamma * float(np.max(table.get(next_state_key, np.zeros(n_actions))))
    q[int(action)] += alpha * (reward + bootstrap - q[int(action)])
    return table


def tabular_state_key(features) -> tuple[int, int, int]:
    """Coarse key: (dominant recommended category, dominant clicked category, click-share decile).

    ``7`` stands for "none yet" in either dominant slot.
    """
    f = np.asarray(features)
    recs, clicks = f[:N_CATEGORIES], f[N_CATEGORIES:]
    total = int(recs.sum())
    dom_rec = int(np.argmax(recs)) if total else N_CATEGORIES
    dom_click = int(np.argmax(clicks)) if clicks.sum() else N_CATEGORIES
    decile = min(9, int(10 * clicks.sum() / total)) if total else 0
    return dom_rec, dom_click, decile


# ---------------------------------------------------------------------------
# replay memory
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling (with replacement).

    A lock guards writes and reads so concurrent producers never expose a
    half-written slot to the sampler.
    """

    def __init__(self, capacity: int, obs_shape, obs_dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=obs_dtype)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def _write(self, obs, actions, rewards, next_obs, dones) -> np.ndarray:
        n = len(actions)
        slots = (self.cursor + np.arange(n)) % self.capacity
        if n > self.capacity:
            # only the newest `capacity` items can survive
            keep = slice(n - self.capacity, n)
            obs, actions, rewards, next_obs, dones = (
                obs[keep], actions[keep], rewards[keep], next_obs[keep], dones[keep]
            )
            slots = slots[keep]
        self.obs[slots] = obs
        self.next_obs[slots] = next_obs
        self.actions[slots] = actions
        self.rewards[slots] = rewards
        self.dones[slots] = dones
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        return slots

    def push(self, transition: Transition) -> None:
        self.push_batch(
            np.asarray(transition.observation)[None],
            np.array([int(transition.action)]),
            np.array([float(transition.reward)]),
            np.asarray(transition.next_observation)[None],
            np.array([bool(transition.done)]),
        )

    def push_batch(self, obs, actions, rewards, next_obs, dones) -> None:
        actions = np.asarray(actions, dtype=np.int64)
        if np.any((actions < 0) | (actions >= N_CATEGORIES)):
            raise ValueError("actions must be category indices")
        rewards = np.asarray(rewards, dtype=np.float64)
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        with self._lock:
            self._write(obs, actions, rewards, next_obs, np.asarray(dones, dtype=bool))

    def _indices(self, rng, batch_size):
        return rng.integers(0, self.size, batch_size), np.ones(batch_size)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        with self._lock:
            if self.size < batch_size or self.size == 0:
                raise ValueError(f"replay holds {self.size} items, need {batch_size}")
            idx, weights = self._indices(rng, batch_size)
            return Batch(
                self.obs[idx].copy(),
                self.actions[idx].copy(),
                self.rewards[idx].copy(),
                self.next_obs[idx].copy(),
                self.dones[idx].copy(),
                idx,
                weights,
            )

    def transition(self, i: int) -> Transition:
        return Transition(self.obs[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                          self.next_obs[i].copy(), bool(self.dones[i]))

    def update_priorities(self, indices, td_errors) -> None:
        pass


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritized replay on a sum tree.

    Items are drawn with probability ``p_i**alpha / sum_j p_j**alpha`` and carry
    importance weights ``(N * P(i))**-beta`` normalized by their maximum.
    New items enter at the current maximum priority.
    """

    def __init__(self, capacity, obs_shape, obs_dtype=np.float64, alpha=0.6, beta=0.4, eps=1e-6):
        super().__init__(capacity, obs_shape, obs_dtype)
        self.alpha = alpha
        self.beta = beta
        self.eps = eps
        self._leaves = 1
        while self._leaves < capacity:
            self._leaves *= 2
        self._tree = np.zeros(2 * self._leaves)
        self._max_priority = 1.0

    def _set(self, slots, values) -> None:
        pos = np.asarray(slots) + self._leaves
        self._tree[pos] = values
        pos = np.unique(pos // 2)
        while len(pos) and pos[0] >= 1:
            self._tree[pos] = self._tree[2 * pos] + self._tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos = np.unique(pos // 2)

    def _write(self, obs, actions, rewards, next_obs, dones):
        slots = super()._write(obs, actions, rewards, next_obs, dones)
        self._set(slots, np.full(len(slots), self._max_priority**self.alpha))
        return slots

    def _indices(self, rng, batch_size):
        total = self._tree[1]
        u = rng.random(batch_size) * total
        pos = np.ones(batch_size, dtype=np.int64)
        while pos[0] < self._leaves:
            left = 2 * pos
            go_right = u > self._tree[left]
            u = np.where(go_right, u - self._tree[left], u)
            pos = np.where(go_right, left + 1, left)
        idx = np.minimum(pos - self._leaves, self.size - 1)
        probs = self._tree[idx + self._leaves] / total
        weights = (self.size * probs) ** (-self.beta)
        return idx, weights / weights.max()

    def update_priorities(self, indices, td_errors) -> None:
        p = np.abs(np.asarray(td_errors, dtype=float)) + self.eps
        with self._lock:
            self._max_priority = max(self._max_priority, float(p.max()))
            self._set(np.asarray(indices), p**self.alpha)

    def probabilities(self) -> np.ndarray:
        leaves = self._tree[self._leaves:self._leaves + self.size]
        return leaves / leaves.sum()


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------


class RandomAgent:
    kind = "random"

    def reset_slots(self, idx, n_slots: int) -> None:
        pass

    def act(self, obs, rng, greedy: bool = False) -> np.ndarray:
        return rng.integers(0, N_CATEGORIES, len(obs))

    def record(self, idx, actions, clicked) -> None:
        pass

    def store(self, *transition) -> None:
        pass

    def learn(self, rng):
        return None


class BaselineAgent(RandomAgent):
    """Profiles each user with CTR-weighted sampling, then exploits the best observed CTR."""

    kind = "baseline"

    def __init__(self, profiling_steps: int = 25):
        self.profiling_steps = int(profiling_steps)
        self.recs = np.zeros((0, N_CATEGORIES), dtype=np.int64)
        self.clicks = np.zeros((0, N_CATEGORIES), dtype=np.int64)

    def reset_slots(self, idx, n_slots: int) -> None:
        if len(self.recs) != n_slots:
            self.recs = np.zeros((n_slots, N_CATEGORIES), dtype=np.int64)
            self.clicks = np.zeros((n_slots, N_CATEGORIES), dtype=np.int64)
        self.recs[idx] = 0
        self.clicks[idx] = 0

    def act(self, obs, rng, greedy: bool = False) -> np.ndarray:
        return _baseline_choose(self.recs, self.clicks, self.profiling_steps, rng)

    def record(self, idx, actions, clicked) -> None:
        idx = np.asarray(idx)
        a = np.asarray(actions)[idx]
        self.recs[idx, a] += 1
        self.clicks[idx, a] += np.asarray(clicked, dtype=np.int64)[idx]


class TabularAgent(RandomAgent):
    """Q-learning over ``tabular_state_key`` buckets of the aggregate observation."""

    kind = "tabular"

    def __init__(self, alpha=0.1, gamma=0.97, schedule: EpsilonSchedule | None = None):
        self.alpha = alpha
        self.gamma = gamma
        self.schedule = schedule or EpsilonSchedule()
        self.epsilon = self.schedule.epsilon_start
        self.table: dict = {}

    def q_values(self, obs) -> np.ndarray:
        zeros = np.zeros(N_CATEGORIES)
        return np.array([self.table.get(tabular_state_key(o), zeros) for o in obs])

    def act(self, obs, rng, greedy: bool = False) -> np.ndarray:
        return epsilon_greedy_batch(self.q_values(obs), 0.0 if greedy else self.epsilon, rng)

    def store(self, obs, actions, rewards, next_obs, dones) -> None:
        for o, a, r, o2, d in zip(obs, actions, rewards, next_obs, dones):
            tabular_q_update(self.table, tabular_state_key(o), a, r, tabular_state_key(o2), d,
                             self.alpha, self.gamma)


@dataclass
class DqnConfig:
    gamma: float = 0.97
    lr: float = 1e-3
    optimizer: str = "adam"
    loss: str = "mse"
    batch_size: int = 64
    replay_capacity: int = 200_000
    target_sync: int = 1000
    hidden: tuple[int, ...] = (32, 32)
    prioritized: bool = False
    pr_alpha: float = 0.6
    pr_beta: float = 0.4
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


class DqnAgent(RandomAgent):
    """Deep Q-network with a frozen target copy and experience replay.

    Observations are raw environment arrays; ``encode`` flattens matrix
    observations and scales aggregate counts by ``1 / obs_scale``.
    """

    kind = "dqn"

    def __init__(self, obs_shape, config: DqnConfig, rng: np.random.Generator,
                 obs_scale: float = 1.0, schedule: EpsilonSchedule | None = None):
        self.obs_shape = tuple(obs_shape)
        self.config = config
        self.obs_scale = float(obs_scale)
        in_dim = int(np.prod(self.obs_shape))
        self.main = Mlp.init([in_dim, *config.hidden, N_CATEGORIES], rng)
        self.target = self.main.copy()
        self.optimizer = OptimizerState(kind=config.optimizer, lr=config.lr)
        self.schedule = schedule or EpsilonSchedule()
        self.epsilon = self.schedule.epsilon_start
        self.train_steps = 0
        self.since_sync = 0
        obs_dtype = np.uint8 if len(self.obs_shape) == 2 else np.uint16
        buffer_cls = PrioritizedReplayBuffer if config.prioritized else ReplayBuffer
        kw = {"alpha": config.pr_alpha, "beta": config.pr_beta} if config.prioritized else {}
        self.replay = buffer_cls(config.replay_capacity, self.obs_shape, obs_dtype, **kw)

    def encode(self, obs) -> np.ndarray:
        obs = np.asarray(obs)
        x = obs.reshape(len(obs), -1).astype(np.float64)
        if self.obs_scale != 1.0:
            x /= self.obs_scale
        return x

    def q_values(self, obs) -> np.ndarray:
        return self.main.forward(self.encode(obs))

    def act(self, obs, rng, greedy: bool = False) -> np.ndarray:
        return epsilon_greedy_batch(self.q_values(obs), 0.0 if greedy else self.epsilon, rng)

    def store(self, obs, actions, rewards, next_obs, dones) -> None:
        self.replay.push_batch(obs, actions, rewards, next_obs, dones)

    def learn(self, rng):
        if len(self.replay) < max(self.config.batch_size, 1):
            return None
        return self.train_step(rng)

    def train_step(self, rng: np.random.Generator) -> float:
        cfg = self.config
        batch = self.replay.sample(rng, cfg.batch_size)
        x = self.encode(batch.obs)
        next_q = self.target.forward(self.encode(batch.next_obs))
        y = batch.rewards + np.where(batch.dones, 0.0, cfg.gamma * next_q.max(axis=1))
        q = self.main.forward(x)
        target = q.copy()
        rows = np.arange(len(y))
        target[rows, batch.actions] = y
        mask = np.zeros_like(q)
        mask[rows, batch.actions] = 1.0
        grads, loss = self.main.backward(x, target, mask, loss=cfg.loss, sample_weight=batch.weights)
        apply_gradients(self.main, self.optimizer, grads, cfg.max_grad_norm)
        self.replay.update_priorities(batch.indices, y - q[rows, batch.actions])
        self.train_steps += 1
        self.since_sync += 1
        if self.since_sync >= cfg.target_sync:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target = self.main.copy()
        self.since_sync = 0


def dqn_act(agent: DqnAgent, observation, episode_index: int, rng) -> PoliticsCategory:
    eps = agent.schedule.value(episode_index)
    q = agent.q_values(np.asarray(observation)[None])[0]
    return epsilon_greedy(q, eps, rng)


def dqn_train_step(agent: DqnAgent, rng) -> float:
    return agent.train_step(rng)


def sync_target(agent: DqnAgent) -> DqnAgent:
    agent.sync_target()
    return agent


def replay_push(buffer: ReplayBuffer, transition: Transition) -> ReplayBuffer:
    buffer.push(transition)
    return buffer


def replay_sample(buffer: ReplayBuffer, rng, batch_size: int) -> Batch:
    return buffer.sample(rng, batch_size)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_agent(path, agent, run_config: dict | None = None):
    """Write an agent checkpoint; heuristic agents produce a parameter-free file."""
    meta = {"agent_kind": agent.kind, "config_hash": config_hash(run_config or {}),
            "run_config": run_config or {}}
    arrays: dict[str, np.ndarray] = {}
    if isinstance(agent, BaselineAgent):
        meta["profiling_steps"] = agent.profiling_steps
    elif isinstance(agent, TabularAgent):
        keys = sorted(agent.table)
        meta.update(alpha=agent.alpha, gamma=agent.gamma, epsilon=agent.epsilon)
        arrays["table_keys"] = np.array(keys, dtype=np.int64).reshape(len(keys), 3)
        arrays["table_values"] = np.array([agent.table[k] for k in keys]).reshape(len(keys), N_CATEGORIES)
    elif isinstance(agent, DqnAgent):
        cfg = asdict(agent.config)
        meta.update(
            dqn_config=cfg,
            obs_shape=list(agent.obs_shape),
            obs_scale=agent.obs_scale,
            layer_sizes=agent.main.layer_sizes,
            epsilon=agent.epsilon,
            schedule=asdict(agent.schedule),
            train_steps=agent.train_steps,
            since_sync=agent.since_sync,
            optimizer={k: v for k, v in asdict(agent.optimizer).items() if k not in ("m", "v")},
        )
        for i, p in enumerate(agent.main.params()):
            arrays[f"main_{i:02d}"] = p
        for i, p in enumerate(agent.target.params()):
            arrays[f"target_{i:02d}"] = p
        for i, (m, v) in enumerate(zip(agent.optimizer.m, agent.optimizer.v)):
            arrays[f"adam_m_{i:02d}"] = m
            arrays[f"adam_v_{i:02d}"] = v
    return write_container(path, "checkpoint", arrays, meta)


def _mlp_from(arrays, prefix) -> Mlp:
    params = [arrays[k] for k in sorted(k for k in arrays if k.startswith(prefix))]
    return Mlp(params[0::2], params[1::2])


def load_agent(path):
    arrays, meta = read_container(path, "checkpoint")
    kind = meta.get("agent_kind")
    if kind == "random":
        return RandomAgent(), meta
    if kind == "baseline":
        return BaselineAgent(meta["profiling_steps"]), meta
    if kind == "tabular":
        agent = TabularAgent(meta["alpha"], meta["gamma"])
        agent.epsilon = meta["epsilon"]
        for key, values in zip(arrays["table_keys"], arrays["table_values"]):
            agent.table[tuple(int(k) for k in key)] = values.copy()
        return agent, meta
    if kind == "dqn":
        cfg = DqnConfig(**meta["dqn_config"])
        # a tiny replay: checkpoints carry weights, not experience
        cfg_small = DqnConfig(**{**asdict(cfg), "replay_capacity": max(cfg.batch_size, 1)})
        agent = DqnAgent(meta["obs_shape"], cfg_small, np.random.default_rng(0),
                         obs_scale=meta["obs_scale"], schedule=EpsilonSchedule(**meta["schedule"]))
        agent.config = cfg
        agent.main = _mlp_from(arrays, "main_")
        agent.target = _mlp_from(arrays, "target_")
        opt = meta["optimizer"]
        agent.optimizer = OptimizerState(**opt)
        n_params = len(agent.main.params())
        if "adam_m_00" in arrays:
            agent.optimizer.m = [arrays[f"adam_m_{i:02d}"] for i in range(n_params)]
            agent.optimizer.v = [arrays[f"adam_v_{i:02d}"] for i in range(n_params)]
        agent.epsilon = meta["epsilon"]
        agent.train_steps = meta["train_steps"]
        agent.since_sync = meta["since_sync"]
        return agent, meta
    raise ValueError(f"checkpoint holds unknown agent kind {kind!r}")
