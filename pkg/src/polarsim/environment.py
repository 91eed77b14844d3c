"""Episodic recommendation environment: one user per episode, one item per step.

``RecEnv`` is the single-episode reference implementation built on the scalar
dynamics API. ``VecRecEnv`` steps many users at once with the batched kernels
and is what training and evaluation use; with one slot it reproduces
``RecEnv`` draw for draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    N_CATEGORIES,
    BeliefDistributionParams,
    InteractionParams,
    PoliticsCategory,
    UserBatch,
    UserGenParams,
    UserState,
    create_user,
    interact,
    interact_batch,
    sample_bias_batch,
    sample_content,
)

OBS_WIDTH = N_CATEGORIES + 1
N_FEATURES = 2 * N_CATEGORIES

REWARD_PRESETS = {
    "uniform": (1.0,) * 7,
    "polarizing": (1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0),
    "depolarizing": (0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class RewardScheme:
    click_rewards: tuple[float, ...] = REWARD_PRESETS["uniform"]
    attrition_penalty: float = -1.0
    survival_bonus: float = 0.0

    def __post_init__(self):
        rewards = tuple(float(r) for r in self.click_rewards)
        if len(rewards) != N_CATEGORIES:
            raise ValueError("click_rewards needs one value per category (7)")
        if not all(np.isfinite(rewards + (self.attrition_penalty, self.survival_bonus))):
            raise ValueError("rewards must be finite")
        object.__setattr__(self, "click_rewards", rewards)

    @classmethod
    def preset(cls, name: str, **kw) -> "RewardScheme":
        try:
            return cls(REWARD_PRESETS[name], **kw)
        except KeyError:
            raise ValueError(
                f"unknown reward scheme {name!r}; expected one of {sorted(REWARD_PRESETS)}"
            ) from None


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 100
    user_lifespan: int = 500
    reward_scheme: RewardScheme = field(default_factory=RewardScheme)
    belief: BeliefDistributionParams = field(default_factory=BeliefDistributionParams)
    user: UserGenParams = field(default_factory=UserGenParams)
    interaction: InteractionParams = field(default_factory=InteractionParams)
    observation_mode: str = "aggregate"

    def __post_init__(self):
        if self.horizon < 1 or self.user_lifespan < 1:
            raise ValueError("horizon and user_lifespan must be >= 1")
        if self.observation_mode not in ("matrix", "aggregate"):
            raise ValueError("observation_mode must be 'matrix' or 'aggregate'")

    def with_(self, **kw) -> "EnvConfig":
        return replace(self, **kw)

    @property
    def observation_shape(self) -> tuple[int, ...]:
        if self.observation_mode == "matrix":
            return (self.horizon, OBS_WIDTH)
        return (N_FEATURES,)


# ---------------------------------------------------------------------------
# observation encoders
# ---------------------------------------------------------------------------


def encode_observation(history, horizon: int) -> np.ndarray:
    """Encode ``(category, clicked)`` pairs as a ``horizon x 8`` 0/1 matrix.

    The newest interaction is the last row; unused leading rows are zero.
    """
    obs = np.zeros((horizon, OBS_WIDTH), dtype=np.uint8)
    recent = list(history)[-horizon:]
    offset = horizon - len(recent)
    for row, (category, clicked) in enumerate(recent, start=offset):
        obs[row, int(category)] = 1
        obs[row, N_CATEGORIES] = 1 if clicked else 0
    return obs


def aggregate_features(history, horizon: int) -> np.ndarray:
    """Per-category recommendation counts followed by per-category click counts."""
    counts = np.zeros(N_FEATURES, dtype=np.int64)
    for category, clicked in list(history)[-horizon:]:
        counts[int(category)] += 1
        if clicked:
            counts[N_CATEGORIES + int(category)] += 1
    return counts


def features_from_matrix(obs: np.ndarray) -> np.ndarray:
    """Aggregate counts recovered from observation matrices (``(..., H, 8)``)."""
    recs = obs[..., :N_CATEGORIES].sum(axis=-2)
    clicks = (obs[..., :N_CATEGORIES] * obs[..., N_CATEGORIES:]).sum(axis=-2)
    return np.concatenate([recs, clicks], axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# single-user environment
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class RecEnv:
    """One simulated user per episode; actions are category indices 0..6."""

    n_actions = N_CATEGORIES

    def __init__(self, config: EnvConfig | None = None, rng=None):
        self.config = config or EnvConfig()
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.user: UserState | None = None
        self.history: list[tuple[int, bool]] = []
        self.step_index = 0
        self.done = True

    def observe(self) -> np.ndarray:
        if self.config.observation_mode == "matrix":
            return encode_observation(self.history, self.config.horizon)
        return aggregate_features(self.history, self.config.horizon)

    def reset(self, rng=None) -> np.ndarray:
        if rng is not None:
            self.rng = rng
        cfg = self.config
        self.user = create_user(cfg.belief, cfg.user, self.rng)
        self.initial_belief = self.user.belief
        self.history = []
        self.step_index = 0
        self.done = False
        return self.observe()

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        action = PoliticsCategory(int(action))
        cfg = self.config
        content = sample_content(action, self.rng)
        self.user, outcome = interact(self.user, content, cfg.interaction, self.rng)
        self.step_index += 1
        self.history.append((int(action), outcome.clicked))

        scheme = cfg.reward_scheme
        reward = scheme.click_rewards[action] if outcome.clicked else 0.0
        truncated = self.step_index >= cfg.user_lifespan and not outcome.attrited
        if outcome.attrited:
            reward += scheme.attrition_penalty
        if truncated:
            reward += scheme.survival_bonus
        self.done = outcome.attrited or truncated
        info = {
            "clicked": outcome.clicked,
            "attrited": outcome.attrited,
            "truncated": truncated,
            "step_index": self.step_index,
            "user_belief": self.user.belief,
            "belief_shift": outcome.belief_shift,
            "click_probability": outcome.click_probability,
            "bias": content.bias,
        }
        return StepResult(self.observe(), float(reward), self.done, info)


# ---------------------------------------------------------------------------
# batched environment
# ---------------------------------------------------------------------------


@dataclass
class VecStep:
    """Per-slot results of one ``VecRecEnv.step``; inactive slots carry zeros."""

    observation: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    stepped: np.ndarray
    clicked: np.ndarray
    attrited: np.ndarray
    truncated: np.ndarray
    belief_shift: np.ndarray


class VecRecEnv:
    """``n`` independent episodes advanced together.

    Slots whose episode ended stay inactive until ``reset(idx)`` draws a new
    user for them. Passing ``users`` pins the population (evaluation); those
    slots are never refilled unless ``reset`` is called explicitly.
    """

    n_actions = N_CATEGORIES

    def __init__(
        self,
        config: EnvConfig,
        n_envs: int,
        rng: np.random.Generator,
        users: UserBatch | None = None,
    ):
        self.config = config
        self.rng = rng
        self.n = n_envs if users is None else len(users)
        h = config.horizon
        self.hist_actions = np.full((self.n, h), -1, dtype=np.int8)
        self.hist_clicks = np.zeros((self.n, h), dtype=np.uint8)
        self.counts = np.zeros((self.n, N_FEATURES), dtype=np.int64)
        self.steps = np.zeros(self.n, dtype=np.int64)
        if users is None:
            self.users = UserBatch.create(self.n, config.belief, config.user, rng)
        else:
            self.users = users.copy()
        self.initial_belief = self.users.belief.copy()
        self.active = self.users.alive.copy()
        self._click_rewards = np.asarray(config.reward_scheme.click_rewards)

    def reset(self, idx) -> None:
        cfg = self.config
        for i in np.asarray(idx, dtype=np.int64):
            user = create_user(cfg.belief, cfg.user, self.rng)
            self.users.set_user(i, user)
            self.initial_belief[i] = user.belief
        self.hist_actions[idx] = -1
        self.hist_clicks[idx] = 0
        self.counts[idx] = 0
        self.steps[idx] = 0
        self.active[idx] = True

    def observe(self, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        if self.config.observation_mode == "aggregate":
            return self.counts[sl].copy()
        acts = self.hist_actions[sl]
        obs = np.zeros(acts.shape + (OBS_WIDTH,), dtype=np.uint8)
        filled = acts >= 0
        rows, cols = np.nonzero(filled)
        obs[rows, cols, acts[rows, cols]] = 1
        obs[..., N_CATEGORIES] = self.hist_clicks[sl]
        return obs

    def step(self, actions) -> VecStep:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n,):
            raise ValueError(f"expected {self.n} actions, got shape {actions.shape}")
        idx = np.flatnonzero(self.active)
        a = actions[idx]
        if np.any((a < 0) | (a >= N_CATEGORIES)):
            raise ValueError("actions must be category indices 0..6")
        cfg = self.config
        bias = sample_bias_batch(a, self.rng)
        out = interact_batch(self.users, idx, bias, cfg.interaction, self.rng)

        # sliding window bookkeeping
        h = cfg.horizon
        full = idx[self.steps[idx] >= h]
        if len(full):
            old_a = self.hist_actions[full, 0].astype(np.int64)
            self.counts[full, old_a] -= 1
            self.counts[full, N_CATEGORIES + old_a] -= self.hist_clicks[full, 0]
        self.hist_actions[idx, :-1] = self.hist_actions[idx, 1:]
        self.hist_clicks[idx, :-1] = self.hist_clicks[idx, 1:]
        self.hist_actions[idx, -1] = a
        self.hist_clicks[idx, -1] = out.clicked
        self.counts[idx, a] += 1
        self.counts[idx, N_CATEGORIES + a] += out.clicked
        self.steps[idx] += 1

        scheme = cfg.reward_scheme
        truncated_i = (self.steps[idx] >= cfg.user_lifespan) & ~out.attrited
        reward_i = np.where(out.clicked, self._click_rewards[a], 0.0)
        reward_i = reward_i + scheme.attrition_penalty * out.attrited
        reward_i = reward_i + scheme.survival_bonus * truncated_i
        done_i = out.attrited | truncated_i
        self.active[idx[done_i]] = False

        def spread(values, dtype):
            full_arr = np.zeros(self.n, dtype=dtype)
            full_arr[idx] = values
            return full_arr

        stepped = np.zeros(self.n, dtype=bool)
        stepped[idx] = True
        return VecStep(
            observation=self.observe(),
            reward=spread(reward_i, float),
            done=spread(done_i, bool),
            stepped=stepped,
            clicked=spread(out.clicked, bool),
            attrited=spread(out.attrited, bool),
            truncated=spread(truncated_i, bool),
            belief_shift=spread(out.belief_shift, float),
        )
