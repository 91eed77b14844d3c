"""User and content models, and the interaction rules that move user beliefs.

Every formula is written once as a numpy kernel that accepts scalars or arrays.
The scalar API (``UserState``, ``interact``) and the batched API
(``UserBatch``, ``interact_batch``) both route through those kernels, so a batch
of one user consumes the RNG stream identically to the scalar path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

import numpy as np

N_CATEGORIES = 7
MAX_RESAMPLES = 10_000


class PoliticsCategory(enum.IntEnum):
    """Discrete politics label of a content item, also the action space.

    Values are 0-based action indices; ``code`` gives the 1..7 label.
    """

    FAR_LEFT = 0
    LEFT = 1
    LEAN_LEFT = 2
    CENTER = 3
    LEAN_RIGHT = 4
    RIGHT = 5
    FAR_RIGHT = 6

    @property
    def code(self) -> int:
        return int(self) + 1

    @classmethod
    def from_code(cls, code: int) -> "PoliticsCategory":
        if not 1 <= code <= N_CATEGORIES:
            raise ValueError(f"category code must be in 1..7, got {code}")
        return cls(code - 1)

    @property
    def bounds(self) -> tuple[float, float]:
        return category_bounds(self)

    @property
    def label(self) -> str:
        return self.name.replace("_", " ").title()


def category_bounds(category: int) -> tuple[float, float]:
    """Bias interval ``[lo, hi]`` covered by a category (uniform 7-way split of [-1, 1])."""
    k = int(category)
    if not 0 <= k < N_CATEGORIES:
        raise ValueError(f"invalid category index {k}")
    return (2 * k - 7) / 7, (2 * k - 5) / 7


# interior cut points between consecutive categories
_CUTS = np.array([(2 * k - 7) / 7 for k in range(1, N_CATEGORIES)])
_LOWER = np.array([category_bounds(k)[0] for k in range(N_CATEGORIES)])
_UPPER = np.array([category_bounds(k)[1] for k in range(N_CATEGORIES)])


def category_of_bias(bias):
    """Map a bias (scalar or array) in [-1, 1] to its category index.

    A value sitting exactly on a cut point goes to the lower-index category.
    """
    b = np.asarray(bias, dtype=float)
    if np.any(np.isnan(b)) or np.any(b < -1.0) or np.any(b > 1.0):
        raise ValueError("bias must lie in [-1, 1]")
    idx = np.searchsorted(_CUTS, b, side="left")
    if idx.ndim == 0:
        return PoliticsCategory(int(idx))
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeliefDistributionParams:
    mu_left: float = -0.5
    sigma_left: float = 0.25
    mu_right: float = 0.3
    sigma_right: float = 0.3
    p_left: float = 0.55
    resample_bound: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.p_left <= 1.0:
            raise ValueError("p_left must be in [0, 1]")
        if self.sigma_left <= 0 or self.sigma_right <= 0:
            raise ValueError("sigmas must be positive")
        if not 0.0 < self.resample_bound <= 1.0:
            raise ValueError("resample_bound must be in (0, 1]")


@dataclass(frozen=True)
class UserGenParams:
    """Ranges for the per-user features drawn at creation."""

    pf_min: float = 1.8
    pf_max: float = 2.2
    malleability: float = 1.0
    om_min: float = 0.4
    om_max: float = 0.6
    rate_min: float = 1.01
    rate_max: float = 1.10

    def __post_init__(self):
        if not 0 < self.pf_min <= self.pf_max:
            raise ValueError("need 0 < pf_min <= pf_max")
        if self.malleability < 0:
            raise ValueError("malleability must be >= 0")
        if not 0 < self.om_min <= self.om_max:
            raise ValueError("need 0 < om_min <= om_max")
        if not 1.0 < self.rate_min <= self.rate_max:
            raise ValueError("need 1 < rate_min <= rate_max")


class SpreadMode(str, enum.Enum):
    EXPONENT = "exponent"
    MULTIPLIER = "multiplier"


class RateMode(str, enum.Enum):
    """When satisfaction growth/decay rates are drawn."""

    PER_INTERACTION = "per_interaction"
    PER_USER = "per_user"


@dataclass(frozen=True)
class InteractionParams:
    p_spread: float = 8.0
    p_max: float = 0.8
    satisfaction_threshold: float = 0.25
    engagement_increment: float = 0.05
    epsilon_div: float = 1e-8
    spread_mode: SpreadMode = SpreadMode.EXPONENT
    rate_mode: RateMode = RateMode.PER_INTERACTION
    rate_min: float = 1.01
    rate_max: float = 1.10

    def __post_init__(self):
        object.__setattr__(self, "spread_mode", SpreadMode(self.spread_mode))
        object.__setattr__(self, "rate_mode", RateMode(self.rate_mode))
        if not 1.0 < self.rate_min <= self.rate_max:
            raise ValueError("need 1 < rate_min <= rate_max")
        if self.p_spread <= 0:
            raise ValueError("p_spread must be positive")
        if not 0 < self.p_max <= 1:
            raise ValueError("p_max must be in (0, 1]")
        # 0 is accepted as the "attrition disabled" setting
        if not 0 <= self.satisfaction_threshold < 1:
            raise ValueError("satisfaction_threshold must be in [0, 1)")
        if not 0 < self.engagement_increment <= 1:
            raise ValueError("engagement_increment must be in (0, 1]")
        if self.spread_mode is SpreadMode.MULTIPLIER and self.p_max * self.p_spread > 1:
            raise ValueError("multiplier mode requires p_max * p_spread <= 1")


# ---------------------------------------------------------------------------
# users and content
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserState:
    belief: float
    polarization_factor: float
    malleability: float
    open_mindedness: float
    engagement: float = 0.0
    satisfaction: float = 1.0
    growth_rate: float = 1.05
    decay_rate: float = 1.05
    alive: bool = True


@dataclass(frozen=True)
class Content:
    category: PoliticsCategory
    bias: float


@dataclass(frozen=True)
class InteractionOutcome:
    clicked: bool
    attrited: bool
    belief_shift: float
    click_probability: float


USER_FIELDS = tuple(f.name for f in fields(UserState))


def sample_belief_component(
    params: BeliefDistributionParams, rng: np.random.Generator
) -> tuple[float, bool]:
    """Draw ``(belief, from_left)``.

    The mixture component is picked once; only the Gaussian draw is repeated
    until it lands within ``resample_bound``, so each component is truncated
    on its own and the component weights stay at ``p_left``.
    """
    left = bool(rng.random() < params.p_left)
    mu, sigma = (
        (params.mu_left, params.sigma_left) if left else (params.mu_right, params.sigma_right)
    )
    for _ in range(MAX_RESAMPLES):
        b = rng.normal(mu, sigma)
        if abs(b) <= params.resample_bound:
            return float(b), left
    raise RuntimeError(
        f"belief sampling exceeded {MAX_RESAMPLES} resamples; "
        "distribution has almost no mass inside the resample bound"
    )


def sample_user_belief(params: BeliefDistributionParams, rng: np.random.Generator) -> float:
    return sample_belief_component(params, rng)[0]


def create_user(
    belief_params: BeliefDistributionParams,
    user_params: UserGenParams,
    rng: np.random.Generator,
) -> UserState:
    belief = sample_user_belief(belief_params, rng)
    pf = rng.uniform(user_params.pf_min, user_params.pf_max)
    om = rng.uniform(user_params.om_min, user_params.om_max)
    growth = rng.uniform(user_params.rate_min, user_params.rate_max)
    decay = rng.uniform(user_params.rate_min, user_params.rate_max)
    return UserState(
        belief=belief,
        polarization_factor=float(pf),
        malleability=float(user_params.malleability),
        open_mindedness=float(om),
        engagement=0.0,
        satisfaction=1.0,
        growth_rate=float(growth),
        decay_rate=float(decay),
        alive=True,
    )


def sample_content(category: int, rng: np.random.Generator) -> Content:
    lo, hi = category_bounds(category)
    return Content(PoliticsCategory(int(category)), float(rng.uniform(lo, hi)))


def sample_bias_batch(categories: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    categories = np.asarray(categories, dtype=np.int64)
    return rng.uniform(_LOWER[categories], _UPPER[categories])


# ---------------------------------------------------------------------------
# kernels (scalar or array)
# ---------------------------------------------------------------------------


def _extremes_decay(belief, d):
    return np.where(d * (1.0 - d * d) * belief > 0, 1.0 - belief * belief, 1.0)


def _shift(belief, bias, pf, malleability, engagement):
    d = bias - belief
    core = d * (1.0 - d * d)
    return core / (pf * pf) * malleability * engagement * _extremes_decay(belief, d)


def _click_probability(belief, bias, om, params: InteractionParams):
    d = np.abs(bias - belief)
    # argument is >= 0 because open-mindedness is positive, so exp cannot overflow
    s = 1.0 / (1.0 + np.exp(-om / (d + params.epsilon_div)))
    if params.spread_mode is SpreadMode.EXPONENT:
        return params.p_max * s**params.p_spread
    return params.p_max * params.p_spread * s


def _attrition_probability(satisfaction, threshold):
    if threshold <= 0:
        return np.zeros_like(np.asarray(satisfaction, dtype=float))
    return np.where(satisfaction < threshold, 1.0 - satisfaction / threshold, 0.0)


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------


def dissonance(user: UserState, content: Content) -> float:
    return content.bias - user.belief


def extremes_decay(user: UserState, d: float) -> float:
    return float(_extremes_decay(user.belief, d))


def opinion_shift(user: UserState, content: Content) -> tuple[float, float]:
    """Return ``(new_belief, shift)``; the new belief is clamped to [-1, 1]."""
    shift = float(
        _shift(
            user.belief,
            content.bias,
            user.polarization_factor,
            user.malleability,
            user.engagement,
        )
    )
    return float(np.clip(user.belief + shift, -1.0, 1.0)), shift


def click_probability(user: UserState, content: Content, params: InteractionParams) -> float:
    return float(_click_probability(user.belief, content.bias, user.open_mindedness, params))


def update_engagement(user: UserState, clicked: bool, params: InteractionParams) -> UserState:
    if not clicked:
        return user
    return replace(user, engagement=min(1.0, user.engagement + params.engagement_increment))


def update_satisfaction(user: UserState, clicked: bool) -> UserState:
    if clicked:
        return replace(user, satisfaction=min(1.0, user.satisfaction * user.growth_rate))
    return replace(user, satisfaction=user.satisfaction / user.decay_rate)


def attrition_probability(user: UserState, params: InteractionParams) -> float:
    return float(_attrition_probability(user.satisfaction, params.satisfaction_threshold))


def interact(
    user: UserState,
    content: Content,
    params: InteractionParams,
    rng: np.random.Generator,
) -> tuple[UserState, InteractionOutcome]:
    """Expose one user to one item.

    Order: click probability on the incoming state, click draw, engagement
    update, belief shift (applied whether or not the item was clicked, using the
    post-click engagement), fresh growth/decay rates when ``rate_mode`` is
    per-interaction, satisfaction update, attrition draw.
    """
    if not user.alive:
        raise ValueError("cannot interact with a user who has left the platform")
    p = click_probability(user, content, params)
    clicked = bool(rng.random() < p)
    user = update_engagement(user, clicked, params)
    new_belief, shift = opinion_shift(user, content)
    user = replace(user, belief=new_belief)
    if params.rate_mode is RateMode.PER_INTERACTION:
        growth = float(rng.uniform(params.rate_min, params.rate_max))
        decay = float(rng.uniform(params.rate_min, params.rate_max))
        user = replace(user, growth_rate=growth, decay_rate=decay)
    user = update_satisfaction(user, clicked)
    attrited = bool(rng.random() < attrition_probability(user, params))
    if attrited:
        user = replace(user, alive=False)
    return user, InteractionOutcome(clicked, attrited, shift, p)


# ---------------------------------------------------------------------------
# batched users
# ---------------------------------------------------------------------------


@dataclass
class UserBatch:
    """Struct-of-arrays view of many users; mutated in place by ``interact_batch``."""

    belief: np.ndarray
    polarization_factor: np.ndarray
    malleability: np.ndarray
    open_mindedness: np.ndarray
    engagement: np.ndarray
    satisfaction: np.ndarray
    growth_rate: np.ndarray
    decay_rate: np.ndarray
    alive: np.ndarray

    def __len__(self) -> int:
        return len(self.belief)

    @classmethod
    def from_users(cls, users) -> "UserBatch":
        users = list(users)
        cols = {}
        for name in USER_FIELDS:
            dtype = bool if name == "alive" else float
            cols[name] = np.array([getattr(u, name) for u in users], dtype=dtype)
        return cls(**cols)

    @classmethod
    def create(
        cls,
        n: int,
        belief_params: BeliefDistributionParams,
        user_params: UserGenParams,
        rng: np.random.Generator,
    ) -> "UserBatch":
        return cls.from_users(create_user(belief_params, user_params, rng) for _ in range(n))

    def user(self, i: int) -> UserState:
        kw = {name: getattr(self, name)[i].item() for name in USER_FIELDS}
        return UserState(**kw)

    def users(self) -> list[UserState]:
        return [self.user(i) for i in range(len(self))]

    def set_user(self, i: int, user: UserState) -> None:
        for name in USER_FIELDS:
            getattr(self, name)[i] = getattr(user, name)

    def copy(self) -> "UserBatch":
        return UserBatch(**{name: getattr(self, name).copy() for name in USER_FIELDS})


@dataclass
class BatchOutcome:
    clicked: np.ndarray
    attrited: np.ndarray
    belief_shift: np.ndarray
    click_probability: np.ndarray


def interact_batch(
    users: UserBatch,
    idx: np.ndarray,
    bias: np.ndarray,
    params: InteractionParams,
    rng: np.random.Generator,
) -> BatchOutcome:
    """Vectorized ``interact`` for the users at positions ``idx`` (same update order)."""
    idx = np.asarray(idx, dtype=np.int64)
    if not np.all(users.alive[idx]):
        raise ValueError("cannot interact with a user who has left the platform")
    belief = users.belief[idx]
    p = _click_probability(belief, bias, users.open_mindedness[idx], params)
    clicked = rng.random(len(idx)) < p

    engagement = np.where(
        clicked,
        np.minimum(1.0, users.engagement[idx] + params.engagement_increment),
        users.engagement[idx],
    )
    shift = _shift(belief, bias, users.polarization_factor[idx], users.malleability[idx], engagement)
    new_belief = np.clip(belief + shift, -1.0, 1.0)

    if params.rate_mode is RateMode.PER_INTERACTION:
        users.growth_rate[idx] = rng.uniform(params.rate_min, params.rate_max, len(idx))
        users.decay_rate[idx] = rng.uniform(params.rate_min, params.rate_max, len(idx))
    sat = users.satisfaction[idx]
    sat = np.where(
        clicked,
        np.minimum(1.0, sat * users.growth_rate[idx]),
        sat / users.decay_rate[idx],
    )
    attrited = rng.random(len(idx)) < _attrition_probability(sat, params.satisfaction_threshold)

    users.engagement[idx] = engagement
    users.belief[idx] = new_belief
    users.satisfaction[idx] = sat
    users.alive[idx] = ~attrited
    return BatchOutcome(clicked, attrited, np.asarray(shift, dtype=float), np.asarray(p, dtype=float))
