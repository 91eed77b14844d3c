import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from polarsim.dynamics import (
    BeliefDistributionParams,
    Content,
    InteractionParams,
    PoliticsCategory,
    UserBatch,
    UserGenParams,
    UserState,
    attrition_probability,
    category_bounds,
    category_of_bias,
    click_probability,
    create_user,
    dissonance,
    extremes_decay,
    interact,
    interact_batch,
    opinion_shift,
    sample_belief_component,
    sample_bias_batch,
    sample_content,
    sample_user_belief,
    update_engagement,
    update_satisfaction,
)

C = PoliticsCategory
ATOL = 1e-9


def user(**kw):
    base = dict(belief=0.0, polarization_factor=2.0, malleability=1.0, open_mindedness=0.5)
    base.update(kw)
    return UserState(**base)


def truncated_below_zero(mu, sigma, bound):
    """P(b < 0) for N(mu, sigma) resampled onto [-bound, bound]."""
    inside = norm.cdf(bound, mu, sigma) - norm.cdf(-bound, mu, sigma)
    return (norm.cdf(0, mu, sigma) - norm.cdf(-bound, mu, sigma)) / inside


class StubRng:
    """Replays fixed uniforms so every branch of ``interact`` can be forced."""

    def __init__(self, randoms, uniforms=()):
        self.randoms = list(randoms)
        self.uniforms = list(uniforms)

    def random(self, *a):
        return self.randoms.pop(0)

    def uniform(self, lo, hi, *a):
        return self.uniforms.pop(0)


# --- categories and content ------------------------------------------------


def test_category_intervals_partition_the_axis():
    edges = [category_bounds(k) for k in range(7)]
    assert edges[0][0] == -1.0 and edges[-1][1] == 1.0
    for (lo, hi), (lo2, _) in zip(edges, edges[1:]):
        assert hi == pytest.approx(lo2, abs=1e-15)
        assert hi - lo == pytest.approx(2 / 7, abs=1e-15)


def test_category_codes_are_one_based():
    assert [c.code for c in C] == list(range(1, 8))
    assert C.from_code(4) is C.CENTER
    assert C.FAR_LEFT.label == "Far Left"


@pytest.mark.parametrize(
    "bias, expected",
    [(0.0, C.CENTER), (-0.9, C.FAR_LEFT), (3 / 7, C.LEAN_RIGHT), (-1.0, C.FAR_LEFT),
     (1.0, C.FAR_RIGHT), (1 / 7, C.CENTER), (-5 / 7, C.FAR_LEFT)],
)
def test_category_of_bias(bias, expected):
    assert category_of_bias(bias) is expected


def test_category_of_bias_vectorized_and_range_checked():
    out = category_of_bias(np.array([-0.9, 0.0, 3 / 7]))
    assert out.tolist() == [0, 3, 4]
    with pytest.raises(ValueError):
        category_of_bias(1.01)


def test_far_left_and_center_content_ranges():
    rng = np.random.default_rng(1)
    far = [sample_content(C.FAR_LEFT, rng).bias for _ in range(2000)]
    center = [sample_content(C.CENTER, rng).bias for _ in range(2000)]
    assert min(far) >= -1.0 and max(far) <= -5 / 7
    assert min(center) >= -1 / 7 and max(center) <= 1 / 7


def test_right_content_mean():
    rng = np.random.default_rng(2)
    mean = np.mean([sample_content(C.RIGHT, rng).bias for _ in range(10_000)])
    assert abs(mean - 4 / 7) < 0.01


# --- belief sampling -------------------------------------------------------


def test_belief_left_fraction_matches_oracle():
    # The bimodal sampler picks a component once and resamples only its draw,
    # so P(b<0) is the mixture of the two truncated components.
    p = BeliefDistributionParams()
    oracle = 0.55 * truncated_below_zero(-0.5, 0.25, 0.8) + 0.45 * truncated_below_zero(0.3, 0.3, 0.8)
    assert oracle == pytest.approx(0.6108, abs=1e-4)
    rng = np.random.default_rng(3)
    b = np.array([sample_user_belief(p, rng) for _ in range(100_000)])
    assert abs(np.mean(b < 0) - oracle) < 0.01


def test_belief_fraction_when_sigmas_are_variances():
    # 0.25 and 0.3 read as variances give standard deviations 0.5 and sqrt(0.3)
    p = BeliefDistributionParams(sigma_left=0.5, sigma_right=math.sqrt(0.3))
    rng = np.random.default_rng(4)
    b = np.array([sample_user_belief(p, rng) for _ in range(100_000)])
    assert abs(np.mean(b < 0) - 0.586) < 0.01


def test_belief_bound_and_component_fraction():
    p = BeliefDistributionParams()
    rng = np.random.default_rng(5)
    draws = [sample_belief_component(p, rng) for _ in range(20_000)]
    b = np.array([d[0] for d in draws])
    left = np.array([d[1] for d in draws])
    assert np.all(np.abs(b) <= 0.8)
    assert abs(left.mean() - 0.55) < 0.015


def test_degenerate_single_component():
    p = BeliefDistributionParams(p_left=1.0, sigma_left=0.001)
    rng = np.random.default_rng(6)
    b = np.array([sample_user_belief(p, rng) for _ in range(1000)])
    assert np.allclose(b, -0.5, atol=0.01)


def test_unreachable_bound_raises():
    p = BeliefDistributionParams(mu_left=5.0, mu_right=5.0, sigma_left=0.01, sigma_right=0.01)
    with pytest.raises(RuntimeError):
        sample_user_belief(p, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(
    mu_l=st.floats(-0.3, 0.3), mu_r=st.floats(-0.3, 0.3), s_l=st.floats(0.05, 1), s_r=st.floats(0.05, 1),
    p=st.floats(0, 1), bound=st.floats(0.3, 1), seed=st.integers(0, 2**32 - 1),
)
def test_belief_always_within_bound(mu_l, mu_r, s_l, s_r, p, bound, seed):
    params = BeliefDistributionParams(mu_l, s_l, mu_r, s_r, p, bound)
    v = sample_user_belief(params, np.random.default_rng(seed))
    assert abs(v) <= bound


# --- user creation -----------------------------------------------------------


def test_created_users_start_fresh():
    rng = np.random.default_rng(7)
    for _ in range(500):
        u = create_user(BeliefDistributionParams(), UserGenParams(), rng)
        assert u.engagement == 0.0 and u.satisfaction == 1.0 and u.alive
        assert 1.01 <= u.growth_rate <= 1.10 and 1.01 <= u.decay_rate <= 1.10
        assert 1.8 <= u.polarization_factor <= 2.2 and 0.4 <= u.open_mindedness <= 0.6
        assert u.malleability == 1.0


def test_zero_malleability_never_shifts():
    rng = np.random.default_rng(8)
    for _ in range(100):
        u = replace(create_user(BeliefDistributionParams(), UserGenParams(malleability=0.0), rng), engagement=1.0)
        _, shift = opinion_shift(u, sample_content(int(rng.integers(7)), rng))
        assert shift == 0.0


# --- shift arithmetic --------------------------------------------------------


def test_dissonance():
    assert dissonance(user(belief=0.2), Content(C.LEAN_RIGHT, 0.5)) == pytest.approx(0.3, abs=ATOL)
    assert dissonance(user(belief=0.5), Content(C.FAR_LEFT, -1.0)) == pytest.approx(-1.5, abs=ATOL)
    assert dissonance(user(belief=0.3), Content(C.LEAN_RIGHT, 0.3)) == 0.0


def test_extremes_decay():
    assert extremes_decay(user(belief=0.5), 0.3) == pytest.approx(0.75, abs=ATOL)
    assert extremes_decay(user(belief=0.5), -0.3) == 1.0
    assert extremes_decay(user(belief=0.0), 0.7) == 1.0


def test_opinion_shift_attraction():
    u = user(belief=0.2, engagement=0.5)
    d = 0.5 - 0.2
    expected = d * (1 - d * d) / 4 * 0.5 * (1 - 0.2 * 0.2)
    new, shift = opinion_shift(u, Content(C.LEAN_RIGHT, 0.5))
    assert shift == pytest.approx(expected, abs=ATOL)
    assert shift == pytest.approx(0.03276, abs=ATOL)
    assert new == pytest.approx(0.23276, abs=ATOL)


def test_opinion_shift_repulsion():
    u = user(belief=0.5, engagement=1.0)
    new, shift = opinion_shift(u, Content(C.FAR_LEFT, -1.0))
    assert shift == pytest.approx(1.875 / 4 * 0.75, abs=ATOL)
    assert shift == pytest.approx(0.3515625, abs=ATOL)
    assert new == pytest.approx(0.8515625, abs=ATOL)


def test_opinion_shift_zero_cases():
    assert opinion_shift(user(belief=0.3, engagement=0.0), Content(C.FAR_LEFT, -0.9))[1] == 0.0
    assert opinion_shift(user(belief=-0.25, engagement=1.0), Content(C.RIGHT, 0.75))[1] == pytest.approx(0.0, abs=1e-15)


def test_belief_is_clamped():
    u = user(belief=0.99, engagement=1.0, polarization_factor=0.5)
    new, shift = opinion_shift(u, Content(C.FAR_LEFT, -1.0))
    assert shift > 0.01 and new == 1.0


# --- click probability -------------------------------------------------------


def test_click_probability_exponent_mode():
    u = user(belief=-1.0, open_mindedness=0.5)
    p = click_probability(u, Content(C.FAR_RIGHT, 1.0), InteractionParams())
    s = 1 / (1 + math.exp(-0.5 / (2 + 1e-8)))
    assert p == pytest.approx(0.8 * s**8, abs=ATOL)
    assert s == pytest.approx(0.5622, abs=1e-4)
    assert p == pytest.approx(0.00798, abs=5e-5)


def test_click_probability_matched_belief_saturates():
    u = user(belief=0.3, open_mindedness=0.4)
    c = Content(C.LEAN_RIGHT, 0.3)
    assert click_probability(u, c, InteractionParams()) == pytest.approx(0.8, abs=ATOL)
    multi = InteractionParams(spread_mode="multiplier", p_spread=1.2)
    assert click_probability(u, c, multi) == pytest.approx(0.8 * 1.2, abs=ATOL)


def test_click_probability_multiplier_mode_value():
    params = InteractionParams(spread_mode="multiplier", p_spread=1.0, p_max=0.8)
    u = user(belief=-1.0, open_mindedness=0.5)
    s = 1 / (1 + math.exp(-0.5 / (2 + 1e-8)))
    assert click_probability(u, Content(C.FAR_RIGHT, 1.0), params) == pytest.approx(0.8 * s, abs=ATOL)


@settings(max_examples=60, deadline=None)
@given(d1=st.floats(0, 2), d2=st.floats(0, 2), om=st.floats(0.05, 2))
def test_click_probability_monotone_in_distance(d1, d2, om):
    lo, hi = sorted((d1, d2))
    u = user(belief=0.0, open_mindedness=om)
    p_near = click_probability(u, Content(C.CENTER, lo), InteractionParams())
    p_far = click_probability(u, Content(C.CENTER, hi), InteractionParams())
    assert p_near >= p_far


# --- engagement, satisfaction, attrition -------------------------------------


def test_engagement_updates():
    params = InteractionParams()
    assert update_engagement(user(engagement=0.0), True, params).engagement == pytest.approx(0.05, abs=ATOL)
    assert update_engagement(user(engagement=0.98), True, params).engagement == 1.0
    u = user(engagement=0.3)
    assert update_engagement(u, False, params) == u


def test_satisfaction_updates():
    assert update_satisfaction(user(satisfaction=1.0, growth_rate=1.05), True).satisfaction == 1.0
    s = update_satisfaction(user(satisfaction=0.5, decay_rate=1.05), False).satisfaction
    assert s == pytest.approx(0.5 / 1.05, abs=ATOL)
    assert s == pytest.approx(0.47619, abs=1e-5)


@pytest.mark.parametrize("k", [1, 5, 17, 40])
def test_consecutive_non_clicks_closed_form(k):
    u = user(satisfaction=1.0, decay_rate=1.07)
    for _ in range(k):
        u = update_satisfaction(u, False)
    assert u.satisfaction == pytest.approx(1.07 ** (-k), abs=ATOL)


def test_attrition_probability():
    params = InteractionParams(satisfaction_threshold=0.25)
    assert attrition_probability(user(satisfaction=0.25), params) == 0.0
    assert attrition_probability(user(satisfaction=0.9), params) == 0.0
    assert attrition_probability(user(satisfaction=0.125), params) == pytest.approx(0.5, abs=ATOL)
    assert attrition_probability(user(satisfaction=1e-12), params) == pytest.approx(1.0, abs=1e-9)
    assert attrition_probability(user(satisfaction=0.01), InteractionParams(satisfaction_threshold=0.0)) == 0.0


# --- interaction order ------------------------------------------------------


def test_fresh_user_non_click_path():
    u = user(belief=0.1, decay_rate=1.05)
    params = InteractionParams(rate_mode="per_user")
    out_user, outcome = interact(u, Content(C.FAR_RIGHT, 0.9), params, StubRng([0.999, 0.999]))
    assert not outcome.clicked
    assert out_user.belief == 0.1
    assert out_user.satisfaction == pytest.approx(1 / 1.05, abs=ATOL)


def test_click_raises_engagement_before_shift():
    u = user(belief=0.2, polarization_factor=2.0, engagement=0.0)
    params = InteractionParams(rate_mode="per_user")
    out_user, outcome = interact(u, Content(C.LEAN_RIGHT, 0.5), params, StubRng([0.0, 0.999]))
    assert outcome.clicked
    d = 0.3
    # shift uses engagement 0.05 (after the click), not the incoming 0
    expected = d * (1 - d * d) / 4 * 0.05 * (1 - 0.04)
    assert outcome.belief_shift == pytest.approx(expected, abs=ATOL)
    assert out_user.engagement == pytest.approx(0.05, abs=ATOL)


def test_per_interaction_rates_drawn_before_satisfaction():
    u = user(satisfaction=0.5, decay_rate=1.01)
    out_user, o = interact(u, Content(C.CENTER, 0.0), InteractionParams(), StubRng([0.999, 0.999], [1.02, 1.08]))
    assert not o.clicked
    assert out_user.growth_rate == 1.02 and out_user.decay_rate == 1.08
    assert out_user.satisfaction == pytest.approx(0.5 / 1.08, abs=ATOL)


def test_attrition_draw_uses_post_update_satisfaction():
    u = user(satisfaction=0.2, decay_rate=1.0 + 1e-12)
    params = InteractionParams(rate_mode="per_user")
    # p_attrit = 1 - 0.2/0.25 = 0.2; a draw of 0.19 churns, 0.21 does not
    _, o1 = interact(u, Content(C.FAR_RIGHT, 1.0), params, StubRng([0.999, 0.19]))
    _, o2 = interact(u, Content(C.FAR_RIGHT, 1.0), params, StubRng([0.999, 0.21]))
    assert o1.attrited and not o2.attrited


def test_satisfied_users_never_attrite():
    rng = np.random.default_rng(9)
    u = user(satisfaction=1.0, growth_rate=1.1, decay_rate=1.01)
    params = InteractionParams(rate_mode="per_user")
    for _ in range(100):
        u2, o = interact(u, Content(C.CENTER, 0.0), params, rng)
        assert not o.attrited
        u = replace(u2, satisfaction=max(u2.satisfaction, 0.5))


def test_dead_user_cannot_interact():
    with pytest.raises(ValueError):
        interact(user(alive=False), Content(C.CENTER, 0.0), InteractionParams(), np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), steps=st.integers(1, 60), mode=st.sampled_from(["exponent", "multiplier"]))
def test_state_invariants_hold(seed, steps, mode):
    rng = np.random.default_rng(seed)
    params = InteractionParams(spread_mode=mode, p_spread=1.0 if mode == "multiplier" else 8.0)
    u = create_user(BeliefDistributionParams(), UserGenParams(), rng)
    for _ in range(steps):
        if not u.alive:
            break
        u, o = interact(u, sample_content(int(rng.integers(7)), rng), params, rng)
        assert -1.0 <= u.belief <= 1.0
        assert 0.0 <= u.engagement <= 1.0
        assert 0.0 < u.satisfaction <= 1.0
        assert 0.0 <= o.click_probability <= 1.0


def test_batch_of_one_consumes_rng_like_scalar():
    params = InteractionParams()
    r1, r2 = np.random.default_rng(10), np.random.default_rng(10)
    u = create_user(BeliefDistributionParams(), UserGenParams(), r1)
    batch = UserBatch.create(1, BeliefDistributionParams(), UserGenParams(), r2)
    assert batch.user(0) == u
    for step in range(200):
        if not u.alive:
            break
        a = step % 7
        c = sample_content(a, r1)
        u, o = interact(u, c, params, r1)
        bias = sample_bias_batch(np.array([a]), r2)
        ob = interact_batch(batch, np.array([0]), bias, params, r2)
        assert bias[0] == c.bias
        assert batch.user(0) == u
        assert bool(ob.clicked[0]) == o.clicked and bool(ob.attrited[0]) == o.attrited
    assert r1.random() == r2.random()


def test_batch_matches_scalar_per_user():
    # per-user parity of the vectorized kernels on many users at once
    rng = np.random.default_rng(11)
    users = [replace(create_user(BeliefDistributionParams(), UserGenParams(), rng),
                     engagement=float(rng.random()), satisfaction=float(rng.uniform(0.3, 1)))
             for _ in range(300)]
    bias = rng.uniform(-1, 1, 300)
    batch = UserBatch.from_users(users)
    params = InteractionParams(rate_mode="per_user", satisfaction_threshold=0.0)
    ob = interact_batch(batch, np.arange(300), bias, params, np.random.default_rng(12))
    for i, u in enumerate(users):
        p = click_probability(u, Content(category_of_bias(bias[i]), bias[i]), params)
        assert ob.click_probability[i] == pytest.approx(p, abs=1e-15)
        u2 = update_engagement(u, bool(ob.clicked[i]), params)
        new_b, shift = opinion_shift(u2, Content(category_of_bias(bias[i]), bias[i]))
        assert batch.belief[i] == pytest.approx(new_b, abs=1e-15)
        assert batch.satisfaction[i] == pytest.approx(update_satisfaction(u2, bool(ob.clicked[i])).satisfaction, abs=1e-15)


def test_param_validation():
    with pytest.raises(ValueError):
        BeliefDistributionParams(p_left=1.5)
    with pytest.raises(ValueError):
        InteractionParams(p_max=0.0)
    with pytest.raises(ValueError):
        InteractionParams(spread_mode="multiplier", p_spread=8.0)
    with pytest.raises(ValueError):
        UserGenParams(rate_min=0.9)
