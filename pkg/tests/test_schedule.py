import math

import numpy as np
import pytest

from detprior.schedule import (
    ALPHA_BAR_MAX,
    ALPHA_BAR_MIN,
    AlphaBarSchedule,
    TimestepPlan,
    inference_timesteps,
    make_schedule,
)

# cos^2(((t/T + s)/(1+s)) * pi/2) / cos^2(s*pi/(2(1+s))), s=0.008, clamped;
# frozen from an independent evaluation of the closed form (scratch script).
COSINE_T10 = [
    0.99999,
    0.972092737113969,
    0.8987059205995089,
    0.7869105111508292,
    0.6474782111465038,
    0.49384359044063775,
    0.3408096397593241,
    0.2031214741183376,
    0.09404561267665379,
    0.024091724140085854,
    1e-05,
]


def test_cosine_endpoints():
    sched = make_schedule("cosine", 1000)
    assert sched.alpha_bar(0) >= 1 - 1e-4
    assert sched.alpha_bar(1000) <= 1e-3


def test_cosine_t10_matches_closed_form():
    sched = make_schedule("cosine", 10)
    np.testing.assert_allclose(sched.alpha_bars, COSINE_T10, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["cosine", "scaled_linear"])
@pytest.mark.parametrize("T", [1, 2, 10, 50, 1000])
def test_schedule_invariants(kind, T):
    sched = make_schedule(kind, T)
    bars = sched.alpha_bars
    assert bars.shape == (T + 1,)
    assert bars[0] >= 1 - 1e-4
    assert bars[-1] <= 1e-3
    assert np.all(np.diff(bars) < 0), "must be strictly decreasing"
    assert bars.min() >= ALPHA_BAR_MIN and bars.max() <= ALPHA_BAR_MAX


def test_unsupported_kind_and_bad_T():
    with pytest.raises(ValueError, match="unsupported"):
        make_schedule("sigmoid", 100)
    with pytest.raises(ValueError):
        make_schedule("cosine", 0)


def test_alpha_bar_lookup_bounds(small_schedule):
    assert small_schedule.alpha_bar(0) == small_schedule.alpha_bars[0]
    with pytest.raises(ValueError):
        small_schedule.alpha_bar(11)
    with pytest.raises(ValueError):
        small_schedule.alpha_bar(-1)


def test_schedule_rejects_invalid_arrays():
    with pytest.raises(ValueError, match="strictly decreasing"):
        AlphaBarSchedule(
            kind="x", num_steps=3, alpha_bars=np.array([1 - 1e-5, 0.5, 0.5, 1e-5])
        )
    with pytest.raises(ValueError, match="length"):
        AlphaBarSchedule(kind="x", num_steps=3, alpha_bars=np.array([0.9999, 0.5, 1e-4]))
    with pytest.raises(ValueError, match="<= 1e-3"):
        AlphaBarSchedule(kind="x", num_steps=2, alpha_bars=np.array([0.9999, 0.5, 0.01]))


def test_single_step_plan_is_forced(cosine_schedule):
    assert inference_timesteps(cosine_schedule, 1).steps == (1000,)


def test_five_step_plan_uniform_rounding(cosine_schedule):
    # frozen from recomputing linspace(T, 1, K) with integer truncation
    assert inference_timesteps(cosine_schedule, 5).steps == (1000, 750, 500, 250, 1)


def test_full_plan_is_identity_subsequence(small_schedule):
    assert inference_timesteps(small_schedule, 10).steps == tuple(range(10, 0, -1))


@pytest.mark.parametrize("K", [1, 2, 3, 5, 7, 10, 50, 999, 1000])
def test_plan_structure(cosine_schedule, K):
    plan = inference_timesteps(cosine_schedule, K)
    assert len(plan) == K
    assert plan.steps[0] == 1000
    assert plan.steps[-1] >= 1
    if K > 1:
        assert plan.steps[-1] == 1
    assert all(a > b for a, b in zip(plan.steps, plan.steps[1:]))


def test_plan_determinism(cosine_schedule):
    a = inference_timesteps(cosine_schedule, 17)
    b = inference_timesteps(cosine_schedule, 17)
    assert a.steps == b.steps


def test_plan_errors(small_schedule):
    with pytest.raises(ValueError):
        inference_timesteps(small_schedule, 11)
    with pytest.raises(ValueError):
        inference_timesteps(small_schedule, 0)


def test_plan_validation():
    with pytest.raises(ValueError):
        TimestepPlan(steps=())
    with pytest.raises(ValueError):
        TimestepPlan(steps=(10, 10, 5))
    with pytest.raises(ValueError):
        TimestepPlan(steps=(10, 0))


def test_cosine_matches_formula_at_interior_points():
    # spot-check the unclamped region for a long schedule against the closed form
    sched = make_schedule("cosine", 1000)
    s = 0.008
    for t in (1, 137, 500, 900):
        expected = (
            math.cos(((t / 1000 + s) / (1 + s)) * math.pi / 2) ** 2
            / math.cos(s * math.pi / (2 * (1 + s))) ** 2
        )
        assert sched.alpha_bar(t) == pytest.approx(expected, abs=1e-12)
