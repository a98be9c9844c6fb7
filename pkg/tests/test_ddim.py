import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segdistill.ddim import (
    CFGPredictor,
    Condition,
    GaussianPredictor,
    LatentState,
    NoiseSchedule,
    ScheduleError,
    ZeroPredictor,
    build_schedule,
    cfg_combine,
    ddim_invert,
    ddim_step,
    finite_difference_vjp,
    invert,
    make_linear_gaussian_predictor,
    predict_clean,
    round_trip_error,
    sample,
)


def test_predict_clean_examples():
    z = np.array([1.0, 0.0])
    assert np.array_equal(predict_clean(z, np.array([5.0, -3.0]), 1.0), z)
    out = predict_clean(z, np.array([1.0, 1.0]), 0.25)
    # (z - sqrt(0.75) eps) / 0.5
    assert out == pytest.approx([0.2679, -1.7321], abs=5e-5)
    assert np.array_equal(predict_clean(z, np.zeros(2), 0.25), z / 0.5)
    with pytest.raises(ScheduleError):
        predict_clean(z, z, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 2**32 - 1))
def test_predict_clean_inverts_forward_noising(a, seed):
    rng = np.random.default_rng(seed)
    z0, eps = rng.normal(size=(2, 16))
    zt = math.sqrt(a) * z0 + math.sqrt(1 - a) * eps
    assert np.allclose(predict_clean(zt, eps, a), z0, rtol=0, atol=1e-12 / math.sqrt(a) * 10)


def test_schedule_trivial():
    s = build_schedule("linear", 1, beta_start=0.5, beta_end=0.5, train_steps=1)
    assert s.alpha_bar.tolist() == [1.0, 0.5]


def test_schedule_default_fifty_steps():
    s = build_schedule("linear", 50)
    assert s.steps == 50 and s[0] == 1.0
    assert s.timesteps[-1] == 1000


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from(["linear", "scaled_linear", "cosine"]),
    st.integers(1, 200),
    st.floats(1e-5, 1e-2),
    st.floats(1e-2, 5e-2),
)
def test_schedule_monotone(kind, steps, b0, b1):
    s = build_schedule(kind, steps, beta_start=b0, beta_end=b1)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        build_schedule("linear", 0)
    with pytest.raises(ScheduleError):
        build_schedule("linear", 10, beta_start=1.0, beta_end=1.0)
    with pytest.raises(ScheduleError):
        build_schedule("nope", 10)
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 1.0]))


def test_step_with_zero_noise_is_rescaling():
    s = build_schedule("linear", 20)
    z = np.random.default_rng(0).normal(size=5)
    out = ddim_step(LatentState(z, 7), np.zeros(5), s)
    assert out.t == 6
    assert np.allclose(out.z, math.sqrt(s[6] / s[7]) * z, rtol=1e-14)


def test_terminal_step():
    s = build_schedule("linear", 20)
    z, eps = np.random.default_rng(1).normal(size=(2, 5))
    out = ddim_step(LatentState(z, 1), eps, s)
    assert out.t == 0 and s[0] == 1.0
    assert np.allclose(out.z, predict_clean(z, eps, s[1]), rtol=1e-14)


def test_step_range_errors():
    s = build_schedule("linear", 5)
    z = np.zeros(2)
    with pytest.raises(ScheduleError):
        ddim_step(LatentState(z, 0), z, s)
    with pytest.raises(ScheduleError):
        ddim_invert(LatentState(z, 5), z, s)


def test_zero_predictor_invert_step_identity():
    s = build_schedule("linear", 50)
    z = np.random.default_rng(2).normal(size=8)
    for t in range(50):
        up = ddim_invert(LatentState(z, t), np.zeros(8), s)
        back = ddim_step(up, np.zeros(8), s)
        assert back.t == t
        assert np.allclose(back.z, z, rtol=0, atol=4 * np.finfo(float).eps * np.abs(z).max())


def test_local_round_trip_gaussian():
    s = build_schedule("linear", 50)
    rng = np.random.default_rng(3)
    p = make_linear_gaussian_predictor(rng.normal(size=8), 1.0)
    z = p.mean + rng.normal(size=8)
    for t in range(50):
        up = ddim_invert(LatentState(z, t), p(z, t, s[t], None), s)
        back = ddim_step(up, p(up.z, t + 1, s[t + 1], None), s)
        assert np.linalg.norm(back.z - z) / np.linalg.norm(z) < 1e-2
        z = up.z


def test_full_round_trip_improves_with_steps():
    rng = np.random.default_rng(4)
    p = GaussianPredictor(rng.normal(size=8), 1.0)
    z0 = p.mean + rng.normal(size=8)
    errs = [round_trip_error(z0, p, build_schedule("linear", n)) for n in (25, 50, 100, 200)]
    assert errs == sorted(errs, reverse=True)


def test_cfg_combine():
    c, u = np.array([1.0, 0.0]), np.array([0.0, 0.0])
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert np.array_equal(cfg_combine(c, u, 2.0), [2.0, 0.0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_cfg_affine_in_scale(s1, s2, seed):
    c, u = np.random.default_rng(seed).normal(size=(2, 4))
    mid = cfg_combine(c, u, (s1 + s2) / 2)
    assert np.allclose(mid, (cfg_combine(c, u, s1) + cfg_combine(c, u, s2)) / 2, atol=1e-12)


def test_gaussian_predictor_mode_and_point_mass():
    mu = np.array([1.0, -2.0, 0.5])
    p = GaussianPredictor(mu, 0.7)
    for a in (0.9, 0.5, 0.01):
        z = math.sqrt(a) * mu
        assert np.allclose(p.posterior_mean(z, a), mu)
        assert np.allclose(p(z, 1, a), 0.0)
    tiny = GaussianPredictor(mu, 1e-14)
    z = np.random.default_rng(0).normal(size=3)
    assert np.allclose(tiny.posterior_mean(z, 0.3), mu, atol=1e-10)
    assert np.array_equal(p(z, 0, 1.0), np.zeros(3))


def test_gaussian_predictor_matches_monte_carlo():
    """Regress the true noise on z_t; the Bayes predictor is that regression."""
    rng = np.random.default_rng(5)
    mu, var, a, n = 0.8, 0.5, 0.4, 100_000
    z0 = mu + math.sqrt(var) * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    zt = math.sqrt(a) * z0 + math.sqrt(1 - a) * eps
    X = np.column_stack([np.ones(n), zt])
    coef, *_ = np.linalg.lstsq(X, eps, rcond=None)
    resid = eps - X @ coef
    s2 = resid @ resid / (n - 2)
    se = np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))
    p = GaussianPredictor(np.array([mu]), var)
    slope = p(np.array([1.0]), 1, a)[0] - p(np.array([0.0]), 1, a)[0]
    intercept = p(np.array([0.0]), 1, a)[0]
    assert abs(coef[0] - intercept) < 3 * se[0]
    assert abs(coef[1] - slope) < 3 * se[1]


def test_gaussian_sampling_from_noise_lands_near_mean():
    rng = np.random.default_rng(6)
    mu, var = rng.normal(size=8), 0.3
    p = GaussianPredictor(mu, var)
    z = sample(rng.standard_normal(8), p, build_schedule("linear", 200))
    assert np.all(np.abs(z - mu) < 4 * math.sqrt(var))


def test_gaussian_vjp_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = GaussianPredictor(rng.normal(size=6), 0.4)
    z, cot = rng.normal(size=(2, 6))
    fd = finite_difference_vjp(lambda zz: p(zz, 3, 0.6), z, cot)
    assert np.allclose(p.vjp(z, 3, 0.6, None, cot), fd, rtol=1e-7)


def test_cfg_predictor_combines_and_differentiates():
    mean_of = lambda cond: np.full(3, float(len(cond.class_list)))
    base = GaussianPredictor(np.zeros(3), 0.5, mean_of)
    cond = Condition((1, 2))
    z = np.array([0.3, -0.1, 0.7])
    wrapped = CFGPredictor(base, 2.0)
    expect = cfg_combine(base(z, 1, 0.5, cond), base(z, 1, 0.5, cond.null()), 2.0)
    assert np.array_equal(wrapped(z, 1, 0.5, cond), expect)
    cot = np.array([1.0, 2.0, 3.0])
    fd = finite_difference_vjp(lambda zz: wrapped(zz, 1, 0.5, cond), z, cot)
    assert np.allclose(wrapped.vjp(z, 1, 0.5, cond, cot), fd, rtol=1e-7)


def test_trajectories_are_deterministic():
    rng = np.random.default_rng(8)
    p = GaussianPredictor(rng.normal(size=4), 1.0)
    s = build_schedule("cosine", 30)
    z0 = rng.normal(size=4)
    a = sample(invert(z0, p, s), p, s)
    b = sample(invert(z0, p, s), p, s)
    assert np.array_equal(a, b)


def test_zero_predictor_trajectory_is_exact_inverse():
    s = build_schedule("linear", 50)
    z0 = np.random.default_rng(9).normal(size=(2, 4, 4))
    zT = invert(z0, ZeroPredictor(), s)
    assert np.allclose(zT, math.sqrt(s[50]) * z0, rtol=1e-13)
    assert np.allclose(sample(zT, ZeroPredictor(), s), z0, rtol=0, atol=1e-13)


def test_sample_trace_records_each_step():
    s = build_schedule("linear", 5)
    trace = []
    sample(np.ones(3), ZeroPredictor(), s, trace=trace)
    assert [e["t"] for e in trace] == [5, 4, 3, 2, 1]
