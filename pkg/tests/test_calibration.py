import math

import numpy as np
import pytest

import score_mewma as sm
from score_mewma.errors import CalibrationError


@pytest.fixture(scope="module")
def setup(delivery):
    gen = sm.in_control_generator(delivery)
    sigma = sm.expected_score_covariance(delivery.spec, delivery.params, delivery.covariates).values
    return gen, sm.ChartConfig(sigma_s=sigma, r=0.1)


def test_h_zero_gives_run_length_one(delivery, setup):
    gen, config = setup
    res = sm.estimate_arl(gen, delivery.params, config.with_h(1e-300), reps=200, max_rl=50, seed=0)
    assert res.mean_rl == 1.0
    assert res.censored == 0


def test_huge_h_censors_everything(delivery, setup):
    gen, config = setup
    res = sm.estimate_arl(gen, delivery.params, config.with_h(1e9), reps=100, max_rl=40, seed=0)
    assert res.censored == res.reps == 100
    assert res.mean_rl == 40.0
    assert res.censored_warning
    assert res.as_dict()["censored_warning"] is True


def test_estimate_arl_deterministic(delivery, setup):
    gen, config = setup
    a = sm.estimate_arl(gen, delivery.params, config.with_h(40.0), reps=400, max_rl=300, seed=3)
    b = sm.estimate_arl(gen, delivery.params, config.with_h(40.0), reps=400, max_rl=300, seed=3)
    assert a.mean_rl == b.mean_rl and a.std_error == b.std_error


def test_std_error_definition_and_scaling(delivery, setup):
    gen, config = setup
    small = sm.estimate_arl(gen, delivery.params, config.with_h(40.0), reps=500, max_rl=400, seed=5)
    assert small.run_lengths is not None
    expect = small.run_lengths.std(ddof=1) / math.sqrt(small.reps)
    assert abs(small.std_error - expect) < 1e-12
    big = sm.estimate_arl(gen, delivery.params, config.with_h(40.0), reps=1000, max_rl=400, seed=6)
    ratio = big.std_error / small.std_error
    assert abs(ratio - 1.0 / math.sqrt(2.0)) < 0.3 / math.sqrt(2.0)


def test_arl_monotone_in_h(delivery, setup):
    gen, config = setup
    means = []
    for h in (10.0, 20.0, 40.0, 60.0):
        means.append(
            sm.estimate_arl(gen, delivery.params, config.with_h(h), reps=400, max_rl=600, seed=9).mean_rl
        )
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_calibrate_reaches_target_and_is_deterministic(delivery, setup):
    gen, config = setup
    kw = dict(target_arl=25.0, reps_schedule=(500, 2000), seed=12, max_rl=500)
    res = sm.calibrate_h(gen, delivery.params, config, **kw)
    res2 = sm.calibrate_h(gen, delivery.params, config, **kw)
    assert res.h == res2.h
    assert res.bracket[0] < res.h <= res.bracket[1]
    assert abs(res.achieved_arl.mean_rl - 25.0) / 25.0 < 0.02
    # independent re-estimate close to the target
    check = sm.estimate_arl(gen, delivery.params, config.with_h(res.h), reps=4000, max_rl=500, seed=999)
    assert abs(check.mean_rl - 25.0) / 25.0 < 0.05


def test_smaller_target_needs_smaller_h(delivery, setup):
    gen, config = setup
    h25 = sm.calibrate_h(gen, delivery.params, config, 25.0, reps_schedule=(500, 1500), seed=1, max_rl=500).h
    h8 = sm.calibrate_h(gen, delivery.params, config, 8.0, reps_schedule=(500, 1500), seed=1, max_rl=200).h
    assert h8 < h25


def test_target_must_exceed_one(delivery, setup):
    gen, config = setup
    with pytest.raises(CalibrationError):
        sm.calibrate_h(gen, delivery.params, config, target_arl=1.0)


def test_arl_result_invariants():
    with pytest.raises(sm.ModelConfigError):
        sm.ArlResult(mean_rl=0.5, std_error=0.0, reps=10, censored=0, max_rl=100)
    with pytest.raises(sm.ModelConfigError):
        sm.ArlResult(mean_rl=5.0, std_error=0.0, reps=10, censored=11, max_rl=100)


def test_phase1_refit_mode_runs():
    from conftest import two_node_model

    model = two_node_model()
    gen = sm.in_control_generator(model)
    sigma = sm.expected_score_covariance(model.spec, model.params, model.covariates).values
    config = sm.ChartConfig(sigma_s=sigma, r=0.1, h=25.0)
    kw = dict(reps=8, max_rl=120, seed=21, phase1_size=400)
    res = sm.estimate_arl(gen, model.params, config, **kw)
    res2 = sm.estimate_arl(gen, model.params, config, **kw)
    assert res.mean_rl == res2.mean_rl
    assert res.reps == 8


def test_signal_fraction_consistent_with_target(delivery, setup):
    # roughly geometric run lengths: P(RL <= target) near 1 - (1 - 1/ARL)^ARL
    gen, config = setup
    target = 30.0
    cal = sm.calibrate_h(gen, delivery.params, config, target, reps_schedule=(500, 2000), seed=14, max_rl=600)
    res = sm.estimate_arl(gen, delivery.params, config.with_h(cal.h), reps=3000, max_rl=int(target), seed=15)
    frac = 1.0 - res.censored / res.reps
    assert 0.40 < frac < 0.85
