import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import special_ortho_group

from lasg.comm_rules import (RuleConfig, StepHistory, Variant, check_lag_wk, check_model_innovation,
                             check_wk1, check_wk2, recipe_c, rhs_threshold,
                             update_smoothness_estimate, validate_config)
from lasg.engine import StepSchedule
from lasg.errors import ConfigError


def test_rhs_hand_example():
    cfg = RuleConfig(Variant.LASG_WK2, D=3, c=(1.0, 0.5, 0.25), M=2)
    hist = StepHistory(3)
    for step in (4.0, 2.0, 8.0):
        hist.push(step)
    # most recent first: 8, 2, 4
    assert hist.values().tolist() == [8.0, 2.0, 4.0]
    assert rhs_threshold(hist, cfg) == (8.0 + 1.0 + 1.0) / 4


def test_fresh_history_gives_zero_threshold():
    cfg = RuleConfig(Variant.LASG_WK1, D=4, c=(1.0,) * 4, M=3)
    assert rhs_threshold(StepHistory(4), cfg) == 0.0


def test_ties_skip():
    g = np.array([1.0, 2.0])
    assert check_lag_wk(g, g, 0.0)
    assert check_wk2(np.array([1.0, 0.0]), np.zeros(2), 1.0)
    assert not check_wk2(np.array([1.0, 0.0]), np.zeros(2), 0.999)
    assert check_model_innovation(2.0, np.array([0.5]), np.zeros(1), 1.0)
    assert not check_model_innovation(2.0, np.array([0.5]), np.zeros(1), 0.99)


def test_wk1_compares_delta_vectors():
    assert check_wk1(np.array([0.5, 0.0]), np.array([0.0, 0.5]), 0.5)
    assert not check_wk1(np.array([0.5, 0.0]), np.array([0.0, 0.5]), 0.49)


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3).map(np.array)


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(0, 1e4), st.floats(1.0, 10.0))
def test_larger_threshold_never_turns_skip_into_upload(a, b, rhs, factor):
    for check in (check_lag_wk, check_wk1, check_wk2):
        if check(a, b, rhs):
            assert check(a, b, rhs * factor)
    if check_model_innovation(1.5, a, b, rhs):
        assert check_model_innovation(1.5, a, b, rhs * factor)


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.integers(0, 2**31 - 1))
def test_decisions_invariant_under_rotation(a, b, seed):
    R = special_ortho_group.rvs(3, random_state=seed)
    lhs = float((a - b) @ (a - b))
    # the rotation itself perturbs by ~eps * ||a||; skip differences at that scale
    assume(lhs > 1e-8 * (float(a @ a) + float(b @ b)))
    for rhs in (0.5 * lhs, 2.0 * lhs + 1e-9):
        assert check_wk2(a, b, rhs) == check_wk2(R @ a, R @ b, rhs)
        assert check_model_innovation(0.7, a, b, rhs) == check_model_innovation(0.7, R @ a, R @ b, rhs)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.lists(st.floats(0, 1e3), min_size=0, max_size=200))
def test_ring_buffer_matches_brute_force(D, steps):
    c = tuple(float(d + 1) for d in range(D))
    cfg = RuleConfig(Variant.LASG_WK2, D=D, c=c, M=3)
    hist = StepHistory(D)
    full = []
    for s in steps:
        hist.push(s)
        full.append(s)
        padded = (full[::-1] + [0.0] * D)[:D]
        brute = math.fsum(ci * si for ci, si in zip(c, padded)) / 9
        assert rhs_threshold(hist, cfg) == pytest.approx(brute, rel=1e-12, abs=0)


def test_history_rejects_negative_steps():
    with pytest.raises(ValueError):
        StepHistory(2).push(-1.0)


def test_rule_config_validation():
    with pytest.raises(ConfigError):
        RuleConfig(Variant.LASG_WK2, D=2, c=(1.0,), M=1)
    with pytest.raises(ConfigError):
        RuleConfig(Variant.LASG_WK2, D=1, c=(-1.0,), M=1)
    with pytest.raises(ConfigError):
        RuleConfig(Variant.LASG_WK2, D=0, c=(), M=1)
    with pytest.raises(ConfigError):
        RuleConfig.with_padding(Variant.LASG_WK2, 2, (1.0, 1.0, 1.0), 1)
    assert RuleConfig.with_padding("LasgPS", 4, (0.1,), 2).c == (0.1, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        RuleConfig("Gossip", 1, (0.0,), 1)


def test_variant_families():
    assert Variant.LASG_WK1.worker_side and not Variant.LASG_WK1.server_side
    assert Variant.LASG_PSE.server_side and Variant.LASG_PSE.lazy
    assert not Variant.SYNC_SGD.lazy and not Variant.LOCAL_SGD.lazy


def test_recipe_c_values():
    c = recipe_c(0.1, 10, 100)
    assert len(c) == 100
    assert c[:10] == pytest.approx((0.1,) * 10)
    assert c[10:] == (0.0,) * 90


def test_smoothness_estimate_is_running_max_with_guard():
    est = update_smoothness_estimate(0.0, np.array([2.0]), np.array([0.0]),
                                     np.array([1.0]), np.array([0.0]))
    assert est == 2.0
    assert update_smoothness_estimate(est, np.array([1.0]), np.zeros(1),
                                      np.array([1.0]), np.zeros(1)) == 2.0
    assert update_smoothness_estimate(est, np.array([9.0]), np.zeros(1),
                                      np.zeros(1), np.zeros(1)) == 2.0


def test_validate_config_nonconvex_bounds():
    sched = StepSchedule("constant", eta=0.1)
    # 1/(12 * 10 * 0.01) = 0.8333; sqrt(4) * 1 / 18 = 0.1111
    ok = RuleConfig(Variant.LASG_WK2, D=10, c=(0.1,) * 10, M=4)
    assert validate_config(ok, sched, L=1.0) == []
    loose = RuleConfig(Variant.LASG_WK2, D=10, c=(0.5,) * 10, M=4)
    (msg,) = validate_config(loose, sched, L=1.0)
    assert "sqrt(M) L^2/18" in msg
    both = RuleConfig(Variant.LASG_PS, D=10, c=(1.0,) * 10, M=4)
    assert len(validate_config(both, sched, L=1.0)) == 2


def test_validate_config_strongly_convex_and_quantized():
    sched = StepSchedule("strongly_convex", mu=1.0, k0=20.0)
    eta0 = sched.eta_at(0)
    D, M, L = 5, 4, 1.0
    c = min(1 / (24 * D * eta0**2), math.sqrt(M) * L**2 / 18)
    cfg = RuleConfig(Variant.LASG_WK1, D=D, c=(c,) * D, M=M)
    assert validate_config(cfg, sched, L) == []
    cfg = RuleConfig(Variant.LASG_WK1, D=D, c=(c * 1.01,) * D, M=M)
    assert validate_config(cfg, sched, L)
    q = RuleConfig(Variant.LASG_WK2, D=1, c=(0.1,), M=4)
    (msg,) = validate_config(q, StepSchedule(eta=0.1), L=1.0, quantized=True)
    assert "sqrt(M) L^2/24" in msg


def test_validate_config_ignores_uncovered_rules():
    sched = StepSchedule(eta=1.0)
    for v in (Variant.LAG_WK, Variant.LASG_PSE):
        assert validate_config(RuleConfig(v, D=1, c=(100.0,), M=1), sched, L=0.1) == []


def test_documented_rule_examples():
    cfg = RuleConfig(Variant.LASG_WK2, D=3, c=(0.1, 0.0, 0.0), M=10)
    hist = StepHistory(3)
    hist.push(2.0)
    rhs = rhs_threshold(hist, cfg)
    assert rhs == pytest.approx(0.002, rel=1e-15)
    g = np.array([0.5, 0.5])
    assert check_lag_wk(g, g, 0.0)
    assert not check_lag_wk(g, np.zeros(2), 0.0)
    assert not check_lag_wk(np.array([0.5, 0.5]), np.zeros(2), rhs)
    # L = 2, ||diff||^2 = 0.01 gives lhs 0.04 > 0.002
    assert not check_model_innovation(2.0, np.array([0.1]), np.zeros(1), rhs)
    assert check_model_innovation(0.0, np.array([100.0]), np.zeros(1), 0.0)
    assert check_model_innovation(3.0, np.ones(2), np.ones(2), 0.0)
    assert update_smoothness_estimate(1.0, np.array([2.0]), np.zeros(1),
                                      np.array([1.0]), np.zeros(1)) == 2.0
    assert update_smoothness_estimate(5.0, np.array([2.0]), np.zeros(1),
                                      np.array([1.0]), np.zeros(1)) == 5.0


def test_zero_weights_never_warn():
    for sched in (StepSchedule(eta=10.0), StepSchedule("strongly_convex", mu=0.01, k0=1.0)):
        cfg = RuleConfig(Variant.LASG_WK2, D=4, c=(0.0,) * 4, M=2)
        assert validate_config(cfg, sched, L=1e-6) == []


def test_step_bound_warning_for_constant_stepsize():
    # 1/(12 * 2 * 0.25) = 1/6
    cfg = RuleConfig(Variant.LASG_WK1, D=2, c=(0.2, 0.2), M=100)
    (msg,) = validate_config(cfg, StepSchedule(eta=0.5), L=10.0)
    assert msg.startswith("nonconvex bound") and "1/(12 D eta^2)" in msg
