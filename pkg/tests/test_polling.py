import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_geometric_S
from relaypoll.errors import InstabilityError
from relaypoll.polling import (
    PI_FLOOR,
    PollingInstance,
    avg_wait,
    cyclic_wait,
    mean_stage,
    mean_switching,
    mg1_wait,
    observed_policy,
    service_time,
    sqrt_rule,
    tbar_matrix,
    traffic,
)


# --------------------------------------------------------------------------- loop oracles
# Written term by term from the closed forms, sharing no code with the package.


def tbar_loops(lam, zeta, S, pi):
    n = len(pi)
    rho = [l * zeta for l in lam]
    rho_s = sum(rho)
    s_bar = sum(pi[i] * pi[j] * S[i][j] for i in range(n) for j in range(n))
    t = s_bar / (1 - rho_s)
    T = [[0.0] * n for _ in range(n)]
    for k in range(n):
        for i in range(n):
            s_in = sum(pi[h] * S[h][i] for h in range(n))
            excl = sum(pi[h] * pi[l] * S[h][l] for h in range(n) for l in range(n) if l != k)
            T[k][i] = rho[i] * t / pi[i] + s_in + (rho_s - rho[k]) * t / pi[k] + excl / pi[k]
    return T


def wait_loops(lam, zeta, S, pi):
    n = len(pi)
    rho = [l * zeta for l in lam]
    rho_s = sum(rho)
    w = rho_s * zeta / (2 * (1 - rho_s))
    s_bar = sum(pi[i] * pi[j] * S[i][j] for i in range(n) for j in range(n))
    if s_bar == 0:
        return w
    w += sum(pi[i] * pi[j] * S[i][j] ** 2 for i in range(n) for j in range(n)) / (2 * s_bar)
    if rho_s == 0:
        return w
    T = tbar_loops(lam, zeta, S, pi)
    acc = 0.0
    for i in range(n):
        for j in range(n):
            acc += pi[i] * pi[j] * S[i][j] * sum(rho[k] * T[k][i] for k in range(n) if k != i)
    return w + acc / (s_bar * rho_s)


def instance(rng, n, rho_s):
    S = random_geometric_S(rng, n)
    share = rng.dirichlet(np.ones(n))
    zeta = 0.5
    lam = rho_s * share / zeta
    pi = rng.dirichlet(np.ones(n) * 2) * 0.9 + 0.1 / n
    return PollingInstance(lam, zeta, S, pi)


# --------------------------------------------------------------------------- basic quantities


def test_traffic_zero_arrivals():
    tr = traffic([0.0], 3.0)
    assert tr.rho_s == 0.0 and tr.stable


def test_service_time_from_bandwidth():
    assert service_time(2e6, 8) == pytest.approx(6.25e-8, rel=1e-15)


def test_service_rate_cross_check():
    # 6.4e6 bits/s at 6.25e-8 s/bit is rho_s = 0.4
    assert traffic([6.4e6], service_time(2e6, 8)).rho_s == pytest.approx(0.4, rel=1e-12)


def test_traffic_flags_instability():
    with pytest.warns(RuntimeWarning, match="unstable"):
        assert not traffic([1.0, 1.0], 0.5).stable


def test_mean_switching_cases(rng):
    assert mean_switching([0.5, 0.5], np.zeros((2, 2))) == 0.0
    assert mean_switching([0.5, 0.5], [[0, 3.0], [3.0, 0]]) == pytest.approx(1.5)
    S = random_geometric_S(rng, 5)
    pi = rng.dirichlet(np.ones(5))
    ref = sum(pi[i] * pi[j] * S[i, j] for i in range(5) for j in range(5))
    assert mean_switching(pi, S) == pytest.approx(ref, abs=1e-12)


def test_mean_stage_formula():
    S = np.array([[0, 4.0], [4.0, 0]])
    assert mean_stage([0.5, 0.5], S, 0.5) == pytest.approx(4.0)
    assert mean_stage([0.5, 0.5], np.zeros((2, 2)), 0.5) == 0.0
    with pytest.raises(InstabilityError):
        mean_stage([0.5, 0.5], S, 1.0)


def test_instance_validation():
    S = np.array([[0, 1.0], [1.0, 0]])
    with pytest.raises(InstabilityError):
        PollingInstance([1.0, 1.0], 0.5, S, [0.5, 0.5])
    with pytest.raises(ValueError):
        PollingInstance([0.1, 0.1], 0.5, S, [0.7, 0.7])
    with pytest.raises(ValueError):
        PollingInstance([0.1, 0.1], 0.5, [[0, 1.0], [2.0, 0]], [0.5, 0.5])
    with pytest.raises(ValueError):
        # triangle inequality violated
        PollingInstance([0.1] * 3, 0.5, [[0, 1, 5], [1, 0, 1], [5, 1, 0]], [1 / 3] * 3)


# --------------------------------------------------------------------------- T matrix and wait


def test_tbar_zero_everything():
    inst = PollingInstance([0.0, 0.0], 1.0, np.zeros((2, 2)), [0.5, 0.5])
    assert np.all(tbar_matrix(inst) == 0.0)


@pytest.mark.parametrize("n", [2, 3, 6])
def test_tbar_matches_loop_oracle(rng, n):
    inst = instance(rng, n, 0.6)
    ref = np.array(tbar_loops(inst.lam, inst.zeta, inst.S, inst.pi))
    np.testing.assert_allclose(tbar_matrix(inst), ref, rtol=1e-12)


def test_tbar_rescaling_reevaluates(rng):
    inst = instance(rng, 3, 0.4)
    scaled = inst.with_S(inst.S * 2.5)
    ref = np.array(tbar_loops(inst.lam, inst.zeta, inst.S * 2.5, inst.pi))
    np.testing.assert_allclose(tbar_matrix(scaled), ref, rtol=1e-12)
    # every term of T is linear in S at fixed traffic
    np.testing.assert_allclose(tbar_matrix(scaled), 2.5 * tbar_matrix(inst), rtol=1e-12)


def test_tbar_complement_form_differs(rng):
    inst = instance(rng, 3, 0.5)
    assert not np.allclose(tbar_matrix(inst, "complement"), tbar_matrix(inst))


@pytest.mark.parametrize("n,rho_s", [(2, 0.2), (3, 0.5), (6, 0.8), (4, 0.05)])
def test_avg_wait_matches_loop_oracle(rng, n, rho_s):
    inst = instance(rng, n, rho_s)
    assert avg_wait(inst) == pytest.approx(wait_loops(inst.lam, inst.zeta, inst.S, inst.pi), rel=1e-12)


def test_avg_wait_mg1_reduction():
    inst = PollingInstance([0.25, 0.25], 1.0, np.zeros((2, 2)), [0.5, 0.5])
    assert avg_wait(inst) == 0.5
    assert avg_wait(inst) == mg1_wait(0.5, 1.0)


def test_avg_wait_zero_traffic_limit():
    S = np.array([[0, 2.0], [2.0, 0]])
    inst = PollingInstance([0.0, 0.0], 1.0, S, [0.5, 0.5])
    # only the second term survives: sum pi pi s^2 / (2 s_bar) = (0.5*4)/(2*1) = 1
    assert avg_wait(inst) == pytest.approx(1.0)
    # the third term is 0/0 at zero traffic; its limit depends on the traffic
    # shares and here adds one more second of waiting for the robot
    tiny = PollingInstance([1e-9, 1e-9], 1.0, S, [0.5, 0.5])
    assert avg_wait(tiny) == pytest.approx(2.0, rel=1e-6)
    assert avg_wait(tiny) == pytest.approx(wait_loops(tiny.lam, 1.0, S, tiny.pi), rel=1e-12)


@given(p=st.floats(0.01, 0.99), l1=st.floats(0.0, 0.45), l2=st.floats(0.0, 0.45), s=st.floats(0.1, 20.0))
def test_two_queues_reduce_to_alternation(p, l1, l2, s):
    # a self-loop revisits a just-emptied queue, so any routing alternates
    S = np.array([[0.0, s], [s, 0.0]])
    inst = PollingInstance([l1, l2], 1.0, S, [p, 1 - p])
    if l1 + l2 == 0:
        return
    assert avg_wait(inst) == pytest.approx(cyclic_wait([l1, l2], 1.0, 2 * s), rel=1e-9)


def test_cyclic_wait_cases():
    assert cyclic_wait([0.0, 0.0], 1.0, 10.0) == 5.0
    assert cyclic_wait([0.2, 0.2], 1.0, 0.0) == pytest.approx(mg1_wait(0.4, 1.0))
    # symmetric two queues, rho_i = 0.2: s/2 + s(0.16 - 0.08)/(2*0.4*0.6)
    assert cyclic_wait([0.2, 0.2], 1.0, 10.0) == pytest.approx(mg1_wait(0.4, 1.0) + 5 + 10 * 0.08 / 0.48)


# --------------------------------------------------------------------------- square-root rule and observed policy


def test_sqrt_rule_values():
    np.testing.assert_allclose(sqrt_rule([0.1, 0.2, 0.2]), [0.2727, 0.3636, 0.3636], atol=1e-4)
    np.testing.assert_allclose(sqrt_rule([0.1] * 4), [0.25] * 4)


def test_sqrt_rule_floor_and_uniform():
    pi = sqrt_rule([0.0, 0.3])
    assert pi[0] >= PI_FLOOR * 0.99 and pi.sum() == pytest.approx(1.0)
    with pytest.warns(RuntimeWarning):
        np.testing.assert_allclose(sqrt_rule([0.0, 0.0, 0.0]), [1 / 3] * 3)


def test_observed_policy_examples():
    obs = observed_policy([0.3, 0.7])
    np.testing.assert_allclose(obs.p_tilde, [[0, 1], [1, 0]])
    np.testing.assert_allclose(obs.pi_tilde, [0.5, 0.5])
    obs = observed_policy([0.5, 0.25, 0.25])
    assert obs.p_tilde[0, 1] == pytest.approx(0.5) and obs.p_tilde[0, 2] == pytest.approx(0.5)
    assert obs.p_tilde[1, 0] == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        observed_policy([1.0])


# --------------------------------------------------------------------------- properties

simplex = st.integers(2, 6).flatmap(
    lambda n: st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n).map(lambda w: np.array(w) / sum(w))
)


@given(pi=simplex)
def test_observed_policy_stationary(pi):
    obs = observed_policy(pi)
    assert np.all(np.diag(obs.p_tilde) == 0)
    np.testing.assert_allclose(obs.p_tilde.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(obs.pi_tilde @ obs.p_tilde, obs.pi_tilde, atol=1e-10)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), rho_s=st.floats(0.0, 0.95))
def test_wait_lower_bound(seed, n, rho_s):
    inst = instance(np.random.default_rng(seed), n, rho_s)
    w = avg_wait(inst)
    assert w >= mg1_wait(inst.rho_s, inst.zeta) - 1e-12
    zero = inst.with_S(np.zeros((n, n)))
    assert avg_wait(zero) == pytest.approx(mg1_wait(inst.rho_s, inst.zeta), abs=1e-15)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_wait_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    inst = instance(rng, n, 0.6)
    p = rng.permutation(n)
    perm = PollingInstance(inst.lam[p], inst.zeta, inst.S[np.ix_(p, p)], inst.pi[p])
    assert avg_wait(perm) == pytest.approx(avg_wait(inst), rel=1e-12)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_wait_affine_in_inverse_speed(seed, n):
    inst = instance(np.random.default_rng(seed), n, 0.5)
    c = np.array([1.0, 2.0, 4.0, 8.0])
    w = np.array([avg_wait(inst.with_S(inst.S / ci)) for ci in c])
    A = np.column_stack([np.ones(4), 1.0 / c])
    coef, *_ = np.linalg.lstsq(A, w, rcond=None)
    assert np.linalg.norm(A @ coef - w) < 1e-10 * max(1.0, w.max())
    assert coef[0] == pytest.approx(mg1_wait(inst.rho_s, inst.zeta), abs=1e-9)
    assert coef[1] >= 0


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6), rho_s=st.floats(0.0, 0.95))
def test_tbar_positive(seed, n, rho_s):
    inst = instance(np.random.default_rng(seed), n, rho_s)
    T = tbar_matrix(inst)
    off = ~np.eye(n, dtype=bool)
    assert np.all(T[off] > 0)
