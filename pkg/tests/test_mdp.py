import bisect
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avgrl.errors import DomainError, StructuralError
from avgrl.mdp import (
    Mdp,
    StochasticPolicy,
    average_reward,
    closed_classes,
    deterministic_policies,
    gain_vector,
    gamma_lower_bound,
    irreducibility_check,
    is_unichain,
    load_mdp,
    optimal_by_enumeration,
    optimal_by_policy_iteration,
    policy_kernel,
    save_mdp,
    solve_bellman,
    solve_bellman_q,
    state_action_kernel,
    stationary_distribution,
)

from conftest import family_instance, two_state_mdp


def test_rejects_bad_shapes():
    with pytest.raises(StructuralError):
        Mdp(np.ones((2, 1, 3)) / 3, np.zeros((2, 1)))
    with pytest.raises(StructuralError):
        Mdp(np.ones((2, 1, 2)) / 2, np.zeros((2, 2)))


def test_rejects_non_stochastic_row_and_names_it():
    P = np.full((2, 2, 2), 0.5)
    P[1, 0] = [0.7, 0.7]
    with pytest.raises(StructuralError, match=r"\(1, 0\)"):
        Mdp(P, np.zeros((2, 2)))


def test_rejects_negative_entry():
    P = np.full((2, 1, 2), 0.5)
    P[0, 0] = [1.5, -0.5]
    with pytest.raises(StructuralError, match="negative"):
        Mdp(P, np.zeros((2, 1)))


def test_arrays_are_read_only(small_mdp):
    with pytest.raises(ValueError):
        small_mdp.transition[0, 0, 0] = 1.0


def test_two_state_stationary_closed_form():
    p, q = 0.3, 0.6
    mdp = two_state_mdp(p, q)
    pi = stationary_distribution(policy_kernel(mdp, StochasticPolicy.uniform(2, 1)).kernel)
    np.testing.assert_allclose(pi, [q / (p + q), p / (p + q)], atol=1e-14)


def test_two_state_gain_and_bias_closed_form():
    p, q = 0.3, 0.6
    mdp = two_state_mdp(p, q, 1.0, 0.0)
    ev = solve_bellman(mdp, StochasticPolicy.uniform(2, 1), anchor=1)
    # J = pi_0; h(0) - h(1) = 1 / (p + q) from J + h(0) = 1 + (1-p) h(0) + p h(1)
    assert ev.gain == pytest.approx(q / (p + q), abs=1e-14)
    np.testing.assert_allclose(ev.bias, [1.0 / (p + q), 0.0], atol=1e-13)


def test_bellman_equation_holds(small_mdp):
    policy = StochasticPolicy.uniform(small_mdp.n_states, small_mdp.n_actions)
    ev = solve_bellman(small_mdp, policy, anchor=1)
    pk = policy_kernel(small_mdp, policy)
    np.testing.assert_allclose(ev.gain + ev.bias, pk.reward_vec + pk.kernel @ ev.bias, atol=1e-12)
    assert ev.bias[1] == 0.0
    assert ev.gain == pytest.approx(average_reward(small_mdp, policy), abs=1e-12)


def test_anchors_differ_by_constant(small_mdp):
    policy = StochasticPolicy.uniform(small_mdp.n_states, small_mdp.n_actions)
    h0 = solve_bellman(small_mdp, policy, 0).bias
    h1 = solve_bellman(small_mdp, policy, 1).bias
    np.testing.assert_allclose(h0 - h1, np.full_like(h0, h0[1]), atol=1e-12)


def test_q_relates_to_state_bias(small_mdp):
    n, m = small_mdp.n_states, small_mdp.n_actions
    policy = StochasticPolicy.uniform(n, m)
    ev = solve_bellman(small_mdp, policy)
    evq = solve_bellman_q(small_mdp, policy, (0, 1))
    assert evq.gain == pytest.approx(ev.gain, abs=1e-12)
    assert evq.bias[1] == 0.0
    Q = evq.bias.reshape(n, m)
    direct = small_mdp.reward - ev.gain + small_mdp.transition @ ev.bias
    diff = Q - direct
    np.testing.assert_allclose(diff, np.full_like(diff, diff[0, 0]), atol=1e-11)


def test_q_for_deterministic_policy_is_unichain(small_mdp):
    n, m = small_mdp.n_states, small_mdp.n_actions
    policy = StochasticPolicy.deterministic(np.zeros(n, dtype=int), m)
    sak = state_action_kernel(small_mdp, policy)
    assert not irreducibility_check(sak.kernel)
    assert is_unichain(sak.kernel)
    ev = solve_bellman_q(small_mdp, policy)
    assert ev.gain == pytest.approx(solve_bellman(small_mdp, policy).gain, abs=1e-12)


def test_reducible_chain_reports_witness():
    K = np.array([[1.0, 0.0], [0.5, 0.5]])
    res = irreducibility_check(K)
    assert not res and res.witness == (0, 1)
    with pytest.raises(DomainError, match="unreachable"):
        stationary_distribution(K)


def test_multichain_gain_vector():
    # two absorbing states with rewards 1 and 0, a transient state splitting evenly
    K = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.0]])
    r = np.array([1.0, 0.0, 0.3])
    assert len(closed_classes(K)) == 2
    np.testing.assert_allclose(gain_vector(K, r), [1.0, 0.0, 0.5], atol=1e-14)


def test_multichain_bellman_is_rejected():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    mdp = Mdp(P, np.array([[1.0], [0.0]]))
    with pytest.raises(DomainError, match="recurrent"):
        solve_bellman(mdp, StochasticPolicy.uniform(2, 1))


def test_enumeration_order_and_limit():
    pols = deterministic_policies(2, 3)
    assert pols.shape == (9, 2)
    assert pols[:4].tolist() == [[0, 0], [0, 1], [0, 2], [1, 0]]
    with pytest.raises(DomainError):
        deterministic_policies(13, 2)


def test_enumeration_matches_policy_iteration():
    for seed in range(10):
        mdp = family_instance(seed)
        a = optimal_by_enumeration(mdp)
        b = optimal_by_policy_iteration(mdp)
        assert a.gain == pytest.approx(b.gain, abs=1e-10)


def test_optimum_dominates_every_policy(small_mdp):
    best = optimal_by_enumeration(small_mdp).gain
    for acts in deterministic_policies(small_mdp.n_states, small_mdp.n_actions):
        pol = StochasticPolicy.deterministic(acts, small_mdp.n_actions)
        assert average_reward(small_mdp, pol) <= best + 1e-12


def test_optimal_multichain_picks_best_class():
    # state 0 can stay (reward 1) or move to absorbing state 1 (reward 0)
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    r = np.array([[1.0, 0.0], [0.0, 0.0]])
    opt = optimal_by_enumeration(Mdp(P, r))
    assert opt.policy.actions[0] == 0
    np.testing.assert_allclose(opt.gain_vector, [1.0, 0.0])


def test_gamma_lower_bound_is_min_stationary(small_mdp):
    pol = StochasticPolicy.uniform(small_mdp.n_states, small_mdp.n_actions)
    pi = stationary_distribution(policy_kernel(small_mdp, pol).kernel)
    assert gamma_lower_bound(small_mdp, [pol]) == pytest.approx(pi.min())
    with pytest.raises(DomainError):
        gamma_lower_bound(small_mdp, [])


def test_save_load_round_trip(tmp_path, small_mdp):
    path = tmp_path / "m.json"
    save_mdp(small_mdp, path)
    first = path.read_bytes()
    back = load_mdp(path)
    np.testing.assert_array_equal(back.transition, small_mdp.transition)
    assert back.content_hash() == small_mdp.content_hash()
    save_mdp(back, path)
    assert path.read_bytes() == first


def test_load_errors(tmp_path):
    with pytest.raises(StructuralError, match="no such"):
        load_mdp(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(StructuralError, match="JSON"):
        load_mdp(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"n_states": 3, "n_actions": 1, "transition": [[[1.0]]], "reward": [[0.0]]}))
    with pytest.raises(StructuralError, match="disagree"):
        load_mdp(wrong)


def test_policy_validation():
    with pytest.raises(StructuralError):
        StochasticPolicy(np.array([[0.5, 0.4]]))
    pol = StochasticPolicy.deterministic([1, 0], 2)
    assert pol.is_deterministic and pol.actions.tolist() == [1, 0]
    assert not StochasticPolicy.uniform(2, 2).is_deterministic


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_stationary_is_invariant(seed, n):
    rs = np.random.default_rng(seed)
    K = rs.dirichlet(np.ones(n), size=n)
    pi = stationary_distribution(K)
    np.testing.assert_allclose(pi @ K, pi, atol=1e-12)
    assert pi.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(pi > 0)


def test_kernels_for_selector_and_uniform():
    mdp = family_instance(1)
    n, m = mdp.n_states, mdp.n_actions
    pk = policy_kernel(mdp, StochasticPolicy.deterministic(np.zeros(n, dtype=int), m))
    np.testing.assert_array_equal(pk.kernel, mdp.transition[:, 0])
    np.testing.assert_array_equal(pk.reward_vec, mdp.reward[:, 0])
    pu = policy_kernel(mdp, StochasticPolicy.uniform(n, m))
    np.testing.assert_allclose(pu.kernel, mdp.transition.mean(axis=1), atol=1e-15)


def test_state_action_kernel_structure():
    mdp = family_instance(2)
    n, m = mdp.n_states, mdp.n_actions
    rs = np.random.default_rng(0)
    pol = StochasticPolicy(rs.dirichlet(np.ones(m), size=n))
    K = state_action_kernel(mdp, pol).kernel.reshape(n, m, n, m)
    np.testing.assert_allclose(K.sum(axis=3), mdp.transition, atol=1e-15)
    det = StochasticPolicy.deterministic(rs.integers(m, size=n), m)
    Kd = state_action_kernel(mdp, det).kernel.reshape(n, m, n, m)
    off = np.ones((n, m), dtype=bool)
    off[np.arange(n), det.actions] = False
    assert np.all(Kd[:, :, off] == 0)
    one = Mdp(np.ones((1, 1, 1)), np.zeros((1, 1)))
    assert state_action_kernel(one, StochasticPolicy.uniform(1, 1)).kernel.tolist() == [[1.0]]


def test_symmetric_swap_and_lazified_chain():
    K = np.array([[0.7, 0.3], [0.3, 0.7]])
    np.testing.assert_allclose(stationary_distribution(K), [0.5, 0.5])
    rs = np.random.default_rng(3)
    P = rs.dirichlet(np.ones(5), size=5)
    lazy = 0.4 * np.eye(5) + 0.6 * P
    np.testing.assert_allclose(stationary_distribution(lazy), stationary_distribution(P), atol=1e-13)


def test_stationary_matches_long_simulation():
    rs = np.random.default_rng(11)
    K = rs.dirichlet(np.ones(6), size=6)
    pi = stationary_distribution(K)
    cum = np.cumsum(K, axis=1).tolist()
    s, visits = 0, [0] * 10**6
    for t, x in enumerate(rs.random(10**6).tolist()):
        s = min(bisect.bisect_right(cum[s], x), 5)
        visits[t] = s
    counts = np.bincount(visits, minlength=6)
    assert np.max(np.abs(counts / counts.sum() - pi)) < 1e-2
    assert np.max(np.abs(pi @ K - pi)) < 1e-10


def test_block_diagonal_is_reducible_with_cross_witness():
    K = np.zeros((4, 4))
    K[:2, :2] = 0.5
    K[2:, 2:] = 0.5
    res = irreducibility_check(K)
    i, j = res.witness
    assert not res and (i < 2) != (j < 2)


def test_simple_gains():
    mdp = family_instance(4)
    const = Mdp(mdp.transition, np.full(mdp.reward.shape, 2.5))
    assert average_reward(const, StochasticPolicy.uniform(mdp.n_states, mdp.n_actions)) == pytest.approx(2.5)
    cycle = Mdp(np.array([[[0.0, 1.0]], [[1.0, 0.0]]]), np.array([[1.0], [3.0]]))
    assert average_reward(cycle, StochasticPolicy.uniform(2, 1)) == pytest.approx(2.0)
    single = Mdp(np.ones((1, 1, 1)), np.array([[0.4]]))
    ev = solve_bellman(single, StochasticPolicy.uniform(1, 1))
    assert ev.gain == pytest.approx(0.4) and ev.bias.tolist() == [0.0]


def test_gain_is_discounted_limit():
    mdp = family_instance(5)
    pol = StochasticPolicy.uniform(mdp.n_states, mdp.n_actions)
    pk = policy_kernel(mdp, pol)
    alpha = 1 - 1e-6
    v = np.linalg.solve(np.eye(mdp.n_states) - alpha * pk.kernel, pk.reward_vec)
    np.testing.assert_allclose((1 - alpha) * v, average_reward(mdp, pol), atol=1e-4)


def test_reward_shift_moves_gain_only():
    mdp = family_instance(6)
    pol = StochasticPolicy.uniform(mdp.n_states, mdp.n_actions)
    a = solve_bellman(mdp, pol)
    b = solve_bellman(Mdp(mdp.transition, mdp.reward + 3.0), pol)
    assert b.gain == pytest.approx(a.gain + 3.0, abs=1e-12)
    np.testing.assert_allclose(b.bias, a.bias, atol=1e-11)


def test_gamma_over_policy_sets():
    K = Mdp(np.array([[[0.7, 0.3]], [[0.3, 0.7]]]), np.zeros((2, 1)))
    assert gamma_lower_bound(K, [StochasticPolicy.uniform(2, 1)]) == pytest.approx(0.5)
    mdp = family_instance(0)
    pols = [StochasticPolicy.deterministic(a, mdp.n_actions)
            for a in deterministic_policies(mdp.n_states, mdp.n_actions)]
    values = [gamma_lower_bound(mdp, pols[:k]) for k in range(1, min(len(pols), 30) + 1)]
    assert gamma_lower_bound(mdp, pols) > 0
    assert all(b <= a for a, b in zip(values, values[1:]))
