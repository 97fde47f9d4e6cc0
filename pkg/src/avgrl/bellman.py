"""Bellman operators on state values h and flat state-action values Q."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, StructuralError
from .mdp import StochasticPolicy, flat_index, policy_kernel


@dataclass(frozen=True)
class GapStats:
    u: float
    l: float
    argmax: int
    argmin: int

    @property
    def span(self):
        return self.u - self.l


def _vec(h, n, what="h"):
    h = np.asarray(h, dtype=float)
    if h.shape != (n,):
        raise StructuralError(f"{what} must have shape ({n},), got {h.shape}")
    return h


def action_values(mdp, h):
    """q[s, a] = r(s, a) + sum_s' P(s'|s, a) h(s')."""
    h = _vec(h, mdp.n_states)
    return mdp.reward + mdp.transition @ h


def apply_policy_op(mdp, policy, h):
    pk = policy_kernel(mdp, policy)
    return pk.reward_vec + pk.kernel @ _vec(h, mdp.n_states)


def apply_optimal_op(mdp, h):
    """Returns (T h, greedy deterministic policy); ties go to the lowest action."""
    q = action_values(mdp, h)
    actions = np.argmax(q, axis=1)  # argmax returns the first maximiser
    return q[np.arange(mdp.n_states), actions], StochasticPolicy.deterministic(actions, mdp.n_actions)


def apply_relative_op(mdp, policy, h, anchor=0):
    out = apply_policy_op(mdp, policy, h)
    return out - out[anchor]


def relative_value_iteration(mdp, policy, h0, anchor=0, tol=1e-10, max_iters=100000):
    """Iterate the relative operator from ``h0``; returns (h, iterations)."""
    pk = policy_kernel(mdp, policy)
    P, r = pk.kernel, pk.reward_vec
    h = _vec(h0, mdp.n_states).copy()
    h = h - h[anchor]
    resid = np.inf
    for it in range(1, max_iters + 1):
        nxt = r + P @ h
        nxt -= nxt[anchor]
        resid = float(np.max(np.abs(nxt - h)))
        h = nxt
        if resid < tol:
            return h, it
    raise ConvergenceError(
        f"relative value iteration did not converge in {max_iters} iterations "
        f"(last residual {resid:.3e})", residual=resid)


def _qvec(mdp, Q):
    n = mdp.n_states * mdp.n_actions
    Q = np.asarray(Q, dtype=float).reshape(-1)
    if Q.shape != (n,):
        raise StructuralError(f"Q must have {n} entries, got {Q.shape}")
    return Q


def apply_q_policy_op(mdp, policy, Q):
    Qm = _qvec(mdp, Q).reshape(mdp.n_states, mdp.n_actions)
    v = (policy.probs * Qm).sum(axis=1)
    return (mdp.reward + mdp.transition @ v).reshape(-1)


def apply_q_optimal_op(mdp, Q):
    Qm = _qvec(mdp, Q).reshape(mdp.n_states, mdp.n_actions)
    return (mdp.reward + mdp.transition @ Qm.max(axis=1)).reshape(-1)


def apply_q_relative_op(mdp, policy, Q, anchor=0):
    out = apply_q_policy_op(mdp, policy, Q)
    return out - out[flat_index(mdp, anchor)]


def gap_stats(mdp, values, space="state"):
    """u and l of the optimality residual for h (``space="state"``) or flat Q."""
    if space == "state":
        values = _vec(values, mdp.n_states)
        resid = apply_optimal_op(mdp, values)[0] - values
    elif space == "state_action":
        values = _qvec(mdp, values)
        resid = apply_q_optimal_op(mdp, values) - values
    else:
        raise StructuralError(f"unknown space {space!r}")
    i, j = int(np.argmax(resid)), int(np.argmin(resid))
    return GapStats(float(resid[i]), float(resid[j]), i, j)
