"""Finite tabular MDPs, policy-induced chains and exact average-reward evaluation.

State-action pairs are flattened as ``index(s, a) = s * n_actions + a``
everywhere in the package, which is exactly numpy's C-order reshape of an
``(n_states, n_actions)`` array.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, StructuralError

STOCHASTIC_ATOL = 1e-12
MAX_ENUMERATION = 4096


def _frozen(values):
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _check_rows(rows, what, atol):
    """Validate nonnegative rows summing to one; report the first bad row."""
    flat = rows.reshape(-1, rows.shape[-1])
    if not np.all(np.isfinite(flat)):
        bad = int(np.argwhere(~np.isfinite(flat).all(axis=1))[0, 0])
        raise StructuralError(f"{what}: row {_row_label(rows, bad)} has non-finite entries")
    neg = np.argwhere((flat < 0).any(axis=1))
    if len(neg):
        bad = int(neg[0, 0])
        raise StructuralError(f"{what}: row {_row_label(rows, bad)} has a negative entry")
    sums = flat.sum(axis=1)
    off = np.argwhere(np.abs(sums - 1.0) > atol)
    if len(off):
        bad = int(off[0, 0])
        raise StructuralError(
            f"{what}: row {_row_label(rows, bad)} sums to {float(sums[bad])!r}, not 1")


def _row_label(rows, flat_index):
    if rows.ndim == 2:
        return str(flat_index)
    return str(tuple(int(i) for i in np.unravel_index(flat_index, rows.shape[:-1])))


@dataclass(frozen=True, eq=False)
class Mdp:
    """Transition tensor ``P[s, a, s']`` and reward table ``r[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise StructuralError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise StructuralError(f"reward shape {r.shape} does not match (S, A) = {P.shape[:2]}")
        if not np.all(np.isfinite(r)):
            raise StructuralError("reward has non-finite entries")
        _check_rows(P, "transition", STOCHASTIC_ATOL)
        object.__setattr__(self, "transition", _frozen(P))
        object.__setattr__(self, "reward", _frozen(r))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def r_max(self):
        return float(np.abs(self.reward).max())

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            n, m = int(data["n_states"]), int(data["n_actions"])
            P = np.array(data["transition"], dtype=float)
            r = np.array(data["reward"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise StructuralError(f"malformed MDP document: {exc}") from exc
        if P.shape != (n, m, n) or r.shape != (n, m):
            raise StructuralError(
                f"declared sizes ({n}, {m}) disagree with arrays {P.shape} / {r.shape}")
        return cls(P, r)

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_mdp(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise StructuralError(f"no such MDP file: {path}") from None
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return Mdp.from_dict(data)
    except StructuralError as exc:
        raise StructuralError(f"{path}: {exc}") from exc


def save_mdp(mdp, path):
    Path(path).write_text(json.dumps(mdp.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    """Per-state action distributions ``probs[s, a] = mu(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise StructuralError(f"policy must be a (S, A) table, got shape {p.shape}")
        _check_rows(p, "policy", STOCHASTIC_ATOL)
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def n_states(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]

    @property
    def is_deterministic(self):
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    @property
    def actions(self):
        """Most likely action per state (the chosen action when deterministic)."""
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True, eq=False)
class PolicyKernel:
    kernel: np.ndarray
    reward_vec: np.ndarray


@dataclass(frozen=True, eq=False)
class StateActionKernel:
    kernel: np.ndarray
    reward_vec: np.ndarray


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    gain: float
    bias: np.ndarray
    stationary: np.ndarray
    anchor: int


@dataclass(frozen=True)
class IrreducibilityResult:
    irreducible: bool
    witness: tuple | None = None

    def __bool__(self):
        return self.irreducible


def _check_policy(mdp, policy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise StructuralError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})")


def policy_kernel(mdp, policy):
    _check_policy(mdp, policy)
    mu = policy.probs
    return PolicyKernel(
        kernel=np.einsum("sa,sat->st", mu, mdp.transition),
        reward_vec=(mu * mdp.reward).sum(axis=1),
    )


def state_action_kernel(mdp, policy):
    _check_policy(mdp, policy)
    n, m = mdp.n_states, mdp.n_actions
    K = mdp.transition[:, :, :, None] * policy.probs[None, None, :, :]
    return StateActionKernel(kernel=K.reshape(n * m, n * m), reward_vec=mdp.reward.reshape(-1))


def reachability(kernel):
    """Boolean transitive closure: ``R[i, j]`` iff j is reachable from i (i reaches i).

    Accepts a stack of kernels with shape (..., n, n).
    """
    adj = np.asarray(kernel) > 0
    n = adj.shape[-1]
    R = (adj | np.eye(n, dtype=bool)).astype(np.float64)
    # repeated squaring doubles the covered path length each round
    for _ in range(max(1, int(np.ceil(np.log2(max(n, 2)))))):
        R = ((R @ R) > 0).astype(np.float64)
    return R > 0


def irreducibility_check(kernel):
    """Strong connectivity of the positive-entry graph of ``kernel``.

    On failure the witness ``(i, j)`` names a state ``j`` not reachable
    from ``i``.
    """
    R = reachability(kernel)
    if R.all():
        return IrreducibilityResult(True)
    if not R[0].all():
        return IrreducibilityResult(False, (0, int(np.flatnonzero(~R[0])[0])))
    i = int(np.flatnonzero(~R[:, 0])[0])
    return IrreducibilityResult(False, (i, 0))


def closed_classes(kernel):
    """Recurrent classes of a finite chain, as a list of index arrays."""
    R = reachability(kernel)
    mutual = R & R.T
    # i is recurrent iff everything it reaches reaches it back
    recurrent = ~(R & ~R.T).any(axis=1)
    classes, done = [], np.zeros(len(R), dtype=bool)
    for i in np.flatnonzero(recurrent):
        if not done[i]:
            members = mutual[i]
            done |= members
            classes.append(np.flatnonzero(members))
    return classes


def is_unichain(kernel):
    return len(closed_classes(kernel)) == 1


def _invariant(kernel):
    """Solve (K^T - I) pi = 0 with a normalisation row; valid for unichain K."""
    n = kernel.shape[0]
    A = kernel.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(A, b)


def stationary_distribution(kernel):
    kernel = np.asarray(kernel, dtype=float)
    check = irreducibility_check(kernel)
    if not check:
        i, j = check.witness
        raise DomainError(f"reducible chain: state {j} is unreachable from state {i}")
    return _invariant(kernel)


def average_reward(mdp, policy):
    pk = policy_kernel(mdp, policy)
    return float(stationary_distribution(pk.kernel) @ pk.reward_vec)


def _solve_gain_bias(kernel, reward_vec, anchor):
    n = kernel.shape[0]
    if not 0 <= anchor < n:
        raise StructuralError(f"anchor {anchor} out of range for {n} states")
    if not is_unichain(kernel):
        raise DomainError(
            "policy chain has several recurrent classes; the anchored Bellman system is singular")
    # unknowns: bias (n entries) followed by the gain
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = np.eye(n) - kernel
    M[:n, n] = 1.0
    M[n, anchor] = 1.0
    rhs = np.append(reward_vec, 0.0)
    sol = np.linalg.solve(M, rhs)
    bias = sol[:n]
    bias[anchor] = 0.0
    return float(sol[n]), bias, _invariant(kernel)


def solve_bellman(mdp, policy, anchor=0):
    """Exact (gain, bias) of ``policy`` with ``bias[anchor] = 0``."""
    pk = policy_kernel(mdp, policy)
    gain, bias, pi = _solve_gain_bias(pk.kernel, pk.reward_vec, anchor)
    return EvaluationResult(gain, bias, pi, anchor)


def flat_index(mdp, anchor):
    if isinstance(anchor, tuple):
        s, a = anchor
        return int(s) * mdp.n_actions + int(a)
    return int(anchor)


def solve_bellman_q(mdp, policy, anchor=0):
    """Exact (gain, Q) of ``policy``; Q is flat with ``Q[anchor] = 0``.

    Deterministic policies leave unchosen pairs transient, so only a single
    recurrent class is required, not irreducibility.
    """
    sak = state_action_kernel(mdp, policy)
    idx = flat_index(mdp, anchor)
    gain, bias, pi = _solve_gain_bias(sak.kernel, sak.reward_vec, idx)
    return EvaluationResult(gain, bias, pi, idx)


def gain_vector(kernel, reward_vec):
    """Long-run average reward from each start state, for any finite chain."""
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.shape[0]
    g = np.zeros(n)
    recurrent = np.zeros(n, dtype=bool)
    for cls in closed_classes(kernel):
        sub = kernel[np.ix_(cls, cls)]
        g[cls] = _invariant(sub) @ reward_vec[cls]
        recurrent[cls] = True
    trans = np.flatnonzero(~recurrent)
    if len(trans):
        rec = np.flatnonzero(recurrent)
        A = np.eye(len(trans)) - kernel[np.ix_(trans, trans)]
        g[trans] = np.linalg.solve(A, kernel[np.ix_(trans, rec)] @ g[rec])
    return g


def deterministic_policies(n_states, n_actions):
    """All action selectors, as an (A**S, S) integer array in lexicographic order."""
    total = n_actions ** n_states
    if total > MAX_ENUMERATION:
        raise DomainError(
            f"{n_actions}^{n_states} = {total} deterministic policies exceeds the "
            f"enumeration limit {MAX_ENUMERATION}")
    return np.array(list(itertools.product(range(n_actions), repeat=n_states)), dtype=int).reshape(
        total, n_states)


def _selector_kernels(mdp, actions):
    idx = np.arange(mdp.n_states)[None, :]
    return mdp.transition[idx, actions], mdp.reward[idx, actions]


def deterministic_stationary(mdp, actions=None):
    """Stationary distributions of every deterministic policy (batched).

    Raises DomainError naming the first policy whose chain is reducible.
    """
    if actions is None:
        actions = deterministic_policies(mdp.n_states, mdp.n_actions)
    kernels, _ = _selector_kernels(mdp, actions)
    irreducible = reachability(kernels).all(axis=(1, 2))
    if not irreducible.all():
        k = int(np.flatnonzero(~irreducible)[0])
        i, j = irreducibility_check(kernels[k]).witness
        raise DomainError(
            f"deterministic policy {actions[k].tolist()} is reducible: "
            f"state {j} unreachable from state {i}")
    n = mdp.n_states
    A = np.transpose(kernels, (0, 2, 1)) - np.eye(n)
    A[:, -1, :] = 1.0
    b = np.zeros((len(actions), n, 1))
    b[:, -1, 0] = 1.0
    return np.linalg.solve(A, b)[:, :, 0]


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    gain: float
    policy: StochasticPolicy
    gain_vector: np.ndarray


def optimal_by_enumeration(mdp):
    """Exact optimal gain by evaluating every deterministic policy.

    Handles multichain policies through per-state gain vectors; the returned
    policy attains the componentwise-optimal gain vector when one exists and
    ``gain`` is its smallest component.
    """
    actions = deterministic_policies(mdp.n_states, mdp.n_actions)
    kernels, rewards = _selector_kernels(mdp, actions)
    gains = np.empty((len(actions), mdp.n_states))
    uni = reachability(kernels).all(axis=(1, 2))
    for k in np.flatnonzero(~uni):
        uni[k] = is_unichain(kernels[k])
    if uni.any():
        n = mdp.n_states
        A = np.transpose(kernels[uni], (0, 2, 1)) - np.eye(n)
        A[:, -1, :] = 1.0
        b = np.zeros((int(uni.sum()), n, 1))
        b[:, -1, 0] = 1.0
        pis = np.linalg.solve(A, b)[:, :, 0]
        gains[uni] = np.einsum("ks,ks->k", pis, rewards[uni])[:, None]
    for k in np.flatnonzero(~uni):
        gains[k] = gain_vector(kernels[k], rewards[k])
    # lexsort: last key is primary
    order = np.lexsort((-gains.mean(axis=1), -gains.min(axis=1)))
    best = order[0]
    return OptimalSolution(
        gain=float(gains[best].min()),
        policy=StochasticPolicy.deterministic(actions[best], mdp.n_actions),
        gain_vector=gains[best].copy(),
    )


def optimal_by_policy_iteration(mdp, anchor=0, max_iters=1000):
    """Exact average-reward policy iteration for MDPs too large to enumerate.

    Keeps the incumbent action on ties so the iteration terminates.
    """
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iters):
        policy = StochasticPolicy.deterministic(actions, mdp.n_actions)
        ev = solve_bellman(mdp, policy, anchor)
        q = mdp.reward + mdp.transition @ ev.bias
        best = q.max(axis=1)
        keep = q[np.arange(mdp.n_states), actions] >= best - 1e-12
        new = np.where(keep, actions, np.argmax(q, axis=1))
        if np.array_equal(new, actions):
            return OptimalSolution(ev.gain, policy, np.full(mdp.n_states, ev.gain))
        actions = new
    raise DomainError(f"policy iteration did not stabilise in {max_iters} iterations")


def gamma_lower_bound(mdp, policies, space="state"):
    """Smallest stationary probability over the given policies.

    ``space="state_action"`` uses the invariant distributions of the
    state-action kernels instead.
    """
    policies = list(policies)
    if not policies:
        raise DomainError("gamma_lower_bound needs at least one policy")
    best = np.inf
    for policy in policies:
        if space == "state":
            kern = policy_kernel(mdp, policy).kernel
        elif space == "state_action":
            kern = state_action_kernel(mdp, policy).kernel
        else:
            raise StructuralError(f"unknown space {space!r}")
        best = min(best, float(stationary_distribution(kern).min()))
    return best
