"""Policy-based RL on Q: TD(lambda) evaluation, three improvement rules, certificates.

Row ``k`` of an RL trace (k = 0..T) holds Q_k, the gap statistics of
T^Q Q_k - Q_k, the next policy mu_{k+1} with its exact gain, the realised
improvement error eps_k = ||T^Q Q_k - T^Q_{mu_{k+1}} Q_k|| with its
rule-specific cap, and delta_k = ||Q_k - Q_{mu_k}|| (None for k = 0).
"""
from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .bellman import apply_q_optimal_op, apply_q_policy_op
from .errors import DomainError, NumericalError, PreconditionError, StructuralError
from .mdp import (
    MAX_ENUMERATION,
    StochasticPolicy,
    flat_index,
    optimal_by_enumeration,
    optimal_by_policy_iteration,
    policy_kernel,
    solve_bellman_q,
    state_action_kernel,
    stationary_distribution,
)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[1] < 1:
            raise StructuralError(f"features must be a 2-D matrix, got shape {phi.shape}")
        norms = np.linalg.norm(phi, axis=1)
        if norms.max() > 1.0 + 1e-12:
            raise StructuralError(f"feature row {int(norms.argmax())} has norm {norms.max():.6g} > 1")
        if np.linalg.matrix_rank(phi) < phi.shape[1]:
            raise StructuralError("feature columns are linearly dependent")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def tabular(cls, n_pairs):
        return cls(np.eye(n_pairs))

    @property
    def d(self):
        return self.phi.shape[1]

    def constant_direction(self):
        """theta_e with Phi theta_e = 1, or None when 1 is not in the span."""
        theta, *_ = np.linalg.lstsq(self.phi, np.ones(len(self.phi)), rcond=None)
        if np.max(np.abs(self.phi @ theta - 1.0)) > 1e-9:
            return None
        return theta


@dataclass(frozen=True)
class TdConfig:
    lam: float = 0.5
    c1: float = 1.0
    c2: float = 10.0
    c_alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise DomainError(f"lambda must lie in [0, 1), got {self.lam!r}")
        if not (self.c1 > 0 and self.c2 > 0 and self.c_alpha > 0):
            raise DomainError("c1, c2 and c_alpha must be positive")

    def to_dict(self):
        return {"lam": self.lam, "c1": self.c1, "c2": self.c2, "c_alpha": self.c_alpha}


@dataclass
class TdState:
    theta: np.ndarray
    avg_reward: float
    trace: np.ndarray
    step: int
    config: TdConfig


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    duplicate: np.ndarray  # True where the sample repeats the previous one

    def __len__(self):
        return len(self.states)

    def pairs(self, n_actions):
        return self.states * n_actions + self.actions


def _cumulative(rows):
    cum = np.cumsum(rows, axis=-1)
    cum[..., -1] = 1.0
    return cum.tolist()


def sample_trajectory(mdp, policy, length, seed=0, schweitzer_kappa=None, start=None, stream_key=()):
    """Roll out ``policy`` for ``length`` emitted samples.

    With ``schweitzer_kappa`` the rollout runs on the untransformed ``mdp``
    and each sample is repeated with probability kappa per repeat (a
    geometric number of copies), which reproduces the lazy chain's holding
    times. All rewards are then scaled by (1 - kappa).
    """
    length = int(length)
    if length < 1:
        raise DomainError("trajectory length must be positive")
    if schweitzer_kappa is not None and not 0.0 < schweitzer_kappa < 1.0:
        raise DomainError(f"kappa must lie in (0, 1), got {schweitzer_kappa!r}")
    gen = rng.stream(seed, "trajectory", *stream_key)
    n, m = mdp.n_states, mdp.n_actions
    cum_p = _cumulative(mdp.transition)
    cum_mu = _cumulative(policy.probs)
    u_state = gen.random(length).tolist()
    u_action = gen.random(length).tolist()
    u_dup = gen.random(length).tolist() if schweitzer_kappa is not None else None
    scale = 1.0 if schweitzer_kappa is None else 1.0 - schweitzer_kappa

    states = [0] * length
    actions = [0] * length
    dup = [False] * length
    s = int(gen.integers(n)) if start is None else int(start)
    a = min(bisect.bisect_right(cum_mu[s], u_action[0]), m - 1)
    states[0], actions[0] = s, a
    for t in range(1, length):
        if u_dup is not None and u_dup[t] < schweitzer_kappa:
            states[t], actions[t], dup[t] = s, a, True
            continue
        s = min(bisect.bisect_right(cum_p[s][a], u_state[t]), n - 1)
        a = min(bisect.bisect_right(cum_mu[s], u_action[t]), m - 1)
        states[t], actions[t] = s, a
    states = np.array(states, dtype=int)
    actions = np.array(actions, dtype=int)
    rewards = scale * mdp.reward[states, actions]
    return Trajectory(states, actions, rewards, np.array(dup, dtype=bool))


def reanchor(features, theta, anchor_index):
    """Shift theta along the constant direction so that Q[anchor] = 0."""
    theta_e = features.constant_direction()
    if theta_e is None:
        return theta
    return theta - (features.phi[anchor_index] @ theta) * theta_e


def td_lambda_run(trajectory, features, config=None, anchor=0, n_actions=None, theta0=None, J0=0.0):
    """TD(lambda) with a running average-reward estimate over one trajectory.

    ``trajectory`` is a Trajectory (then ``n_actions`` is required) or an
    array of flat state-action indices paired with a reward array via a
    ``(pairs, rewards)`` tuple.
    """
    config = config or TdConfig()
    if isinstance(trajectory, Trajectory):
        if n_actions is None:
            raise StructuralError("n_actions is required to flatten a Trajectory")
        pairs, rewards = trajectory.pairs(n_actions), trajectory.rewards
    else:
        pairs, rewards = trajectory
    pairs = np.asarray(pairs, dtype=int)
    rewards = np.asarray(rewards, dtype=float)
    if len(pairs) < 2 or len(pairs) != len(rewards):
        raise StructuralError("trajectory needs at least two samples and matching rewards")
    phi = features.phi
    d = features.d
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    z = np.zeros(d)
    J = float(J0)
    lam, c1, c2, ca = config.lam, config.c1, config.c2, config.c_alpha
    tabular = phi.shape[0] == d and np.array_equal(phi, np.eye(d))
    pl = pairs.tolist()
    rl_ = rewards.tolist()
    steps = len(pl) - 1
    for t in range(steps):
        i, j = pl[t], pl[t + 1]
        beta = c1 / (t + c2)
        z *= lam
        if tabular:
            z[i] += 1.0
            dt = rl_[t] - J + theta[j] - theta[i]
        else:
            z += phi[i]
            dt = rl_[t] - J + (phi[j] - phi[i]) @ theta
        J += ca * beta * (rl_[t] - J)
        theta += (beta * dt) * z
        if (t & 1023) == 1023 and not math.isfinite(dt):
            raise NumericalError(f"TD(lambda) diverged at step {t}", step=t)
    if not (np.all(np.isfinite(theta)) and math.isfinite(J)):
        raise NumericalError(f"TD(lambda) diverged by step {steps}", step=steps)
    theta = reanchor(features, theta, anchor)
    return TdState(theta, J, z, steps, config)


def _matrix_power_series(K, lam, tol=1e-12):
    """(1 - lam) sum_m lam^m K^{m+1}, truncated once lam^m < tol."""
    if lam == 0.0:
        return K.copy()
    out = np.zeros_like(K)
    power = K.copy()
    weight = 1.0
    while weight >= tol:
        out += weight * power
        power = power @ K
        weight *= lam
    return (1.0 - lam) * out


def td_conditioning(features, kernel_sa, stationary_sa, lam):
    """Smallest value of theta' Phi' D (I - K^lam) Phi theta over unit theta orthogonal to theta_e."""
    phi = features.phi
    D = np.diag(stationary_sa)
    K_lam = _matrix_power_series(np.asarray(kernel_sa, dtype=float), lam)
    M = phi.T @ D @ (np.eye(len(D)) - K_lam) @ phi
    S = 0.5 * (M + M.T)
    theta_e = features.constant_direction()
    if theta_e is not None:
        # orthonormal basis of the complement of theta_e
        e = theta_e / np.linalg.norm(theta_e)
        basis = np.linalg.svd(np.eye(len(e)) - np.outer(e, e))[0][:, : len(e) - 1]
        S = basis.T @ S @ basis
    if S.size == 0:
        return float("inf")
    value = float(np.linalg.eigvalsh(S)[0])
    if value <= -1e-10:
        warnings.warn(f"TD conditioning is negative ({value:.3e}); features or mixing are degenerate")
    return value


def expected_td_lambda(mdp, policy, features, config=None, anchor=0, step=0.05, iters=20000, tol=1e-12):
    """Synchronous expected TD(lambda) with constant step; a deterministic test oracle."""
    config = config or TdConfig()
    sak = state_action_kernel(mdp, policy)
    K, r = sak.kernel, sak.reward_vec
    pi = stationary_distribution(K)
    phi = features.phi
    D = np.diag(pi)
    K_lam = _matrix_power_series(K, config.lam)
    # E[z_t d_t] = Phi' D sum_m lam^m K^m (r - J + K Phi theta - Phi theta)
    eye = np.eye(len(pi))
    A = phi.T @ D @ (K_lam - eye) @ phi
    R_lam = phi.T @ D @ (eye + config.lam / (1.0 - config.lam) * K_lam)
    theta = np.zeros(features.d)
    J = 0.0
    for _ in range(iters):
        J_new = J + step * config.c_alpha * (pi @ r - J)
        b = R_lam @ (r - J)
        theta_new = theta + step * (A @ theta + b)
        done = max(abs(J_new - J), np.max(np.abs(theta_new - theta))) < tol
        theta, J = theta_new, J_new
        if done:
            break
    return reanchor(features, theta, flat_index(mdp, anchor)), J


# policy improvement rules

RULES = ("greedy", "softmax", "mirror")


@dataclass(frozen=True)
class PolicyUpdateRule:
    kind: str
    beta: float

    def __post_init__(self):
        if self.kind not in RULES:
            raise StructuralError(f"unknown rule {self.kind!r}; expected one of {RULES}")
        if self.kind == "greedy" and self.beta < 1.0:
            raise DomainError("greedy rule needs beta >= 1")
        if self.kind != "mirror" and not self.beta > 0:
            raise DomainError("beta must be positive")
        if self.kind == "mirror" and self.beta < 0:
            raise DomainError("beta must be nonnegative")

    def to_dict(self):
        return {"kind": self.kind, "beta": self.beta}


def greedy_update(Q, beta):
    Q = np.asarray(Q, dtype=float)
    if beta < 1.0:
        raise DomainError(f"greedy update needs beta >= 1, got {beta!r}")
    n, m = Q.shape
    probs = np.full((n, m), 1.0 / (beta * m))
    probs[np.arange(n), np.argmax(Q, axis=1)] += 1.0 - 1.0 / beta
    return StochasticPolicy(probs)


def softmax_update(Q, beta):
    Q = np.asarray(Q, dtype=float)
    logits = beta * Q
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return StochasticPolicy(w / w.sum(axis=1, keepdims=True))


def mirror_log_update(log_prior, Q, beta):
    """Normalised log-probabilities of the mirror step, computed in log space."""
    logits = np.asarray(log_prior, dtype=float) + beta * np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("mirror descent logits are not finite")
    top = logits.max(axis=1, keepdims=True)
    return logits - top - np.log(np.exp(logits - top).sum(axis=1, keepdims=True))


def mirror_descent_update(prev_policy, Q, beta):
    prior = prev_policy.probs
    if np.any(prior <= 0):
        raise PreconditionError("mirror descent needs a strictly positive previous policy")
    return _from_log(mirror_log_update(np.log(prior), Q, beta))


def _from_log(log_probs):
    w = np.exp(log_probs)
    return StochasticPolicy(w / w.sum(axis=1, keepdims=True))


def improvement_error(mdp, Q, policy):
    """||T^Q Q - T^Q_mu Q||_inf for flat Q."""
    return float(np.max(np.abs(apply_q_optimal_op(mdp, Q) - apply_q_policy_op(mdp, policy, Q))))


def greedy_cap(Q, beta):
    return 2.0 * float(np.max(np.abs(Q))) / beta


def softmax_cap(n_actions, beta):
    return math.log(n_actions) / beta


def _log_probs(policy_or_log):
    if isinstance(policy_or_log, StochasticPolicy):
        with np.errstate(divide="ignore"):
            return np.log(policy_or_log.probs)
    return np.asarray(policy_or_log, dtype=float)


def mirror_cap(new_policy, optimal_actions, beta):
    """(1/beta) log(1/omega), omega = min_s mu_{k+1}(a*(s) | s).

    Accepts a policy or its log-probabilities, so tiny omega stays exact.
    """
    logp = _log_probs(new_policy)
    return -float(logp[np.arange(len(logp)), optimal_actions].min()) / beta


def mirror_cap_prior(prev_policy, Q, beta):
    """(1/beta) log(1/min_s mu_k(argmax_a Q(s, a) | s)); provable for the mirror step."""
    logp = _log_probs(prev_policy)
    top = np.argmax(np.asarray(Q, dtype=float), axis=1)
    return -float(logp[np.arange(len(logp)), top].min()) / beta


def apply_rule(rule, Q, log_prev):
    """Returns (policy, log-probabilities); the mirror rule works in log space."""
    if rule.kind == "mirror":
        logp = mirror_log_update(log_prev, Q, rule.beta)
        return _from_log(logp), logp
    policy = greedy_update(Q, rule.beta) if rule.kind == "greedy" else softmax_update(Q, rule.beta)
    return policy, _log_probs(policy)


def log_gamma_sa(mdp, policy, log_probs):
    """log of the smallest state-action invariant entry, pi(s) mu(a|s)."""
    pi = stationary_distribution(policy_kernel(mdp, policy).kernel)
    return float((np.log(pi)[:, None] + log_probs).min())


@dataclass
class RlTrace:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)


def _optimum(mdp):
    if mdp.n_actions ** mdp.n_states <= MAX_ENUMERATION:
        return optimal_by_enumeration(mdp)
    return optimal_by_policy_iteration(mdp)


def run_policy_based(mdp, rule, features=None, td_config=None, tau=10000, iterations=10, seed=0,
                     anchor=0, Q0=None, mu0=None, schweitzer_kappa=None, evaluation="td"):
    """Generic policy-based loop: improve on Q_k, evaluate mu_{k+1} by TD(lambda).

    ``evaluation="exact"`` replaces TD with the exact anchored Q of mu_{k+1}.
    """
    if evaluation not in ("td", "exact"):
        raise StructuralError(f"unknown evaluation {evaluation!r}")
    n, m = mdp.n_states, mdp.n_actions
    features = features or FeatureMap.tabular(n * m)
    if features.phi.shape[0] != n * m:
        raise StructuralError(f"features have {features.phi.shape[0]} rows, expected {n * m}")
    td_config = td_config or TdConfig()
    a_idx = flat_index(mdp, anchor)
    opt = _optimum(mdp)
    J_star = opt.gain
    a_star = opt.policy.actions
    Q = np.zeros(n * m) if Q0 is None else np.array(Q0, dtype=float).reshape(-1)
    prev = mu0 or StochasticPolicy.uniform(n, m)
    if rule.kind == "mirror" and np.any(prev.probs <= 0):
        raise PreconditionError("mirror descent needs a strictly positive initial policy")
    log_prev = _log_probs(prev)
    delta = None
    visited = []
    trace = RlTrace()
    for k in range(iterations + 1):
        Qm = Q.reshape(n, m)
        policy, log_pol = apply_rule(rule, Qm, log_prev)
        resid = apply_q_optimal_op(mdp, Q) - Q
        eps = improvement_error(mdp, Q, policy)
        if rule.kind == "greedy":
            cap = greedy_cap(Q, rule.beta)
        elif rule.kind == "softmax":
            cap = softmax_cap(m, rule.beta)
        else:
            cap = mirror_cap(log_pol, a_star, rule.beta)
        ev = solve_bellman_q(mdp, policy, a_idx)
        row = {
            "k": k,
            "Q": Q.tolist(),
            "delta_real": delta,
            "u": float(resid.max()),
            "l": float(resid.min()),
            "policy": policy.probs.tolist(),
            "gain": ev.gain,
            "eps_real": eps,
            "cap": cap,
            "tau": tau,
        }
        if rule.kind == "mirror":
            row["cap_prior"] = mirror_cap_prior(log_prev, Qm, rule.beta)
            row["log_omega"] = float(log_pol[np.arange(n), a_star].min())
        trace.rows.append(row)
        if k == iterations:
            break
        visited.append(log_gamma_sa(mdp, policy, log_pol))
        if evaluation == "exact":
            Q = ev.bias.copy()
        else:
            traj = sample_trajectory(mdp, policy, tau, seed, schweitzer_kappa, stream_key=(k,))
            state = td_lambda_run(traj, features, td_config, a_idx, n_actions=m)
            Q = features.phi @ state.theta
            row["td_avg_reward"] = state.avg_reward
            row["reward_sum"] = float(traj.rewards.sum())
        delta = float(np.max(np.abs(Q - ev.bias)))
        log_prev = log_pol

    log_gamma = min(visited) if visited else None
    trace.meta = {
        "algorithm": "policy_based",
        "rule": rule.to_dict(),
        "td_config": td_config.to_dict(),
        "tau": tau,
        "iterations": iterations,
        "seed": seed,
        "anchor": a_idx,
        "J_star": J_star,
        "optimal_actions": a_star.tolist(),
        "gamma": math.exp(log_gamma) if visited else None,
        "log_gamma": log_gamma,
        "c0": J_star - trace.rows[0]["l"],
        "features_d": features.d,
        "schweitzer_kappa": schweitzer_kappa,
        "evaluation": evaluation,
        "mdp_hash": mdp.content_hash(),
    }
    return trace


@dataclass(frozen=True)
class FinalIterateReport:
    lhs: float
    rhs: float
    rhs_stated: float
    lemma_violations: list
    sandwich_violations: list

    @property
    def passed(self):
        return self.lhs <= self.rhs + 1e-9 and not self.lemma_violations and not self.sandwich_violations

    @property
    def passed_stated(self):
        return self.lhs <= self.rhs_stated + 1e-9


def final_iterate_certificate(trace, gamma=None, tol=1e-9):
    """Final-iterate bound from realised errors, plus the per-step lemma and sandwich.

    ``rhs`` sums the improvement errors eps_0..eps_{T-1}; ``rhs_stated``
    omits eps_0, the shorter form.
    """
    rows = trace.rows
    T = len(rows) - 1
    if T < 1:
        raise PreconditionError("certificate needs at least one iteration")
    gamma = trace.meta["gamma"] if gamma is None else gamma
    if gamma is None or not gamma > 0:
        raise PreconditionError("trace has no positive gamma")
    J_star = trace.meta["J_star"]
    eps = [r["eps_real"] for r in rows]
    dlt = [r["delta_real"] for r in rows]
    if any(d is None for d in dlt[1:]):
        raise PreconditionError("trace lacks realised evaluation errors")
    q = 1.0 - gamma
    init = q ** T * (J_star - rows[0]["l"])
    evaluation = 2.0 * sum(q ** l * dlt[T - l] for l in range(T))
    improvement = sum(q ** (l - 1) * eps[T - l] for l in range(1, T + 1))
    improvement_stated = sum(q ** (l - 1) * eps[T - l] for l in range(1, T))
    terminal = eps[T]
    lhs = J_star - rows[T]["gain"]

    lemma = []
    for k in range(1, T + 1):
        lhs_k = J_star - rows[k]["l"]
        rhs_k = q * (J_star - rows[k - 1]["l"]) + eps[k - 1] + 2.0 * dlt[k]
        if rhs_k - lhs_k < -tol:
            lemma.append((k, rhs_k - lhs_k))
    sandwich = []
    for r in rows:
        for left, right in ((r["l"] - r["eps_real"], r["gain"]), (r["gain"], J_star), (J_star, r["u"])):
            if right - left < -tol:
                sandwich.append((r["k"], right - left))
    return FinalIterateReport(
        lhs=lhs,
        rhs=init + evaluation + improvement + terminal,
        rhs_stated=init + evaluation + improvement_stated + terminal,
        lemma_violations=lemma,
        sandwich_violations=sandwich,
    )


def cap_violations(trace, column="cap", tol=1e-12):
    return [(r["k"], r["eps_real"], r[column]) for r in trace.rows
            if column in r and r["eps_real"] > r[column] + tol]


def corollary_bound(rule_kind, T, gamma, c0, beta, n_actions, delta0_bar, C_hat, tau, eta=None, omega=None):
    """Expected final-iterate bound for a given improvement rule with TD evaluation."""
    if rule_kind == "greedy":
        policy_term = 2.0 * eta / beta
    elif rule_kind == "softmax":
        policy_term = math.log(n_actions) / beta
    elif rule_kind == "mirror":
        policy_term = math.log(1.0 / omega) / beta
    else:
        raise StructuralError(f"unknown rule {rule_kind!r}")
    return ((1.0 - gamma) ** T * c0 + (1.0 + gamma) / gamma * policy_term
            + 2.0 / gamma * (delta0_bar + C_hat / math.sqrt(tau)))


def conditioned_td_config(mdp, policy, features=None, lam=0.5, scale=0.5):
    """Step constants c1 = c2 = scale / Delta for ``policy``.

    A 1/t step schedule only reaches the 1/sqrt(t) rate when c1 * Delta
    exceeds 1/2; the default constants are far below that on small-gamma
    instances.
    """
    features = features or FeatureMap.tabular(mdp.n_states * mdp.n_actions)
    sak = state_action_kernel(mdp, policy)
    delta = td_conditioning(features, sak.kernel, stationary_distribution(sak.kernel), lam)
    if not delta > 0:
        raise DomainError(f"TD conditioning is not positive ({delta!r})")
    c = scale / delta
    return TdConfig(lam=lam, c1=c, c2=c)
