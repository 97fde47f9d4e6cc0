"""Regret accounting for the policy-based loop."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StructuralError


@dataclass(frozen=True)
class RegretLedger:
    horizon_K: int
    tau: int
    J_star: float
    gains: tuple
    pseudo_regret: float
    estimation_term: float

    @property
    def total(self):
        return self.pseudo_regret + self.estimation_term


def decompose_regret(rewards, gains, J_star, tau=None):
    """Split sum(J* - r_t) into tau * sum(J* - J_mu_t) and sum(J_mu_t - r_t).

    ``gains`` holds one gain per block of ``tau`` consecutive rewards.
    """
    rewards = np.asarray(rewards, dtype=float)
    gains = np.asarray(gains, dtype=float)
    if len(gains) == 0:
        raise StructuralError("need at least one gain")
    if tau is None:
        if len(rewards) % len(gains):
            raise StructuralError(f"{len(rewards)} rewards do not split into {len(gains)} equal blocks")
        tau = len(rewards) // len(gains)
    if len(rewards) != tau * len(gains):
        raise StructuralError(f"expected {tau * len(gains)} rewards, got {len(rewards)}")
    per_step = np.repeat(gains, tau)
    pseudo = float(tau * np.sum(J_star - gains))
    estimation = float(np.sum(per_step - rewards))
    return pseudo, estimation


def ledger_from_blocks(reward_sums, gains, J_star, tau):
    """Same split when only per-block reward sums were recorded."""
    reward_sums = np.asarray(reward_sums, dtype=float)
    gains = np.asarray(gains, dtype=float)
    if reward_sums.shape != gains.shape:
        raise StructuralError("need one reward sum per gain")
    pseudo = float(tau * np.sum(J_star - gains))
    estimation = float(np.sum(tau * gains - reward_sums))
    return RegretLedger(tau * len(gains), tau, J_star, tuple(gains.tolist()), pseudo, estimation)


def c5_constant(gamma, omega, C_hat):
    return (1.0 + gamma) * math.log(1.0 / omega) + 2.0 * C_hat


def c6_constant(c5, c0):
    return 2.0 * c5 ** (2.0 / 3.0) * c0 ** (1.0 / 3.0)


def pseudo_regret_bound(K, tau, gamma, c0, delta0_bar, omega, C_hat):
    """(1/gamma)(tau c0 + 2 K delta0 + K c5 / sqrt(tau)) with beta = sqrt(tau)."""
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma!r}")
    if not (K > 0 and tau > 0 and c0 >= 0 and delta0_bar >= 0 and 0 < omega <= 1 and C_hat >= 0):
        raise DomainError("bound parameters out of range")
    c5 = c5_constant(gamma, omega, C_hat)
    return (tau * c0 + 2.0 * K * delta0_bar + K * c5 / math.sqrt(tau)) / gamma


def log_pseudo_regret_bound(K, tau, log_gamma, c0, delta0_bar, log_omega, C_hat):
    """Logarithm of pseudo_regret_bound, for gamma or omega below float range."""
    if not log_gamma <= 0.0 or not log_omega <= 0.0:
        raise DomainError("log_gamma and log_omega must be nonpositive")
    c5 = (1.0 + math.exp(log_gamma)) * (-log_omega) + 2.0 * C_hat
    return math.log(tau * c0 + 2.0 * K * delta0_bar + K * c5 / math.sqrt(tau)) - log_gamma


def optimize_tau(K, c0, c5):
    if not (K >= 1 and c0 > 0 and c5 > 0):
        raise DomainError("optimize_tau needs positive K, c0, c5")
    tau = int(round((K * c5 / c0) ** (2.0 / 3.0)))
    return max(1, min(int(K), tau))


def estimate_c_hat(taus, errors):
    """Least squares through the origin of error against 1/sqrt(tau)."""
    taus = np.asarray(taus, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(taus) < 4 or len(taus) != len(errors):
        raise StructuralError("need matching tau and error arrays with at least 4 points")
    x = 1.0 / np.sqrt(taus)
    return float(x @ errors / (x @ x))


def loglog_slope(xs, ys):
    """Least-squares slope of log y against log x."""
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.asarray(ys, dtype=float))
    if len(xs) < 2:
        raise StructuralError("need at least two points for a slope")
    return float(np.polyfit(xs, ys, 1)[0])


def run_regret_schedule(mdp, K, c0, c5, seed=0, td_config=None, features=None):
    """Mirror descent with beta = sqrt(tau) and tau from optimize_tau.

    Uses T = K // tau iterations, so the realised horizon is tau * T <= K.
    """
    from .rl import PolicyUpdateRule, run_policy_based

    tau = optimize_tau(K, c0, c5)
    T = max(1, int(K) // tau)
    trace = run_policy_based(mdp, PolicyUpdateRule("mirror", math.sqrt(tau)), features, td_config,
                             tau=tau, iterations=T, seed=seed)
    rows = trace.rows[:T]  # row k carries mu_{k+1}, t = 1..T
    ledger = ledger_from_blocks([r["reward_sum"] for r in rows], [r["gain"] for r in rows],
                                trace.meta["J_star"], tau)
    return ledger, trace


@dataclass(frozen=True)
class RegretPlan:
    C_hat: float
    c0: float
    c5: float
    gamma_plan: float
    td_errors: tuple
    taus: tuple


def plan_regret(mdp, td_config=None, features=None, taus=(1000, 2000, 4000, 8000), seeds=5,
                seed_offset=0):
    """Measure C_hat on the uniform policy and derive c0 and the planning c5.

    The planning c5 uses omega = 1/|A| (the uniform starting policy) and
    gamma of the uniform policy's state-action chain, since the run's own
    values are only known afterwards.
    """
    from .mdp import StochasticPolicy, optimal_by_enumeration, solve_bellman_q, gamma_lower_bound
    from .rl import FeatureMap, sample_trajectory, td_lambda_run

    n, m = mdp.n_states, mdp.n_actions
    features = features or FeatureMap.tabular(n * m)
    uniform = StochasticPolicy.uniform(n, m)
    Q_mu = solve_bellman_q(mdp, uniform, 0).bias
    errors = []
    for tau in taus:
        errs = []
        for s in range(seeds):
            traj = sample_trajectory(mdp, uniform, tau, seed_offset + s, stream_key=(1 << 20,))
            theta = td_lambda_run(traj, features, td_config, 0, n_actions=m).theta
            errs.append(float(np.max(np.abs(features.phi @ theta - Q_mu))))
        errors.append(float(np.median(errs)))
    C_hat = estimate_c_hat(taus, errors)
    # with Q_0 = 0 the initial residual is r itself
    c0 = optimal_by_enumeration(mdp).gain - float(mdp.reward.min())
    gamma_plan = gamma_lower_bound(mdp, [uniform], "state_action")
    c5 = c5_constant(gamma_plan, 1.0 / m, C_hat)
    return RegretPlan(C_hat, c0, c5, gamma_plan, tuple(errors), tuple(taus))
