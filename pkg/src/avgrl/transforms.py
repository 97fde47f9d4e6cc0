"""Exploration mixing and the Schweitzer (lazy-chain) transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .mdp import Mdp

DEFAULT_EPS = 0.05
DEFAULT_KAPPA = 0.1


@dataclass(frozen=True)
class TransformRecord:
    kind: str  # "exploration_mix" or "aperiodicity"
    parameter: float
    provenance: str  # content hash of the source MDP

    def to_dict(self):
        return {"kind": self.kind, "parameter": self.parameter, "provenance": self.provenance}


def _check_unit(name, value):
    if not (0.0 < value < 1.0):
        raise DomainError(f"{name} must lie in (0, 1), got {value!r}")


def exploration_mix(mdp, eps=DEFAULT_EPS):
    """Blend each action with the uniform-random action at rate ``eps``."""
    _check_unit("eps", eps)
    P, r = mdp.transition, mdp.reward
    P_hat = (1.0 - eps) * P + eps * P.mean(axis=1, keepdims=True)
    r_hat = (1.0 - eps) * r + eps * r.mean(axis=1, keepdims=True)
    # renormalise away rounding so the result passes the 1e-12 stochasticity check
    P_hat = P_hat / P_hat.sum(axis=2, keepdims=True)
    return Mdp(P_hat, r_hat), TransformRecord("exploration_mix", float(eps), mdp.content_hash())


def aperiodicity_transform(mdp, kappa=DEFAULT_KAPPA):
    """Make every chain lazy: stay put with extra probability ``kappa``."""
    _check_unit("kappa", kappa)
    n = mdp.n_states
    P_hat = (1.0 - kappa) * mdp.transition
    idx = np.arange(n)
    P_hat[idx, :, idx] += kappa
    r_hat = (1.0 - kappa) * mdp.reward
    return Mdp(P_hat, r_hat), TransformRecord("aperiodicity", float(kappa), mdp.content_hash())


def default_pipeline(mdp, eps=DEFAULT_EPS, kappa=DEFAULT_KAPPA):
    """Mix then lazify; returns the final MDP and both records in order."""
    mixed, rec1 = exploration_mix(mdp, eps)
    lazy, rec2 = aperiodicity_transform(mixed, kappa)
    return lazy, [rec1, rec2]
