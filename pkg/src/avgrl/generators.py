"""Benchmark instance generators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import StructuralError
from .mdp import Mdp
from .transforms import DEFAULT_EPS, exploration_mix


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int
    n_actions: int
    concentration: float = 1.0
    r_lo: float = 0.0
    r_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise StructuralError("n_states and n_actions must be at least 1")
        if not self.concentration > 0:
            raise StructuralError("concentration must be positive")
        if self.r_lo > self.r_hi:
            raise StructuralError("r_lo must not exceed r_hi")


def generate_random_mdp(spec, eps=DEFAULT_EPS):
    """Dirichlet rows (normalised gamma variates), uniform rewards, then eps-mix."""
    gen = rng.stream(spec.seed, "mdp-gen", spec.n_states, spec.n_actions)
    n, m = spec.n_states, spec.n_actions
    g = gen.gamma(spec.concentration, size=(n, m, n))
    # tiny concentrations can underflow a whole row to zero
    g[g.sum(axis=2) == 0] = 1.0
    P = g / g.sum(axis=2, keepdims=True)
    r = gen.uniform(spec.r_lo, spec.r_hi, size=(n, m))
    mixed, _ = exploration_mix(Mdp(P, r), eps)
    return mixed


# up, right, down, left as (drow, dcol)
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def generate_gridworld(width, height, slip=0.0, rewards=None):
    """Four-action grid; slip mass goes half to each lateral move, walls reflect.

    ``rewards`` maps (row, col) to the reward collected by any action taken in
    that cell. States are numbered row-major.
    """
    if int(width) != width or int(height) != height or width < 1 or height < 1:
        raise StructuralError(f"grid dimensions must be positive integers, got {width}x{height}")
    if not 0.0 <= slip < 1.0:
        raise StructuralError(f"slip must lie in [0, 1), got {slip!r}")
    width, height = int(width), int(height)
    n = width * height
    P = np.zeros((n, 4, n))
    r = np.zeros((n, 4))

    def target(row, col, move):
        dr, dc = _MOVES[move]
        nr, nc = row + dr, col + dc
        if 0 <= nr < height and 0 <= nc < width:
            return nr * width + nc
        return row * width + col

    for row in range(height):
        for col in range(width):
            s = row * width + col
            for a in range(4):
                P[s, a, target(row, col, a)] += 1.0 - slip
                for lateral in ((a + 1) % 4, (a + 3) % 4):
                    P[s, a, target(row, col, lateral)] += slip / 2.0
    for (row, col), value in (rewards or {}).items():
        if not (0 <= row < height and 0 <= col < width):
            raise StructuralError(f"reward cell {(row, col)} outside the grid")
        r[row * width + col, :] = value
    return Mdp(P, r)
