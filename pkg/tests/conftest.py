import numpy as np
import pytest

from avgrl.generators import RandomMdpSpec, generate_random_mdp
from avgrl.mdp import Mdp
from avgrl.transforms import aperiodicity_transform

# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def family_instance(seed, concentration=5.0, kappa=0.1):
    """The sweep family: random size, Dirichlet rows, eps-mixed, then lazified."""
    rs = np.random.default_rng(seed)
    n = int(rs.integers(2, 7))
    m = int(rs.integers(2, 4))
    mdp = generate_random_mdp(RandomMdpSpec(n, m, concentration, seed=seed), eps=0.05)
    return aperiodicity_transform(mdp, kappa)[0]


def criterion_instance():
    """5-state, 2-action instance used by the TD, mirror-descent and regret criteria."""
    mdp = generate_random_mdp(RandomMdpSpec(5, 2, 5.0, seed=3), eps=0.05)
    return aperiodicity_transform(mdp, 0.1)[0]


def two_state_mdp(p=0.3, q=0.6, r0=1.0, r1=0.0):
    """One action; P = [[1-p, p], [q, 1-q]]."""
    P = np.array([[[1 - p, p]], [[q, 1 - q]]])
    r = np.array([[r0], [r1]])
    return Mdp(P, r)


@pytest.fixture
def small_mdp():
    return family_instance(3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
