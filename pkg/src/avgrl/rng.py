"""Seeded random streams.

Every stochastic component draws from its own Philox stream derived from a
master seed and a component name, so adding draws in one component never
shifts the numbers seen by another.
"""
import zlib

import numpy as np

COMPONENTS = ("mdp-gen", "injector", "trajectory", "td", "q-sample")


def stream(seed, component, *extra):
    """Return an independent generator for ``component`` under ``seed``.

    ``extra`` integers further split the stream (e.g. per-iteration
    trajectories).
    """
    key = (zlib.crc32(component.encode()),) + tuple(int(e) for e in extra)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
