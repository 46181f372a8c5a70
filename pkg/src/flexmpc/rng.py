"""Seeded random substreams.

One master seed is split into named substreams by fixed offsets, so that
the process noise seen by a run does not depend on how many Monte-Carlo
draws some other component made.
"""
import numpy as np

OFFSETS = {"process": 1, "measurement": 2, "montecarlo": 3, "init": 4}


class Streams:
    def __init__(self, seed):
        self.seed = int(seed)
        self._gens = {
            name: np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, off])))
            for name, off in OFFSETS.items()
        }

    def __getitem__(self, name):
        return self._gens[name]

    def normal(self, name, size):
        """Standard normal draws (numpy's ziggurat transform of the PCG64 stream)."""
        return self._gens[name].standard_normal(size)
