"""
Counter-based Gaussian noise.

Noise for (seed, chain, step) comes from a Philox generator keyed by
(seed, chain) whose counter starts at the block step // block_size, so any
step is addressable without generating the steps before it and chains do
not depend on each other or on the number of chains in a run.
"""

import numpy as np

from core.utils.numerics import numerics_setting

MASK64 = (1 << 64) - 1
# Counter block reserved for initial states; never reached by step blocks
INITIAL_STATE_BLOCK = MASK64


def philox(seed, chain, block):
    key = (int(seed) & MASK64) | ((int(chain) & MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=int(block) << 128))


def noise_block(seed, chain, block, noise_dimension, block_steps=None):
    """Standard normals of shape (block_steps, m) for one block of one chain."""
    block_steps = block_steps or numerics_setting('NOISE_BLOCK_STEPS')
    return philox(seed, chain, block).standard_normal((block_steps, noise_dimension))


def noise_at(seed, chain, step, noise_dimension, block_steps=None):
    """Increment xi_step of one chain (steps count from zero)."""
    block_steps = block_steps or numerics_setting('NOISE_BLOCK_STEPS')
    block, offset = divmod(int(step), block_steps)
    return noise_block(seed, chain, block, noise_dimension, block_steps)[offset]


class NoiseStream:
    """
    Block-wise noise for a set of chains: block b has shape
    (block_steps, n_chains, m).
    """

    def __init__(self, seed, chains, noise_dimension, block_steps=None):
        self.seed = int(seed)
        self.chains = list(chains)
        self.noise_dimension = noise_dimension
        self.block_steps = block_steps or numerics_setting('NOISE_BLOCK_STEPS')
        self._block = None
        self._cache = None

    def block(self, index):
        if index != self._block:
            self._cache = np.stack(
                [noise_block(self.seed, c, index, self.noise_dimension, self.block_steps) for c in self.chains],
                axis=1,
            )
            self._block = index
        return self._cache

    def step(self, step):
        block, offset = divmod(step, self.block_steps)
        return self.block(block)[offset]

    def initial(self, dimension):
        """Standard normals for initial states, one row per chain."""
        return np.stack(
            [philox(self.seed, c, INITIAL_STATE_BLOCK).standard_normal(dimension) for c in self.chains]
        )
