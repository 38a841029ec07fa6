"""Separate random streams for weight initialisation and for data order/dropout.

Every draw goes through :class:`CountingGenerator`, so tests can audit which
stream a piece of code touched.
"""

from __future__ import annotations

import numpy as np

_DRAW_METHODS = frozenset(
    {
        "random",
        "normal",
        "standard_normal",
        "integers",
        "permutation",
        "choice",
        "shuffle",
        "uniform",
        "binomial",
    }
)


class CountingGenerator:
    """Thin proxy over :class:`numpy.random.Generator` that counts draw calls."""

    def __init__(self, seed):
        self._gen = np.random.default_rng(seed)
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self._gen, name)
        if name in _DRAW_METHODS:
            def counted(*args, **kwargs):
                self.calls += 1
                return attr(*args, **kwargs)

            return counted
        return attr

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state


class RngStreams:
    """The two streams of one fine-tuning run.

    ``init`` drives every weight draw (head, Re-init, fresh init).  Everything
    stochastic during optimisation derives from ``order_seed``: one generator
    per epoch for the shuffle, and one ``noise`` generator for dropout and
    Mixout masks.
    """

    def __init__(self, init_seed: int, order_seed: int):
        self.init_seed = int(init_seed)
        self.order_seed = int(order_seed)
        self.init = CountingGenerator([self.init_seed, 0])
        self.noise = CountingGenerator([self.order_seed, 1])
        self.order_calls = 0

    def epoch_order(self, epoch: int) -> CountingGenerator:
        self.order_calls += 1
        return epoch_generator(self.order_seed, epoch)


def epoch_generator(order_seed: int, epoch: int) -> CountingGenerator:
    """Shuffle stream for one epoch, derived from the order seed alone."""
    return CountingGenerator([int(order_seed), 2, int(epoch)])
