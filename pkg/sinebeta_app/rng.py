# sinebeta_app/rng.py
from __future__ import annotations

from typing import List, Sequence

import numpy as np

# substream purposes; a unit of work is keyed by (master_seed, purpose, index)
STREAM_FAMILY = 0
STREAM_INDEPENDENT = 1
STREAM_PASSAGE = 2
STREAM_ORACLE = 3
STREAM_FAST_REACH = 4
STREAM_LOWER_BOUND = 5

# normals drawn per refill, per row
NOISE_CHUNK = 2048


def substream(master_seed: int, purpose: int, index: int) -> np.random.Generator:
    """
    Deterministic generator for one unit of work.

    The key depends only on (master seed, purpose, index), never on which worker
    picks the unit up or in which order.
    """
    if master_seed < 0:
        raise ValueError("run.seed must be >= 0")
    ss = np.random.SeedSequence([int(master_seed), int(purpose), int(index)])
    return np.random.default_rng(ss)


class NoiseFeed:
    """
    Buffered Gaussian increments for a block of rows (replicates or paths).

    Row i is refilled from its own generator in chunks of NOISE_CHUNK, so the
    values it sees are the same whether it runs alone or inside any block.
    """

    def __init__(self, gens: Sequence[np.random.Generator], scale: float, width: int = 2):
        self.gens: List[np.random.Generator] = list(gens)
        self.scale = float(scale)
        self.width = int(width)
        self._buf = np.empty((len(self.gens), NOISE_CHUNK, self.width))
        self._pos = NOISE_CHUNK

    def __len__(self) -> int:
        return len(self.gens)

    def _refill(self) -> None:
        for i, g in enumerate(self.gens):
            self._buf[i] = g.standard_normal((NOISE_CHUNK, self.width))
        self._buf *= self.scale
        self._pos = 0

    def next(self) -> np.ndarray:
        """Next increments, shape (rows, width)."""
        if self._pos >= NOISE_CHUNK:
            self._refill()
        row = self._buf[:, self._pos, :]
        self._pos += 1
        return row

    def select(self, keep: np.ndarray) -> None:
        """Drop rows; the kept rows continue their own sequences unchanged."""
        idx = np.nonzero(keep)[0]
        self.gens = [self.gens[i] for i in idx]
        self._buf = self._buf[idx]


def family_feed(master_seed: int, ids: Sequence[int], step: float, purpose: int = STREAM_FAMILY, width: int = 2) -> NoiseFeed:
    gens = [substream(master_seed, purpose, i) for i in ids]
    return NoiseFeed(gens, scale=float(np.sqrt(step)), width=width)
