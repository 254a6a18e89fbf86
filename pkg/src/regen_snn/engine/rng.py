"""
Seeded random streams.

All draws use numpy's Philox 4x64 counter-based bit generator, keyed by a
SeedSequence. The same (seed, key) pair and call order gives the same draws
on every platform numpy supports.
"""
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

ALGORITHM = "philox4x64-10"

KeyPart = Union[int, str]


def _key_int(part: KeyPart) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"key parts must be non-negative, got {part}")
    return int(part)


@dataclass
class RngStream:
    """
    A reproducible stream of random draws.

    `derive` fans a root seed out per purpose, e.g.
    ``root.derive("encode", image_index, presentation)``, so streams for
    different purposes never share state.
    """
    seed: int
    key: tuple[int, ...] = ()

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(_key_int(p) for p in self.key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def algorithm(self) -> str:
        return ALGORITHM

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def derive(self, *parts: KeyPart) -> 'RngStream':
        return RngStream(self.seed, self.key + tuple(_key_int(p) for p in parts))

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
