"""Named, splittable random streams on top of numpy's counter-based Philox.

A stream is addressed by ``(seed, path)``. Splitting appends a name to the path
and hashes the result into a fresh Philox key, so two streams with different
paths never share counters, and a stream always reproduces the same draws no
matter how many other streams were used before it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Stream:
    seed: int
    path: tuple[str, ...] = ()

    def split(self, *names: object) -> Stream:
        return Stream(self.seed, self.path + tuple(str(n) for n in names))

    @property
    def key(self) -> int:
        text = "/".join((str(self.seed),) + self.path).encode()
        return int.from_bytes(hashlib.blake2b(text, digest_size=16).digest(), "little")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.key))

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        draws = self.generator().standard_normal(size=tuple(shape))
        return torch.from_numpy(draws).to(dtype)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=tuple(shape))


def as_stream(stream: Stream | int) -> Stream:
    return stream if isinstance(stream, Stream) else Stream(int(stream))
