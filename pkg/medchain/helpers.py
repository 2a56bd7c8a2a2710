import logging
from enum import IntEnum

import numpy as np

logger = logging.getLogger(__name__)

STREAM_BLOCK = 4096


class StreamPurpose(IntEnum):
    Interarrival = 1
    Service = 2
    Signal = 3
    Validators = 4
    Entities = 5


def spawn_generator(seed: int, *key: int) -> np.random.Generator:
    """
    Derive an independent generator from the master seed.

    The spawn key is built from the caller's identifiers (entity id, purpose, ...),
    so adding a new entity never shifts the draws of the existing ones.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


class ExponentialStream:
    """Buffered exponential draws; scalar numpy calls dominate event loops otherwise."""

    def __init__(self, generator: np.random.Generator, rate: float, block: int = STREAM_BLOCK) -> None:
        if not rate > 0:
            raise ValueError(f"Exponential stream needs a positive rate, got {rate}")
        self._generator = generator
        self._scale = 1.0 / rate
        self._block = block
        self._buffer = np.empty(0)
        self._position = 0

    def __call__(self) -> float:
        if self._position >= len(self._buffer):
            self._buffer = self._generator.exponential(self._scale, self._block)
            self._position = 0
        value = float(self._buffer[self._position])
        self._position += 1
        return value


def clamp(value: int, lower: int, upper: int) -> int:
    return max(lower, min(upper, value))
