"""Simulated telemetry: a seeded, rate-paced pseudo-random walk.

Every call to ``stream()`` yields the full sequence from the beginning, so
any number of concurrent consumers (task handlers) observe identical
values for identical window indices. Two sources with equal seeds produce
equal streams, which is what makes end-to-end runs reproducible.
"""

from __future__ import annotations

import random
import time
from typing import Iterator


class TelemetrySource:
    def __init__(self, seed: int, rate: float = 100.0):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.seed = seed
        self.rate = rate

    def values(self, count: int) -> list[float]:
        """First ``count`` values, unpaced. Used for oracles and tests."""
        rng = random.Random(self.seed)
        out: list[float] = []
        x = 0.0
        for _ in range(count):
            x += rng.uniform(-1.0, 1.0)
            out.append(x)
        return out

    def stream(self) -> Iterator[float]:
        """Fresh paced iterator over the walk, one value per 1/rate seconds.

        Pacing follows an absolute schedule anchored at the first call, so
        windows close on a fixed grid without cumulative drift.
        """
        rng = random.Random(self.seed)
        started = time.monotonic()
        x = 0.0
        i = 0
        while True:
            x += rng.uniform(-1.0, 1.0)
            i += 1
            delay = started + i / self.rate - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            yield x
