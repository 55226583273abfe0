"""Throughput metrics: frames per second and giga-operations per second."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable


@dataclass(frozen=True)
class Metrics:
    frames_processed: int
    wall_time: float
    total_ops: int
    fps: float
    gops: float

    def __str__(self):
        return (f"frames={self.frames_processed} time={self.wall_time:.6f}s ops={self.total_ops} "
                f"fps={self.fps:.3f} gops={self.gops:.3f}")


def compute_metrics(frames: int, wall_time: float, total_ops: int) -> Metrics:
    if not wall_time > 0:
        raise ValueError(f"wall time must be positive, got {wall_time}")
    if frames < 0 or total_ops < 0:
        raise ValueError("frame and op counts must be nonnegative")
    return Metrics(frames, wall_time, total_ops, frames / wall_time, total_ops / wall_time / 1e9)


class Stopwatch:
    """Times calls against an injectable monotonic clock."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter):
        self.clock = clock

    def time(self, fn, *args, **kwargs):
        """Return ``(result, elapsed_seconds)``."""
        start = self.clock()
        result = fn(*args, **kwargs)
        return result, self.clock() - start

    def median(self, fn, repeat: int, *args, **kwargs):
        """Run ``fn`` ``repeat`` times; return the last result and the median elapsed time."""
        if repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {repeat}")
        times = []
        result = None
        for _ in range(repeat):
            result, dt = self.time(fn, *args, **kwargs)
            times.append(dt)
        return result, statistics.median(times)
