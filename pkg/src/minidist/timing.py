"""Per-rank clocks and the simulated cost model.

Benchmark timing supports two sources. "wall" reads the monotonic clock, so
numbers reflect this interpreter (GIL included) and differ run to run.
"simulated" charges each rank a deterministic cost per unit of work: compute
time proportional to tokens x parameters, plus per-collective latency and
bandwidth terms, with ranks synchronized to the slowest participant at every
collective. Simulated time models W truly parallel devices, keeps reruns
byte-identical, and is the default for that reason.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class CostModel:
    """Deterministic seconds charged for compute and communication."""

    seconds_per_flop: float = 1e-10          # ~10 GFLOP/s per simulated device
    flops_per_token_per_param: float = 6.0   # forward + backward rule of thumb
    collective_latency_s: float = 5e-6
    seconds_per_byte: float = 1e-9           # ~1 GB/s interconnect

    def compute_seconds(self, tokens, param_count):
        return tokens * param_count * self.flops_per_token_per_param * self.seconds_per_flop

    def collective_seconds(self, payload_bytes):
        return self.collective_latency_s + payload_bytes * self.seconds_per_byte


class WallClock:
    """Monotonic wall time; advance/sync are no-ops because reality already
    charged the cost."""

    virtual = False

    def now(self):
        return time.perf_counter()

    def advance(self, seconds):
        pass

    def sync_to(self, t):
        pass


class VirtualClock:
    """Deterministic per-rank time; collectives pull it forward to the
    rendezvous completion point."""

    virtual = True

    def __init__(self):
        self._t = 0.0

    def now(self):
        return self._t

    def advance(self, seconds):
        if seconds < 0:
            raise ValidationError(f"cannot advance clock by {seconds}")
        self._t += seconds

    def sync_to(self, t):
        if t > self._t:
            self._t = t


def make_clock(timing):
    if timing == "wall":
        return WallClock()
    if timing == "simulated":
        return VirtualClock()
    raise ValidationError(f"timing must be 'wall' or 'simulated', got {timing!r}")
