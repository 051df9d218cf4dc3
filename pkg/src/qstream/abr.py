"""Adaptive-bitrate policies over a common per-chunk observation.

A policy is any callable mapping an Observation to the index of the
representation to fetch next (0 = lowest bitrate). Two classic baselines live
here: a throughput-estimating rule and a buffer-threshold rule; the learned
policy lives in the RL module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Tuple

__all__ = [
    "Observation",
    "Policy",
    "BadThresholds",
    "rate_based",
    "buffer_based",
]


class BadThresholds(ValueError):
    """Buffer thresholds that cannot partition the buffer range."""


@dataclass(frozen=True)
class Observation:
    """Everything a policy may look at before choosing the next chunk.

    Histories run oldest to newest and cover completed downloads only.
    next_sizes_bits / next_qualities are indexed by representation for the
    chunk about to be fetched; bitrates_bps is the nominal ladder.
    """

    buffer_s: float
    chunk_index: int
    chunks_remaining: int
    last_quality: float
    throughput_bps: Tuple[float, ...]
    download_time_s: Tuple[float, ...]
    next_sizes_bits: Tuple[float, ...]
    next_qualities: Tuple[float, ...]
    bitrates_bps: Tuple[float, ...]

    @property
    def n_reps(self) -> int:
        return len(self.bitrates_bps)


Policy = Callable[[Observation], int]


def rate_based(obs: Observation, *, history: int = 8) -> int:
    """Harmonic-mean throughput estimate, then the largest ladder rung at or
    below it. With no completed downloads yet, start at the bottom rung."""
    recent = [x for x in obs.throughput_bps[-history:] if x > 0.0]
    if not recent:
        return 0
    estimate = len(recent) / sum(1.0 / x for x in recent)
    choice = 0
    for i, b in enumerate(obs.bitrates_bps):
        if b <= estimate:
            choice = i
    return choice


def buffer_based(
    obs: Observation,
    *,
    reservoir_s: float = 5.0,
    cushion_s: float = 20.0,
    buffer_max_s: float = 30.0,
) -> int:
    """Linear map from buffer level to ladder rung: bottom below the
    reservoir, top once the cushion is filled."""
    if not (0.0 < reservoir_s and reservoir_s + cushion_s <= buffer_max_s):
        raise BadThresholds(
            "need 0 < reservoir and reservoir + cushion <= buffer_max"
        )
    top = obs.n_reps - 1
    raw = (obs.buffer_s - reservoir_s) / cushion_s * top
    return int(math.floor(min(max(raw, 0.0), float(top))))
