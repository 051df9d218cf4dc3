"""Rate-trace generation: run the per-slot allocator over a fading channel
and log each user's achievable rate at one-second granularity.

Two allocation schemes are supported:

  * "qddra"  — quality-driven solve with proportional-fairness priorities:
               each user's priority is the inverse of its exponentially
               averaged per-slot quality (floored away from zero), so users
               whose recent quality sagged get boosted.
  * "wmmse"  — sum-rate solve with unit priorities (no fairness feedback).

A reported per-second rate is the mean of the slot rates inside that second.
Traces round-trip through a small CSV format and can be organized into
train/test splits with deterministic, disjoint seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .beamform import SlotProblem, rate, solve_slot, update_avg_quality
from .channel import ChannelEngine, Topology
from .quality import RQParams, quality_of_rate

__all__ = [
    "TraceError",
    "MalformedTraceFile",
    "Scenario",
    "RateTrace",
    "generate",
    "write_trace",
    "read_trace",
    "make_split",
]

TRACE_HEADER = "time_s,user_id,rate_bps"
_QUALITY_FLOOR = 1e-3
SCHEMES = ("qddra", "wmmse")


class TraceError(RuntimeError):
    pass


class MalformedTraceFile(TraceError):
    """A trace CSV that cannot be parsed back into a rate table."""


@dataclass(frozen=True)
class Scenario:
    """A reusable generation setup: who is where, on what channel."""

    name: str
    topology: Topology
    rq: Tuple[RQParams, ...]
    noise_power: float = 1.0
    snr_gap: float = 1.34
    bandwidth: float = 1e6
    slot_s: float = 0.04
    doppler_hz: float = 10.0
    speed_mps: float = 1.4
    move_period_s: float = 5.0

    def __post_init__(self):
        if len(self.rq) != self.topology.n_users:
            raise ValueError("need one rate-quality curve per user")
        per_second = 1.0 / self.slot_s
        if abs(per_second - round(per_second)) > 1e-9:
            raise ValueError("slot duration must divide one second evenly")

    @property
    def slots_per_second(self) -> int:
        return int(round(1.0 / self.slot_s))

    @property
    def n_users(self) -> int:
        return self.topology.n_users


@dataclass
class RateTrace:
    """Per-second rates, one column per user (bits/s)."""

    times_s: np.ndarray
    rates_bps: np.ndarray  # (n_seconds, n_users)
    scheme: str = ""
    slot_rates_bps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.rates_bps = np.asarray(self.rates_bps, dtype=float)
        if self.rates_bps.ndim != 2 or self.times_s.shape[0] != self.rates_bps.shape[0]:
            raise ValueError("times and rate rows must line up")

    @property
    def n_users(self) -> int:
        return self.rates_bps.shape[1]

    @property
    def duration_s(self) -> int:
        return self.rates_bps.shape[0]

    def user_rates(self, user: int) -> np.ndarray:
        return self.rates_bps[:, user]


def generate(
    scenario: Scenario,
    scheme: str,
    duration_s: int,
    seed: int,
    *,
    smoothing: float = 0.1,
    cadence_slots: int = 1,
    keep_slot_rates: bool = False,
    solver_tol: float = 1e-4,
    solver_max_iter: int = 100,
) -> RateTrace:
    """Simulate duration_s seconds of allocation and return the rate trace.

    The solver runs on slots where slot_index % cadence_slots == 0; between
    solves the last transmit set is held and rates are re-evaluated on the
    current channel. Priorities refresh every slot from the quality average.
    Deterministic in (scenario, scheme, duration_s, seed).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if duration_s <= 0 or cadence_slots <= 0:
        raise ValueError("duration and cadence must be positive")
    topo = scenario.topology
    n_users = topo.n_users
    engine = ChannelEngine(
        topology=topo,
        rng=np.random.default_rng(seed),
        slot_s=scenario.slot_s,
        doppler_hz=scenario.doppler_hz,
        noise_power=scenario.noise_power,
        speed_mps=scenario.speed_mps,
        move_period_s=scenario.move_period_s,
    )
    sps = scenario.slots_per_second
    n_slots = duration_s * sps
    slot_rates = np.empty((n_slots, n_users))
    q_avg = None  # set from the first slot's qualities
    weights = np.ones(n_users)
    v_held = None
    for t in range(n_slots):
        snap = engine.advance(t)
        problem = SlotProblem.from_snapshot(
            snap,
            topo,
            user_weights=weights,
            rq=scenario.rq,
            snr_gap=scenario.snr_gap,
            bandwidth=scenario.bandwidth,
        )
        if t % cadence_slots == 0 or v_held is None:
            result = solve_slot(
                problem, mode=scheme, tol=solver_tol, max_iter=solver_max_iter
            )
            v_held = result.beams.tx
            rates = result.rates_bps
            quals = result.qualities_db
        else:
            rates = np.array([rate(problem, v_held, i) for i in range(n_users)])
            quals = np.array(
                [quality_of_rate(rates[i], scenario.rq[i]) for i in range(n_users)]
            )
        slot_rates[t] = rates
        if scheme == "qddra":
            if q_avg is None:
                q_avg = np.maximum(quals, _QUALITY_FLOOR)
            else:
                q_avg = np.maximum(
                    [
                        update_avg_quality(q_avg[i], quals[i], smoothing)
                        for i in range(n_users)
                    ],
                    _QUALITY_FLOOR,
                )
            weights = 1.0 / q_avg
    per_second = slot_rates.reshape(duration_s, sps, n_users).mean(axis=1)
    return RateTrace(
        times_s=np.arange(duration_s, dtype=float),
        rates_bps=per_second,
        scheme=scheme,
        slot_rates_bps=slot_rates if keep_slot_rates else None,
    )


def write_trace(path, trace: RateTrace) -> None:
    """CSV with header time_s,user_id,rate_bps; full-precision rates."""
    path = Path(path)
    lines = [TRACE_HEADER]
    for row, t in enumerate(trace.times_s):
        for u in range(trace.n_users):
            lines.append("%.17g,%d,%.17g" % (t, u, trace.rates_bps[row, u]))
    path.write_text("\n".join(lines) + "\n")


def read_trace(path) -> RateTrace:
    """Parse a trace CSV; raises MalformedTraceFile with the offending line."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise MalformedTraceFile(f"{path}: line 1: expected header {TRACE_HEADER!r}")
    entries: Dict[Tuple[float, int], float] = {}
    users = set()
    times: List[float] = []
    seen_times = set()
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 3:
            raise MalformedTraceFile(f"{path}: line {ln}: expected 3 fields")
        try:
            t = float(parts[0])
            u = int(parts[1])
            r = float(parts[2])
        except ValueError as exc:
            raise MalformedTraceFile(f"{path}: line {ln}: {exc}") from exc
        if u < 0 or not np.isfinite(t) or not np.isfinite(r) or r < 0:
            raise MalformedTraceFile(f"{path}: line {ln}: out-of-range value")
        key = (t, u)
        if key in entries:
            raise MalformedTraceFile(f"{path}: line {ln}: duplicate (time, user)")
        entries[key] = r
        users.add(u)
        if t not in seen_times:
            seen_times.add(t)
            times.append(t)
    if not entries:
        raise MalformedTraceFile(f"{path}: no data rows")
    n_users = max(users) + 1
    if users != set(range(n_users)):
        raise MalformedTraceFile(f"{path}: user ids must cover 0..{n_users - 1}")
    times_arr = np.array(times)
    rates = np.empty((len(times), n_users))
    for row, t in enumerate(times):
        for u in range(n_users):
            try:
                rates[row, u] = entries[(t, u)]
            except KeyError:
                raise MalformedTraceFile(
                    f"{path}: missing rate for time {t:g}, user {u}"
                ) from None
    return RateTrace(times_arr, rates)


def make_split(
    out_dir,
    scenario: Scenario,
    schemes: Sequence[str],
    *,
    n_train: int,
    n_test: int,
    duration_s: int,
    base_seed: int = 0,
    **gen_kwargs,
) -> Dict[str, Dict[str, List[Path]]]:
    """Generate paired train/test traces for every scheme.

    Trace index i uses the same channel seed across schemes, so scheme
    comparisons see identical fading; test seeds live in a disjoint block
    above the train seeds. Writes <out>/train/..., <out>/test/... and a
    manifest listing both sections.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("need at least one trace per split")
    if n_train >= 10_000:
        raise ValueError("train split too large for the seed block")
    out = Path(out_dir)
    result: Dict[str, Dict[str, List[Path]]] = {"train": {}, "test": {}}
    seeds = {
        "train": [base_seed + i for i in range(n_train)],
        "test": [base_seed + 10_000 + i for i in range(n_test)],
    }
    manifest: List[str] = []
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
        manifest.append(f"[{split}]")
        for scheme in schemes:
            paths: List[Path] = []
            for idx, seed in enumerate(seeds[split]):
                trace = generate(scenario, scheme, duration_s, seed, **gen_kwargs)
                p = out / split / f"{scheme}_{idx:03d}.csv"
                write_trace(p, trace)
                paths.append(p)
                manifest.append(f"{split}/{p.name}")
            result[split][scheme] = paths
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return result
