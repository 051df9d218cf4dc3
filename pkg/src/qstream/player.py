"""Chunked video playback over a per-second rate trace.

A video is a ladder of representations, each holding per-chunk sizes (bits)
and per-chunk perceptual qualities. The player fetches one chunk at a time:
download time integrates the piecewise-constant trace exactly, the playout
buffer drains while downloading, rebuffering is the shortfall, and a full
buffer makes the player wait before the next request. Per-chunk score:

    quality - switch_penalty * |quality - previous| - rebuffer_penalty * stall

with the first chunk scored by quality alone (startup delay is recorded but
not penalized, and there is no previous quality to switch from).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .abr import Observation, Policy
from .quality import RQParams, fit_rq, quality_of_bitrate

__all__ = [
    "PlayerError",
    "TraceExhausted",
    "ManifestError",
    "DEFAULT_LADDER_BPS",
    "Representation",
    "VideoManifest",
    "manifest_to_dict",
    "manifest_from_dict",
    "save_manifest",
    "load_manifest",
    "download_chunk",
    "advance_buffer",
    "ChunkRecord",
    "SessionSummary",
    "run_session",
    "synth_manifest",
    "fit_manifest_profile",
]

DEFAULT_LADDER_BPS = (300e3, 750e3, 1200e3, 1850e3, 2850e3, 3200e3)


class PlayerError(RuntimeError):
    pass


class TraceExhausted(PlayerError):
    """A non-looping trace ended before the download finished."""


class ManifestError(PlayerError):
    """A video manifest that violates the ladder contract."""


@dataclass(frozen=True)
class Representation:
    bitrate_bps: float
    chunk_sizes_bits: np.ndarray
    chunk_qualities: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "chunk_sizes_bits", np.asarray(self.chunk_sizes_bits, dtype=float)
        )
        object.__setattr__(
            self, "chunk_qualities", np.asarray(self.chunk_qualities, dtype=float)
        )
        if self.bitrate_bps <= 0:
            raise ManifestError("representation bitrate must be positive")
        if self.chunk_sizes_bits.ndim != 1 or self.chunk_sizes_bits.size == 0:
            raise ManifestError("need a non-empty 1-d chunk size list")
        if self.chunk_qualities.shape != self.chunk_sizes_bits.shape:
            raise ManifestError("sizes and qualities must pair up")
        if not np.all(np.isfinite(self.chunk_sizes_bits)) or np.any(
            self.chunk_sizes_bits <= 0
        ):
            raise ManifestError("chunk sizes must be positive and finite")
        if not np.all(np.isfinite(self.chunk_qualities)):
            raise ManifestError("chunk qualities must be finite")


@dataclass(frozen=True)
class VideoManifest:
    chunk_duration_s: float
    representations: Tuple[Representation, ...]

    def __post_init__(self):
        object.__setattr__(self, "representations", tuple(self.representations))
        if self.chunk_duration_s <= 0:
            raise ManifestError("chunk duration must be positive")
        if not self.representations:
            raise ManifestError("need at least one representation")
        rates = [r.bitrate_bps for r in self.representations]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ManifestError("representations must have strictly rising bitrates")
        counts = {r.chunk_sizes_bits.size for r in self.representations}
        if len(counts) != 1:
            raise ManifestError("all representations must have equal chunk counts")

    @property
    def n_chunks(self) -> int:
        return self.representations[0].chunk_sizes_bits.size

    @property
    def n_reps(self) -> int:
        return len(self.representations)

    @property
    def bitrates_bps(self) -> Tuple[float, ...]:
        return tuple(r.bitrate_bps for r in self.representations)

    def sizes_of_chunk(self, m: int) -> Tuple[float, ...]:
        return tuple(float(r.chunk_sizes_bits[m]) for r in self.representations)

    def qualities_of_chunk(self, m: int) -> Tuple[float, ...]:
        return tuple(float(r.chunk_qualities[m]) for r in self.representations)


def manifest_to_dict(manifest: VideoManifest) -> dict:
    return {
        "chunk_duration_s": manifest.chunk_duration_s,
        "representations": [
            {
                "bitrate_bps": r.bitrate_bps,
                "chunk_sizes_bits": r.chunk_sizes_bits.tolist(),
                "chunk_qualities": r.chunk_qualities.tolist(),
            }
            for r in manifest.representations
        ],
    }


def manifest_from_dict(data: dict) -> VideoManifest:
    try:
        reps = tuple(
            Representation(
                bitrate_bps=float(r["bitrate_bps"]),
                chunk_sizes_bits=np.asarray(r["chunk_sizes_bits"], dtype=float),
                chunk_qualities=np.asarray(r["chunk_qualities"], dtype=float),
            )
            for r in data["representations"]
        )
        return VideoManifest(
            chunk_duration_s=float(data["chunk_duration_s"]), representations=reps
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"bad manifest structure: {exc}") from exc


def save_manifest(path, manifest: VideoManifest) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n")


def load_manifest(path) -> VideoManifest:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    return manifest_from_dict(data)


def download_chunk(
    rates_bps: np.ndarray, start_s: float, size_bits: float, *, loop: bool = True
) -> float:
    """Seconds needed to move size_bits over a piecewise-constant trace,
    starting at start_s. The trace holds per-second rates; with loop=True it
    repeats cyclically, otherwise running past its end raises TraceExhausted.
    Exact integration — no tick discretization."""
    rates = np.asarray(rates_bps, dtype=float)
    if rates.ndim != 1 or rates.size == 0:
        raise ValueError("need a 1-d, non-empty rate trace")
    if size_bits <= 0:
        raise ValueError("chunk size must be positive")
    if start_s < 0:
        raise ValueError("start time must be nonnegative")
    if loop and not np.any(rates > 0):
        raise TraceExhausted("trace has no capacity anywhere")
    n = rates.size
    remaining = float(size_bits)
    t = float(start_s)
    while True:
        sec = math.floor(t)
        if sec >= n and not loop:
            raise TraceExhausted("trace ended mid-download")
        r = rates[sec % n]
        boundary = sec + 1.0
        window = boundary - t
        if r > 0 and remaining <= r * window:
            return t + remaining / r - start_s
        remaining -= r * window
        t = boundary


def advance_buffer(
    buffer_s: float, download_s: float, chunk_duration_s: float, buffer_max_s: float
) -> Tuple[float, float, float]:
    """One chunk's buffer bookkeeping.

    Returns (rebuffer_s, new_buffer_s, wait_s): playback stalls for the part
    of the download the buffer could not cover; the finished chunk adds its
    duration; anything above the cap is burned off by idling before the next
    request, leaving the buffer at the cap.
    """
    rebuffer = max(download_s - buffer_s, 0.0)
    level = max(buffer_s - download_s, 0.0) + chunk_duration_s
    wait = max(level - buffer_max_s, 0.0)
    return rebuffer, level - wait, wait


@dataclass(frozen=True)
class ChunkRecord:
    index: int
    action: int
    start_s: float  # wall clock when the request went out
    download_s: float
    rebuffer_s: float
    wait_s: float
    buffer_s: float  # level right after the chunk lands (post-wait)
    quality: float
    qoe: float


@dataclass
class SessionSummary:
    """Per-chunk playback log plus the scores derived from it."""

    records: Tuple[ChunkRecord, ...]
    chunk_duration_s: float

    @property
    def n_chunks(self) -> int:
        return len(self.records)

    @property
    def actions(self) -> np.ndarray:
        return np.array([r.action for r in self.records], dtype=int)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([r.quality for r in self.records])

    @property
    def qoe_per_chunk(self) -> np.ndarray:
        return np.array([r.qoe for r in self.records])

    @property
    def mean_qoe(self) -> float:
        return float(self.qoe_per_chunk.mean())

    @property
    def rebuffer_s(self) -> np.ndarray:
        return np.array([r.rebuffer_s for r in self.records])

    @property
    def startup_s(self) -> float:
        return float(self.records[0].rebuffer_s) if self.records else 0.0

    @property
    def stall_s(self) -> float:
        """Mid-stream rebuffering only; startup is accounted separately."""
        return float(self.rebuffer_s[1:].sum()) if len(self.records) > 1 else 0.0

    @property
    def switches(self) -> int:
        a = self.actions
        return int(np.sum(a[1:] != a[:-1])) if a.size > 1 else 0


def run_session(
    manifest: VideoManifest,
    rates_bps: np.ndarray,
    policy: Policy,
    *,
    buffer_max_s: float = 30.0,
    switch_penalty: float = 0.5,
    rebuffer_penalty: float = 4.0,
    start_s: float = 0.0,
    loop: bool = True,
) -> SessionSummary:
    """Play the whole manifest against a rate trace under a policy."""
    if buffer_max_s <= 0:
        raise ValueError("buffer cap must be positive")
    rates = np.asarray(rates_bps, dtype=float)
    t = float(start_s)
    buffer_s = 0.0
    prev_quality = 0.0
    tp_hist: list = []
    dt_hist: list = []
    records = []
    n_chunks = manifest.n_chunks
    for m in range(n_chunks):
        obs = Observation(
            buffer_s=buffer_s,
            chunk_index=m,
            chunks_remaining=n_chunks - m,
            last_quality=prev_quality if m > 0 else 0.0,
            throughput_bps=tuple(tp_hist),
            download_time_s=tuple(dt_hist),
            next_sizes_bits=manifest.sizes_of_chunk(m),
            next_qualities=manifest.qualities_of_chunk(m),
            bitrates_bps=manifest.bitrates_bps,
        )
        action = int(policy(obs))
        if not 0 <= action < manifest.n_reps:
            raise PlayerError(f"policy chose representation {action}, out of range")
        size = float(manifest.representations[action].chunk_sizes_bits[m])
        start = t
        d = download_chunk(rates, t, size, loop=loop)
        rebuffer, buffer_s, wait = advance_buffer(
            buffer_s, d, manifest.chunk_duration_s, buffer_max_s
        )
        t += d + wait
        quality = float(manifest.representations[action].chunk_qualities[m])
        if m == 0:
            qoe = quality
        else:
            qoe = (
                quality
                - switch_penalty * abs(quality - prev_quality)
                - rebuffer_penalty * rebuffer
            )
        records.append(
            ChunkRecord(
                index=m,
                action=action,
                start_s=start,
                download_s=d,
                rebuffer_s=rebuffer,
                wait_s=wait,
                buffer_s=buffer_s,
                quality=quality,
                qoe=qoe,
            )
        )
        prev_quality = quality
        tp_hist.append(size / d)
        dt_hist.append(d)
    return SessionSummary(records=tuple(records), chunk_duration_s=manifest.chunk_duration_s)


def synth_manifest(
    profile: RQParams,
    *,
    chunk_count: int,
    seed: int,
    chunk_duration_s: float = 2.0,
    size_jitter: float = 0.1,
    quality_jitter: float = 0.05,
    ladder: Sequence[float] = DEFAULT_LADDER_BPS,
) -> VideoManifest:
    """Make a synthetic encode: every chunk's size wiggles around
    bitrate * duration, and its quality follows the profile curve evaluated
    at the chunk's actual bitrate with mildly jittered curve parameters.
    Per-chunk sizes are kept ascending across the ladder. Deterministic in
    seed; zero jitter reproduces the profile curve exactly."""
    if chunk_count <= 0:
        raise ManifestError("need at least one chunk")
    if not 0.0 <= size_jitter < 1.0 or not 0.0 <= quality_jitter < 1.0:
        raise ManifestError("jitters must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    ladder = tuple(float(b) for b in ladder)
    n_reps = len(ladder)
    sizes = np.empty((n_reps, chunk_count))
    for ell, bitrate in enumerate(ladder):
        wiggle = 1.0 + size_jitter * rng.uniform(-1.0, 1.0, chunk_count)
        sizes[ell] = bitrate * chunk_duration_s * wiggle
    sizes.sort(axis=0)  # keep the ladder order even under heavy jitter
    z1_seq = profile.z1 * (1.0 + quality_jitter * rng.uniform(-1.0, 1.0, chunk_count))
    z2_seq = profile.z2 * (1.0 + quality_jitter * rng.uniform(-1.0, 1.0, chunk_count))
    reps = []
    for ell, bitrate in enumerate(ladder):
        quals = np.empty(chunk_count)
        for m in range(chunk_count):
            z_m = RQParams(float(z1_seq[m]), float(z2_seq[m]), profile.z3)
            quals[m] = quality_of_bitrate(sizes[ell, m] / chunk_duration_s, z_m)
        reps.append(
            Representation(
                bitrate_bps=bitrate,
                chunk_sizes_bits=sizes[ell],
                chunk_qualities=quals,
            )
        )
    return VideoManifest(chunk_duration_s=chunk_duration_s, representations=reps)


def fit_manifest_profile(manifest: VideoManifest) -> RQParams:
    """Recover a rate-quality curve from a manifest by least squares on the
    per-representation mean actual bitrate and mean quality."""
    rates = [
        float(np.mean(r.chunk_sizes_bits)) / manifest.chunk_duration_s
        for r in manifest.representations
    ]
    quals = [float(np.mean(r.chunk_qualities)) for r in manifest.representations]
    return fit_rq(np.array(rates), np.array(quals)).params
