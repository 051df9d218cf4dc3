"""Multicell downlink channel: geometry, slow fading and first-order Gauss-
Markov fast fading.

Each user is served by one home base station and hears every base station.
The per-link channel matrix factors as sqrt(gain) * G where the gain combines
log-distance path loss with log-normal shadowing, and G evolves per slot as

    G(t) = zeta * G(t-1) + xi,   xi ~ CSCG(0, (1 - zeta^2) I)

with zeta = J0(2 pi f_d T_slot), so the marginal stays unit-variance Rayleigh.
Users take a random-direction step every few seconds and stay inside their
home cell's annulus [d_min, radius]; shadowing is redrawn only for users that
actually moved (it decorrelates with position, not with time).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Sequence

import numpy as np

from .numerics import ShapeMismatch, bessel_j0, sample_cscg

__all__ = [
    "DistanceBelowMinimum",
    "CellSite",
    "UserTerminal",
    "Topology",
    "MobilityState",
    "FadingState",
    "ChannelSnapshot",
    "init_positions",
    "step_mobility",
    "large_scale_gain",
    "init_fading",
    "step_fading",
    "snapshot",
    "jakes_coefficient",
    "ChannelEngine",
]

_EPOCH_TOL_S = 1e-6


class DistanceBelowMinimum(ValueError):
    """Link distance below the allowed minimum radius."""


@dataclass(frozen=True)
class CellSite:
    position: np.ndarray  # (2,) meters
    n_tx: int
    power_budget: float  # watts


@dataclass(frozen=True)
class UserTerminal:
    cell: int  # index of the home site
    n_rx: int


@dataclass(frozen=True)
class Topology:
    cells: tuple
    users: tuple
    radius: float  # outer cell radius, meters
    min_radius: float  # closest allowed approach to a transmitter

    def __post_init__(self):
        if not (0 < self.min_radius <= self.radius):
            raise ValueError("need 0 < min_radius <= radius")
        for u in self.users:
            if not 0 <= u.cell < len(self.cells):
                raise ValueError(f"user references unknown cell {u.cell}")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_of(self) -> np.ndarray:
        return np.array([u.cell for u in self.users], dtype=int)


@dataclass(frozen=True)
class MobilityState:
    positions: np.ndarray  # (n_users, 2)
    next_move_s: float
    shadowing_db: np.ndarray  # (n_users, n_cells), redrawn on accepted moves


@dataclass(frozen=True)
class FadingState:
    coeffs: tuple  # per user: tuple over cells of (n_rx, n_tx) arrays
    zeta: float


@dataclass(frozen=True)
class ChannelSnapshot:
    slot: int
    channels: tuple  # per user: tuple over cells of (n_rx, n_tx) arrays
    noise_power: float


def jakes_coefficient(doppler_hz: float, slot_s: float) -> float:
    """Per-slot fading correlation zeta = J0(2 pi f_d T_slot)."""
    return bessel_j0(2.0 * np.pi * doppler_hz * slot_s)


def _annulus_point(center, r_min, r_max, rng) -> np.ndarray:
    # area-uniform radius, uniform angle
    r = np.sqrt(rng.uniform(r_min**2, r_max**2))
    th = rng.uniform(0.0, 2.0 * np.pi)
    return center + r * np.array([np.cos(th), np.sin(th)])


def init_positions(
    topology: Topology,
    rng: np.random.Generator,
    *,
    shadowing_std_db: float = 8.0,
    move_period_s: float = 5.0,
) -> MobilityState:
    """Drop each user uniformly in its home cell's annulus; draw shadowing."""
    pos = np.empty((topology.n_users, 2))
    for i, u in enumerate(topology.users):
        pos[i] = _annulus_point(
            np.asarray(topology.cells[u.cell].position, dtype=float),
            topology.min_radius,
            topology.radius,
            rng,
        )
    shad = rng.normal(0.0, shadowing_std_db, (topology.n_users, topology.n_cells))
    return MobilityState(pos, move_period_s, shad)


def step_mobility(
    state: MobilityState,
    topology: Topology,
    t_s: float,
    rng: np.random.Generator,
    *,
    speed_mps: float = 1.4,
    move_period_s: float = 5.0,
    shadowing_std_db: float = 8.0,
    max_attempts: int = 32,
) -> MobilityState:
    """Advance mobility to time t_s.

    Users move only when t_s lands on a move-period multiple (and at most once
    per epoch): each takes a straight step of speed * period in a uniformly
    random direction, rejected and redrawn while it would leave the home
    annulus (after max_attempts the user stays put). Movers get fresh
    shadowing toward every site.
    """
    frac = t_s / move_period_s
    on_epoch = abs(frac - round(frac)) * move_period_s < _EPOCH_TOL_S and t_s > 0
    if not on_epoch or t_s < state.next_move_s - _EPOCH_TOL_S:
        return state
    step_len = speed_mps * move_period_s
    pos = state.positions.copy()
    shad = state.shadowing_db.copy()
    for i, u in enumerate(topology.users):
        if step_len == 0.0:
            continue
        center = np.asarray(topology.cells[u.cell].position, dtype=float)
        for _ in range(max_attempts):
            th = rng.uniform(0.0, 2.0 * np.pi)
            cand = pos[i] + step_len * np.array([np.cos(th), np.sin(th)])
            d = float(np.linalg.norm(cand - center))
            if topology.min_radius <= d <= topology.radius:
                pos[i] = cand
                shad[i] = rng.normal(0.0, shadowing_std_db, topology.n_cells)
                break
    return MobilityState(pos, t_s + move_period_s, shad)


def large_scale_gain(
    distance_m: float,
    shadowing_db: float,
    *,
    min_radius: float = 10.0,
    exponent: float = 3.0,
) -> float:
    """Log-distance path gain with log-normal shadowing.

    gain = (d / min_radius)^-exponent * 10^(shadowing_db / 10); unity path
    loss at the reference distance. Distances below min_radius are rejected
    (callers clamp interference links to the floor first).
    """
    if distance_m < min_radius * (1.0 - 1e-12):
        raise DistanceBelowMinimum(f"distance {distance_m} < minimum {min_radius}")
    return float((distance_m / min_radius) ** (-exponent) * 10.0 ** (shadowing_db / 10.0))


def init_fading(topology: Topology, zeta: float, rng: np.random.Generator) -> FadingState:
    """Unit-variance CSCG start for every (user, site) link matrix."""
    coeffs = tuple(
        tuple(
            sample_cscg((u.n_rx, c.n_tx), 1.0, rng) for c in topology.cells
        )
        for u in topology.users
    )
    return FadingState(coeffs, float(zeta))


def step_fading(state: FadingState, rng: np.random.Generator) -> FadingState:
    """One Gauss-Markov step: G <- zeta G + CSCG(0, 1 - zeta^2)."""
    z = state.zeta
    innov_var = max(1.0 - z * z, 0.0)
    coeffs = tuple(
        tuple(z * g + sample_cscg(g.shape, innov_var, rng) for g in row)
        for row in state.coeffs
    )
    return FadingState(coeffs, z)


def snapshot(
    topology: Topology,
    mobility: MobilityState,
    fading: FadingState,
    noise_power: float,
    *,
    slot: int = 0,
    exponent: float = 3.0,
) -> ChannelSnapshot:
    """Compose H = sqrt(gain) * G for every link at the current state.

    Pure function of its inputs; cross-site distances are floored at the
    topology's min_radius before the path-loss law is applied.
    """
    if len(fading.coeffs) != topology.n_users:
        raise ShapeMismatch("fading state does not match topology user count")
    rows = []
    for i, u in enumerate(topology.users):
        row = []
        for k, c in enumerate(topology.cells):
            g = fading.coeffs[i][k]
            if g.shape != (u.n_rx, c.n_tx):
                raise ShapeMismatch(
                    f"link ({i},{k}) fading shape {g.shape} != ({u.n_rx},{c.n_tx})"
                )
            d = float(np.linalg.norm(mobility.positions[i] - np.asarray(c.position)))
            d = max(d, topology.min_radius)
            gain = large_scale_gain(
                d,
                float(mobility.shadowing_db[i, k]),
                min_radius=topology.min_radius,
                exponent=exponent,
            )
            row.append(np.sqrt(gain) * g)
        rows.append(tuple(row))
    return ChannelSnapshot(slot, tuple(rows), float(noise_power))


@dataclass
class ChannelEngine:
    """Stateful per-slot driver tying mobility, shadowing and fading together.

    advance(slot) evolves the state to the given slot index (consecutive
    calls only) and returns the snapshot for that slot.
    """

    topology: Topology
    rng: np.random.Generator
    slot_s: float = 0.04
    doppler_hz: float = 10.0
    noise_power: float = 1.0
    exponent: float = 3.0
    shadowing_std_db: float = 8.0
    speed_mps: float = 1.4
    move_period_s: float = 5.0
    mobility: MobilityState = field(init=False)
    fading: FadingState = field(init=False)
    zeta: float = field(init=False)

    def __post_init__(self):
        self.zeta = jakes_coefficient(self.doppler_hz, self.slot_s)
        self.mobility = init_positions(
            self.topology,
            self.rng,
            shadowing_std_db=self.shadowing_std_db,
            move_period_s=self.move_period_s,
        )
        self.fading = init_fading(self.topology, self.zeta, self.rng)
        self._slots_per_epoch = max(int(round(self.move_period_s / self.slot_s)), 1)

    def advance(self, slot: int) -> ChannelSnapshot:
        if slot > 0:
            self.fading = step_fading(self.fading, self.rng)
            if slot % self._slots_per_epoch == 0:
                epoch = slot // self._slots_per_epoch
                self.mobility = step_mobility(
                    self.mobility,
                    self.topology,
                    epoch * self.move_period_s,
                    self.rng,
                    speed_mps=self.speed_mps,
                    move_period_s=self.move_period_s,
                    shadowing_std_db=self.shadowing_std_db,
                )
        return snapshot(
            self.topology,
            self.mobility,
            self.fading,
            self.noise_power,
            slot=slot,
            exponent=self.exponent,
        )


def single_cell_topology(
    n_users: int = 4,
    *,
    n_tx: int = 1,
    n_rx: int = 1,
    power_budget: float = 4.0,
    radius: float = 100.0,
    min_radius: float = 10.0,
) -> Topology:
    """One site at the origin with n_users identical terminals."""
    site = CellSite(np.zeros(2), n_tx, power_budget)
    users = tuple(UserTerminal(0, n_rx) for _ in range(n_users))
    return Topology((site,), users, radius, min_radius)


def grid_topology(
    n_cells: int = 4,
    users_per_cell: int = 3,
    *,
    n_tx: int = 3,
    n_rx: int = 2,
    power_budget: float = 4.0,
    radius: float = 100.0,
    min_radius: float = 10.0,
) -> Topology:
    """Square-grid sites spaced two radii apart, equal user load per cell."""
    side = int(np.ceil(np.sqrt(n_cells)))
    cells = []
    for k in range(n_cells):
        pos = 2.0 * radius * np.array([k % side, k // side], dtype=float)
        cells.append(CellSite(pos, n_tx, power_budget))
    users = tuple(
        UserTerminal(k, n_rx) for k in range(n_cells) for _ in range(users_per_cell)
    )
    return Topology(tuple(cells), users, radius, min_radius)
