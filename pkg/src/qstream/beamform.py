"""Per-slot downlink beamforming by block-coordinate ascent.

Every user carries one data stream. Given a channel snapshot, per-cell power
budgets and per-user priorities, the solver cycles three closed-form updates

    receive vectors  u  <- MMSE receivers for the current transmit set,
    stream weights   w  <- derivative of the user's MSE cost at its MSE,
    transmit vectors v  <- weighted regularized zero-forcing with the
                           per-cell multiplier pinned by complementary
                           slackness on the power budget,

which never decreases the weighted utility. Two utility modes exist:

  * "qddra"  — weighted perceptual quality: each user's MSE e contributes
               priority * z1*ln(z2*(-ln e) + z3); weights come from the
               quality cost derivative. Priorities are set by the caller
               (the trace generator uses inverse average quality).
  * "wmmse"  — classic sum-rate: contribution -ln e, weights 1/e.

The SNR gap of the rate law is folded into effective channels H/sqrt(gap), so
a stream's internal rate in nats is exactly -ln e at the MMSE receiver; the
configured bandwidth and the bits conversion are applied only when reporting
rates, and reported qualities evaluate the user's quality curve at the
reported rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .channel import ChannelSnapshot
from .numerics import NotPositiveDefinite, solve_hpd
from .quality import RQParams, cost_deriv, quality_of_rate

__all__ = [
    "BisectionFailure",
    "SlotProblem",
    "BeamformerSet",
    "SlotResult",
    "default_init",
    "mmse_receiver",
    "mse",
    "weight_update",
    "transmit_update",
    "rate",
    "solve_slot",
    "update_avg_quality",
]

MODES = ("qddra", "wmmse")

_EIG_CUTOFF = 1e-13  # relative eigenvalue floor when inverting the tx quadratic
_MSE_FLOOR = 1e-16


class BisectionFailure(RuntimeError):
    """The per-cell power multiplier search failed to bracket or converge."""


@dataclass
class SlotProblem:
    """One slot's allocation problem.

    channels[i][k] is the (n_rx_i, n_tx_k) matrix from site k to user i; every
    user decodes a single stream from its home site. user_weights are the
    per-user priorities multiplying each utility term.
    """

    channels: Sequence[Sequence[np.ndarray]]
    cell_of: np.ndarray
    budgets: np.ndarray
    user_weights: np.ndarray
    rq: Sequence[RQParams]
    noise_power: float = 1.0
    snr_gap: float = 1.0
    bandwidth: float = 1e6
    _eff: tuple = field(init=False, repr=False, default=())

    def __post_init__(self):
        self.cell_of = np.asarray(self.cell_of, dtype=int)
        self.budgets = np.asarray(self.budgets, dtype=float)
        self.user_weights = np.asarray(self.user_weights, dtype=float)
        if np.any(self.user_weights <= 0):
            raise ValueError("user weights must be strictly positive")
        if np.any(self.budgets <= 0):
            raise ValueError("power budgets must be strictly positive")
        if self.noise_power <= 0 or self.snr_gap < 1.0 or self.bandwidth <= 0:
            raise ValueError("need noise_power > 0, snr_gap >= 1, bandwidth > 0")
        scale = 1.0 / np.sqrt(self.snr_gap)
        self._eff = tuple(
            tuple(np.asarray(h, dtype=complex) * scale for h in row)
            for row in self.channels
        )

    @classmethod
    def from_snapshot(
        cls,
        snap: ChannelSnapshot,
        topology,
        user_weights,
        rq,
        *,
        snr_gap: float = 1.0,
        bandwidth: float = 1e6,
    ) -> "SlotProblem":
        budgets = np.array([c.power_budget for c in topology.cells])
        return cls(
            snap.channels,
            topology.cell_of(),
            budgets,
            np.asarray(user_weights, dtype=float),
            rq,
            noise_power=snap.noise_power,
            snr_gap=snr_gap,
            bandwidth=bandwidth,
        )

    @property
    def n_users(self) -> int:
        return len(self.channels)

    @property
    def n_cells(self) -> int:
        return len(self.budgets)

    def eff(self, user: int, cell: int) -> np.ndarray:
        return self._eff[user][cell]

    def users_of_cell(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.cell_of == k)


@dataclass(frozen=True)
class BeamformerSet:
    """Converged per-user transmit/receive vectors, weights and MSEs."""

    tx: tuple  # per-user transmit vector, length n_tx of the home site
    rx: tuple  # per-user receive vector, length n_rx
    weight: np.ndarray
    mse: np.ndarray

    def cell_powers(self, problem: SlotProblem) -> np.ndarray:
        p = np.zeros(problem.n_cells)
        for i, v in enumerate(self.tx):
            p[problem.cell_of[i]] += float(np.sum(np.abs(v) ** 2))
        return p


@dataclass(frozen=True)
class SlotResult:
    beams: BeamformerSet
    rates_bps: np.ndarray
    qualities_db: np.ndarray
    iterations: int
    trajectory: np.ndarray  # weighted utility after each receiver update


def default_init(problem: SlotProblem) -> List[np.ndarray]:
    """Equal power split within each cell; direction = dominant right singular
    direction of the user's direct effective channel (20 power-iteration
    steps). Deterministic."""
    counts = np.bincount(problem.cell_of, minlength=problem.n_cells)
    v = []
    for i in range(problem.n_users):
        k = int(problem.cell_of[i])
        h = problem.eff(i, k)
        n = h.shape[1]
        if n == 1:
            x = np.ones(1, dtype=complex)
        else:
            x = np.ones(n, dtype=complex) / np.sqrt(n)
            for _ in range(20):
                y = h.conj().T @ (h @ x)
                nrm = float(np.linalg.norm(y))
                if nrm < 1e-300:
                    break
                x = y / nrm
        v.append(np.sqrt(problem.budgets[k] / counts[k]) * x)
    return v


def mse(
    u: np.ndarray,
    v_all: Sequence[np.ndarray],
    h_streams: Sequence[np.ndarray],
    own: int,
    noise_power: float,
) -> float:
    """Mean-square error of a unit-gain stream estimate.

    h_streams[j] is the (effective) channel the j-th stream crosses to reach
    this receiver; own indexes the intended stream. General quadratic form --
    no receiver optimality assumed.
    """
    e = noise_power * float(np.sum(np.abs(u) ** 2))
    for j, (h, v) in enumerate(zip(h_streams, v_all)):
        g = complex(np.vdot(u, h @ v))
        if j == own:
            e += abs(1.0 - g) ** 2
        else:
            e += abs(g) ** 2
    return e


def mmse_receiver(
    problem: SlotProblem, v_all: Sequence[np.ndarray]
) -> Tuple[List[np.ndarray], np.ndarray]:
    """MMSE receive vectors and the resulting per-user MSEs.

    u_i = (sum_j s_j s_j^H + noise I)^-1 s_own with s_j the arriving stream
    signatures; at this receiver e_i = 1 - Re(u_i^H s_own), clamped to (0, 1].
    """
    n = problem.n_users
    u_out: List[np.ndarray] = []
    e_out = np.empty(n)
    cells = problem.cell_of
    for i in range(n):
        n_rx = problem.eff(i, 0).shape[0]
        cov = problem.noise_power * np.eye(n_rx, dtype=complex)
        s_own = None
        for j in range(n):
            s = problem.eff(i, int(cells[j])) @ v_all[j]
            cov += np.outer(s, s.conj())
            if j == i:
                s_own = s
        u = solve_hpd(cov, s_own)
        u_out.append(u)
        e = 1.0 - float(np.real(np.vdot(u, s_own)))
        e_out[i] = min(max(e, _MSE_FLOOR), 1.0)
    return u_out, e_out


def weight_update(e: float, z: RQParams, mode: str = "qddra") -> float:
    """Stream weight at MSE e: quality-cost derivative, or 1/e for sum-rate."""
    if mode == "qddra":
        return cost_deriv(e, z)
    if mode == "wmmse":
        return 1.0 / float(e)
    raise ValueError(f"unknown mode {mode!r}")


def _power_multiplier(lam, gam, budget) -> float:
    """Smallest mu >= 0 with sum_d gam_d/(lam_d + mu)^2 <= budget, bisected on
    the monotone residual; always lands on the feasible side."""
    total = float(np.sum(gam))
    if total <= 0.0:
        return 0.0

    def residual(mu: float) -> float:
        with np.errstate(divide="ignore", over="ignore"):
            return float(np.sum(gam / (lam + mu) ** 2)) - budget

    lam_min = float(lam[0])
    if lam_min > 0.0 and residual(0.0) <= 0.0:
        return 0.0
    # analytic upper bound sqrt(sum gam / budget) - lam_min is already
    # feasible; keep doubling as a floating-point safety net
    hi = max(np.sqrt(total / budget) - lam_min, 1e-12)
    for _ in range(200):
        if residual(hi) <= 0.0:
            break
        hi *= 2.0
    else:
        raise BisectionFailure("could not bracket the power multiplier")
    lo = 0.0
    tight = 1e-10 * max(budget, 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = residual(mid)
        if -tight <= f <= 0.0:
            return mid  # tight and on the feasible side
        if f > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(hi, 1.0):
            break
    return hi  # residual(hi) <= 0 is a loop invariant


def transmit_update(
    problem: SlotProblem,
    u_all: Sequence[np.ndarray],
    w_all: np.ndarray,
) -> List[np.ndarray]:
    """Per-cell weighted MMSE transmit update under the power budgets.

    For cell k the update solves (A_k + mu_k I) v_i = priority_i w_i h_i^H u_i
    with A_k the priority-and-weight-scaled sum of uplink signatures from all
    users; mu_k = 0 when the unconstrained solution fits the budget, else the
    unique multiplier making the budget tight (complementary slackness). The
    quadratic form is eigendecomposed once so the bisection residual is a
    cheap rational function of mu.
    """
    n = problem.n_users
    alpha = problem.user_weights
    v_out: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(problem.n_cells):
        mine = problem.users_of_cell(k)
        if mine.size == 0:
            continue
        n_tx = problem.eff(int(mine[0]), k).shape[1]
        sig = np.empty((n_tx, n), dtype=complex)
        for j in range(n):
            sig[:, j] = problem.eff(j, k).conj().T @ u_all[j]
        a_mat = (sig * (alpha * w_all)) @ sig.conj().T
        lam, basis = np.linalg.eigh(a_mat)
        lam = np.maximum(lam, 0.0)
        live = lam > _EIG_CUTOFF * float(lam[-1])
        # right-hand sides rotated into the eigenbasis; components on the
        # numerical null space are exact zeros up to rounding (each rhs
        # direction also appears inside A_k) and are dropped
        coefs = []
        gam = np.zeros(n_tx)
        for i in mine:
            b = (alpha[i] * w_all[i]) * sig[:, i]
            c = basis.conj().T @ b
            c[~live] = 0.0
            coefs.append(c)
            gam += np.abs(c) ** 2
        mu = _power_multiplier(lam, gam, float(problem.budgets[k]))
        denom = lam + mu
        denom[~live & (denom <= 0.0)] = 1.0  # inert: those coef entries are 0
        for idx, i in enumerate(mine):
            v_out[int(i)] = basis @ (coefs[idx] / denom)
    return v_out


def rate(problem: SlotProblem, v_all: Sequence[np.ndarray], user: int) -> float:
    """Reported rate of one stream in bits/s.

    bandwidth * log2(1 + s^H Theta^-1 s) with s the user's own arriving
    signature, Theta the interference-plus-noise covariance, both on the
    gap-folded effective channels.
    """
    return problem.bandwidth * _rate_nats(problem, v_all, user) / np.log(2.0)


def _rate_nats(problem: SlotProblem, v_all: Sequence[np.ndarray], user: int) -> float:
    cells = problem.cell_of
    n_rx = problem.eff(user, 0).shape[0]
    cov = problem.noise_power * np.eye(n_rx, dtype=complex)
    s_own = None
    for j in range(problem.n_users):
        s = problem.eff(user, int(cells[j])) @ v_all[j]
        if j == user:
            s_own = s
        else:
            cov += np.outer(s, s.conj())
    sinr = float(np.real(np.vdot(s_own, solve_hpd(cov, s_own))))
    return float(np.log1p(max(sinr, 0.0)))


def _objective(problem: SlotProblem, e: np.ndarray, mode: str) -> float:
    r_nats = -np.log(e)
    if mode == "wmmse":
        return float(problem.user_weights @ r_nats)
    acc = 0.0
    for i, z in enumerate(problem.rq):
        acc += problem.user_weights[i] * z.z1 * np.log(z.z2 * r_nats[i] + z.z3)
    return float(acc)


def solve_slot(
    problem: SlotProblem,
    v_init: Optional[Sequence[np.ndarray]] = None,
    mode: str = "qddra",
    tol: float = 1e-4,
    max_iter: int = 100,
) -> SlotResult:
    """Run receive/weight/transmit cycles until the weighted utility stalls.

    Stops when the utility improves by less than tol (relative) over one full
    cycle, or after max_iter cycles. The recorded trajectory (utility after
    each receiver update) is nondecreasing up to roundoff; per-cell transmit
    power satisfies the budget after every cycle. Deterministic.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    v = list(v_init) if v_init is not None else default_init(problem)
    u, e = mmse_receiver(problem, v)
    traj = [_objective(problem, e, mode)]
    iterations = 0
    for _ in range(max_iter):
        w = np.array(
            [weight_update(float(e[i]), problem.rq[i], mode) for i in range(len(e))]
        )
        v = transmit_update(problem, u, w)
        u, e = mmse_receiver(problem, v)
        traj.append(_objective(problem, e, mode))
        iterations += 1
        if traj[-1] - traj[-2] < tol * max(abs(traj[-2]), 1e-300):
            break
    w = np.array(
        [weight_update(float(e[i]), problem.rq[i], mode) for i in range(len(e))]
    )
    rates = np.array([rate(problem, v, i) for i in range(problem.n_users)])
    quals = np.array(
        [quality_of_rate(rates[i], problem.rq[i]) for i in range(problem.n_users)]
    )
    beams = BeamformerSet(tuple(v), tuple(u), w, e.copy())
    return SlotResult(beams, rates, quals, iterations, np.asarray(traj))


def update_avg_quality(q_avg_prev: float, q_now: float, smoothing: float = 0.1) -> float:
    """Exponential average of per-slot quality: new = s*q + (1-s)*old."""
    if not 0.0 < smoothing <= 1.0:
        raise ValueError("smoothing must lie in (0, 1]")
    return smoothing * q_now + (1.0 - smoothing) * q_avg_prev
