"""Logarithmic rate-quality model and its induced per-user cost.

A stream's perceptual quality (PSNR-like, dB) as a function of the delivered
rate a (bits/s) is modeled as

    q(a) = z1 * ln(z2 * a + z3),        z1 > 0, z2 > 0, z3 >= 1,

which is increasing and saturating. The beamforming solver works with the
per-user mean-square error e in (0, 1] instead of the rate; substituting the
solver's internal rate -ln(e) turns the (negated) quality into the cost

    c(e) = -z1 * ln(-z2 * ln(e) + z3),

whose derivative supplies the solver's per-user weights. c is strictly
increasing on (0, 1]; it is strictly concave there whenever z3 >= z2, which
every fitted parameter set in this package satisfies (fitted z2 is ~1e-6..1e-2
per bit/s). upsilon() inverts the derivative on that domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import bisect

__all__ = [
    "RQParams",
    "FitResult",
    "MseOutOfRange",
    "WeightOutOfRange",
    "TooFewPoints",
    "NonMonotonePoints",
    "quality_of_bitrate",
    "quality_of_rate",
    "cost",
    "cost_deriv",
    "upsilon",
    "fit_rq",
]


class MseOutOfRange(ValueError):
    """MSE argument outside (0, 1]."""


class WeightOutOfRange(ValueError):
    """Weight not in the range of cost_deriv on (0, 1]."""


class TooFewPoints(ValueError):
    """Curve fitting needs at least 3 samples."""


class NonMonotonePoints(ValueError):
    """Fit samples must be strictly increasing in both coordinates."""


@dataclass(frozen=True)
class RQParams:
    """Parameters of the log rate-quality curve."""

    z1: float
    z2: float
    z3: float

    def __post_init__(self):
        if not (self.z1 > 0 and self.z2 > 0 and self.z3 >= 1.0):
            raise ValueError(f"need z1 > 0, z2 > 0, z3 >= 1; got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.z1, self.z2, self.z3])


def quality_of_bitrate(bitrate_bps, z: RQParams):
    """Quality (dB) of an encoding bitrate; accepts scalars or arrays."""
    a = np.asarray(bitrate_bps, dtype=float)
    if np.any(a < 0):
        raise ValueError("bitrate must be >= 0")
    out = z.z1 * np.log(z.z2 * a + z.z3)
    return float(out) if out.ndim == 0 else out

def quality_of_rate(rate_bps, z: RQParams):
    """Quality (dB) of a delivered channel rate; same curve, kept separate so
    call sites say which quantity they mean."""
    return quality_of_bitrate(rate_bps, z)


def _check_mse(e: float) -> float:
    e = float(e)
    if not (0.0 < e <= 1.0):
        raise MseOutOfRange(f"mse must lie in (0, 1], got {e!r}")
    return e


def cost(e: float, z: RQParams) -> float:
    """Perceptual cost of an MSE value: c(e) = -z1 ln(-z2 ln e + z3)."""
    e = _check_mse(e)
    return float(-z.z1 * np.log(-z.z2 * np.log(e) + z.z3))


def cost_deriv(e: float, z: RQParams) -> float:
    """dc/de = z1 z2 / (e * (-z2 ln e + z3)); strictly positive on (0, 1]."""
    e = _check_mse(e)
    return float(z.z1 * z.z2 / (e * (-z.z2 * np.log(e) + z.z3)))


def upsilon(w: float, z: RQParams) -> float:
    """Inverse of cost_deriv on (0, 1]: the e with c'(e) = w.

    Requires z3 >= z2 so that c' is strictly decreasing (w ranges over
    [c'(1), inf) there). Solved by bisection on ln e.
    """
    w = float(w)
    w_at_one = cost_deriv(1.0, z)
    if w < w_at_one * (1.0 - 1e-12):
        raise WeightOutOfRange(f"w = {w!r} below c'(1) = {w_at_one!r}")
    if w <= w_at_one:
        return 1.0

    def widened(log_e: float) -> float:
        e = np.exp(log_e)
        return z.z1 * z.z2 / (e * (-z.z2 * log_e + z.z3)) - w

    lo = -1.0
    while widened(lo) < 0.0:
        lo *= 2.0
        if lo < -745.0:  # exp underflow floor; c' -> inf as e -> 0
            raise WeightOutOfRange(f"w = {w!r} beyond representable range")
    log_e = bisect(widened, lo, 0.0, 1e-13)
    return float(np.exp(log_e))


@dataclass(frozen=True)
class FitResult:
    params: RQParams
    rms_residual: float
    projected: bool  # True if the raw optimum violated the parameter bounds


def _gauss_newton(a, q, start, iters=60):
    """Least-squares fit of q = z1 ln(z2 a + z3) from one starting point."""
    p = np.array(start, dtype=float)
    lam = 1e-12  # Levenberg damping, grown on rejected steps

    def residual(pv):
        inner = pv[1] * a + pv[2]
        if np.any(inner <= 0):
            return None
        return q - pv[0] * np.log(inner)

    r = residual(p)
    if r is None:
        return None
    sse = float(r @ r)
    for _ in range(iters):
        inner = p[1] * a + p[2]
        ln_inner = np.log(inner)
        jac = np.column_stack(
            [-ln_inner, -p[0] * a / inner, -p[0] / inner]
        )  # d residual / d z
        g = jac.T @ r
        h = jac.T @ jac
        step = None
        for _ in range(40):
            try:
                step = np.linalg.solve(h + lam * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-9)
                continue
            cand = p + step
            rc = residual(cand)
            if rc is not None and float(rc @ rc) <= sse:
                p, r = cand, rc
                sse = float(rc @ rc)
                lam = max(lam * 0.25, 1e-14)
                break
            lam = max(lam * 10.0, 1e-9)
        else:
            break
        if np.max(np.abs(step)) < 1e-14 * max(1.0, float(np.max(np.abs(p)))):
            break
    return p, sse


def fit_rq(bitrates_bps: Sequence[float], qualities_db: Sequence[float]) -> FitResult:
    """Fit the log curve to (bitrate, quality) samples.

    Grid-seeded Gauss-Newton with 10 restarts; the best optimum is projected
    onto z1 > 0, z2 > 0, z3 >= 1 afterwards (flagged in the result) so the
    returned parameters always satisfy the model invariants.
    """
    a = np.asarray(bitrates_bps, dtype=float)
    q = np.asarray(qualities_db, dtype=float)
    if a.shape != q.shape or a.ndim != 1:
        raise ValueError("bitrates and qualities must be 1-d and equal length")
    if a.size < 3:
        raise TooFewPoints(f"need >= 3 points, got {a.size}")
    order = np.argsort(a)
    a, q = a[order], q[order]
    if np.any(np.diff(a) <= 0) or np.any(np.diff(q) <= 0):
        raise NonMonotonePoints("samples must increase strictly in rate and quality")

    # 10 restarts: z2 log-spaced around 1/max(a) (placing z2*a near O(1)..O(1e3)),
    # z3 alternating between 1 and 2, z1 from a closed-form profile fit.
    seeds = []
    for i, scale in enumerate(np.logspace(-1.0, 3.5, 10)):
        z2 = scale / float(a[-1])
        z3 = 1.0 if i % 2 == 0 else 2.0
        phi = np.log(z2 * a + z3)
        denom = float(phi @ phi)
        z1 = float(phi @ q) / denom if denom > 0 else 1.0
        seeds.append((max(z1, 1e-6), z2, z3))

    best = None
    for s in seeds:
        got = _gauss_newton(a, q, s)
        if got is None:
            continue
        if best is None or got[1] < best[1]:
            best = got
    if best is None:  # cannot happen for monotone inputs, kept as a guard
        raise NonMonotonePoints("no feasible starting point")

    p, sse = best
    raw = p.copy()
    p[0] = max(p[0], 1e-9)
    p[1] = max(p[1], 1e-12)
    p[2] = max(p[2], 1.0)
    projected = bool(np.any(p != raw))
    params = RQParams(*p)
    resid = q - quality_of_bitrate(a, params)
    return FitResult(params, float(np.sqrt(np.mean(resid**2))), projected)
