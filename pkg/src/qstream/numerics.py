"""Small self-contained numerical kernel: complex Hermitian solves, a Bessel
J0 evaluator, circularly-symmetric Gaussian sampling and scalar bisection.

Everything downstream (channel evolution, beamforming, curve fitting) funnels
its numerics through here so the hot paths stay auditable.
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

__all__ = [
    "NumericsError",
    "NonHermitian",
    "NotPositiveDefinite",
    "NoSignChange",
    "MaxIterationsExceeded",
    "NegativeVariance",
    "ShapeMismatch",
    "solve_hpd",
    "logdet_hpd",
    "bessel_j0",
    "sample_cscg",
    "bisect",
]

_HERM_TOL = 1e-10
_BISECT_MAX_ITER = 200


class NumericsError(Exception):
    """Base class for kernel failures."""


class NonHermitian(NumericsError):
    """Matrix is not Hermitian within tolerance."""


class NotPositiveDefinite(NumericsError):
    """A zero or negative pivot appeared during factorization."""


class NoSignChange(NumericsError):
    """Bisection bracket endpoints have the same sign."""


class MaxIterationsExceeded(NumericsError):
    """An iteration cap was hit before meeting the tolerance."""


class NegativeVariance(NumericsError):
    """Requested a Gaussian sample with variance < 0."""


class ShapeMismatch(NumericsError):
    """Array arguments have inconsistent dimensions."""


def _check_hermitian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = max(float(np.max(np.abs(a))), 1.0)
    if float(np.max(np.abs(a - a.conj().T))) > _HERM_TOL * scale:
        raise NonHermitian("matrix deviates from A == A^H beyond tolerance")
    return a


def _cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^H = A. Raises on nonpositive pivots."""
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        # pivot = a_jj - ||row so far||^2, must stay strictly positive
        pivot = a[j, j].real - float(np.sum(np.abs(low[j, :j]) ** 2))
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise NotPositiveDefinite(f"pivot {pivot!r} at column {j}")
        ljj = np.sqrt(pivot)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1 :, j] = (
                a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j].conj()
            ) / ljj
    return low


def solve_hpd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b for Hermitian positive definite A.

    Factorizes A = L L^H and back-substitutes; b may be a vector or a matrix
    of stacked right-hand sides.
    """
    a = _check_hermitian(a)
    b = np.asarray(b, dtype=complex)
    if b.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"rhs length {b.shape[0]} != matrix size {a.shape[0]}")
    low = _cholesky(a)
    n = a.shape[0]
    y = b.astype(complex, copy=True)
    for i in range(n):  # forward: L y = b
        if i:
            y[i] = y[i] - low[i, :i] @ y[:i]
        y[i] = y[i] / low[i, i]
    for i in range(n - 1, -1, -1):  # backward: L^H x = y
        if i + 1 < n:
            y[i] = y[i] - low[i + 1 :, i].conj() @ y[i + 1 :]
        y[i] = y[i] / low[i, i]
    return y


def logdet_hpd(a: np.ndarray) -> float:
    """ln det A for Hermitian positive definite A, via the Cholesky factor."""
    low = _cholesky(_check_hermitian(a))
    return float(2.0 * np.sum(np.log(np.real(np.diag(low)))))


def bessel_j0(x: float) -> float:
    """Zero-order Bessel function of the first kind on |x| <= 50.

    Power series below |x| = 10, Hankel asymptotic expansion beyond; both
    branches are accurate to better than 1e-9 absolute over the domain.
    """
    x = float(x)
    if not np.isfinite(x) or abs(x) > 50.0:
        raise ValueError(f"bessel_j0 domain is |x| <= 50, got {x!r}")
    ax = abs(x)
    if ax < 10.0:
        # sum_m (-1)^m (x/2)^{2m} / (m!)^2 -- worst-case cancellation ~1e-13
        q = 0.25 * ax * ax
        term, acc = 1.0, 0.0
        for m in range(1, 60):
            acc += term
            term *= -q / (m * m)
            if abs(term) < 1e-18:
                break
        return acc + term
    # J0 = sqrt(2/(pi x)) [P cos(x - pi/4) - Q sin(x - pi/4)], magnitudes
    # a_m = ((2m-1)!!)^2 / (m! 8^m x^m); truncate when terms stop shrinking.
    chi = ax - 0.25 * np.pi
    a = 1.0
    p, q = 1.0, 0.0
    m = 0
    while m < 40:
        nxt = a * (2 * m + 1) ** 2 / (8.0 * (m + 1) * ax)
        if nxt >= a and m > 1:
            break
        a = nxt
        m += 1
        if m % 2:
            q += a * (-1.0) ** ((m + 1) // 2)
        else:
            p += a * (-1.0) ** (m // 2)
        if a < 1e-18:
            break
    return float(np.sqrt(2.0 / (np.pi * ax)) * (p * np.cos(chi) - q * np.sin(chi)))


def sample_cscg(
    shape: int | Tuple[int, ...], variance: float, rng: np.random.Generator
) -> np.ndarray:
    """Circularly-symmetric complex Gaussian draws, E|x|^2 = variance.

    Real and imaginary parts are independent N(0, variance/2); variance 0
    yields exact zeros (the generator state still advances deterministically).
    """
    if variance < 0.0:
        raise NegativeVariance(f"variance must be >= 0, got {variance!r}")
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return np.sqrt(variance / 2.0) * (re + 1j * im)


def bisect(
    f: Callable[[float], float], lo: float, hi: float, tol: float
) -> float:
    """Root of f on [lo, hi] by bisection.

    Stops when |f(mid)| <= tol or the bracket width falls below tol; the
    endpoints must bracket a sign change. Hard cap of 200 halvings.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo!r}, {hi!r}]")
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise NoSignChange(f"f({lo}) = {flo} and f({hi}) = {fhi}")
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if abs(fmid) <= tol or (hi - lo) <= tol:
            return mid
        if np.sign(fmid) == np.sign(flo):
            lo, flo = mid, fmid
        else:
            hi = mid
    raise MaxIterationsExceeded(f"no root to tol {tol} within {_BISECT_MAX_ITER} halvings")
