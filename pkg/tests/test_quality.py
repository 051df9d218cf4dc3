import numpy as np
import pytest

from qstream.quality import (
    FitResult,
    MseOutOfRange,
    NonMonotonePoints,
    RQParams,
    TooFewPoints,
    WeightOutOfRange,
    cost,
    cost_deriv,
    fit_rq,
    quality_of_bitrate,
    quality_of_rate,
    upsilon,
)

LADDER = np.array([0.3e6, 0.75e6, 1.2e6, 1.85e6, 2.85e6, 3.2e6])


def rand_params(rng):
    # z3 >= z2 keeps the cost strictly concave on (0, 1]
    z3 = float(rng.uniform(1.0, 3.0))
    z2 = float(rng.uniform(0.05, 1.0)) * z3
    z1 = float(rng.uniform(0.5, 10.0))
    return RQParams(z1, z2, z3)


# ---------------------------------------------------------------- curve


def test_quality_zero_rate_unit_z3():
    assert quality_of_rate(0.0, RQParams(3.0, 1e-6, 1.0)) == 0.0


def test_quality_closed_form():
    z = RQParams(2.0, 0.5, 1.0)
    assert quality_of_bitrate(2.0, z) == pytest.approx(2.0 * np.log(2.0), rel=1e-12)


def test_quality_monotone_on_ladder():
    z = RQParams(7.5, 2e-6, 1.0)
    q = quality_of_bitrate(LADDER, z)
    assert np.all(np.diff(q) > 0)


def test_quality_rejects_negative_rate():
    with pytest.raises(ValueError):
        quality_of_rate(-1.0, RQParams(1.0, 1.0, 1.0))


def test_quality_rate_inversion_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        z = rand_params(rng)
        a = float(rng.uniform(1e3, 1e7))
        q = quality_of_rate(a, z)
        back = (np.exp(q / z.z1) - z.z3) / z.z2
        assert back == pytest.approx(a, rel=1e-8)


def test_params_validation():
    with pytest.raises(ValueError):
        RQParams(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RQParams(1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        RQParams(1.0, 1.0, 0.5)


# ---------------------------------------------------------------- cost


def test_cost_at_one_is_zero_when_z3_is_one():
    assert cost(1.0, RQParams(4.0, 2.0, 1.0)) == 0.0


def test_cost_unit_params_closed_form():
    z = RQParams(1.0, 1.0, 1.0)
    assert cost(np.exp(-1.0), z) == pytest.approx(-np.log(2.0), rel=1e-12)


def test_cost_strictly_increasing_and_midpoint_concave():
    rng = np.random.default_rng(9)
    for _ in range(100):
        z = rand_params(rng)
        e1, e2 = np.sort(rng.uniform(1e-6, 1.0, 2))
        if e1 == e2:
            continue
        assert cost(e1, z) < cost(e2, z)
        mid = 0.5 * (e1 + e2)
        assert cost(mid, z) >= 0.5 * (cost(e1, z) + cost(e2, z)) - 1e-12


def test_cost_domain():
    z = RQParams(1.0, 1.0, 1.0)
    for bad in (0.0, -0.5, 1.0 + 1e-9):
        with pytest.raises(MseOutOfRange):
            cost(bad, z)


# ---------------------------------------------------------------- cost_deriv


def test_cost_deriv_unit_params_at_one():
    assert cost_deriv(1.0, RQParams(1.0, 1.0, 1.0)) == pytest.approx(1.0, rel=1e-12)


def test_cost_deriv_matches_finite_difference():
    rng = np.random.default_rng(13)
    for _ in range(100):
        z = rand_params(rng)
        e = float(rng.uniform(0.01, 0.98))
        h = 1e-6 * e
        want = (cost(e + h, z) - cost(e - h, z)) / (2 * h)
        assert cost_deriv(e, z) == pytest.approx(want, rel=1e-6)


def test_cost_deriv_positive_and_decreasing():
    # derivative positive everywhere; decreasing in e on the concave domain
    rng = np.random.default_rng(17)
    for _ in range(50):
        z = rand_params(rng)
        es = np.sort(rng.uniform(1e-4, 1.0, 8))
        d = [cost_deriv(float(e), z) for e in es]
        assert all(x > 0 for x in d)
        assert all(d[i] >= d[i + 1] - 1e-12 for i in range(len(d) - 1))


# ---------------------------------------------------------------- upsilon


def test_upsilon_round_trip_unit_params():
    z = RQParams(1.0, 1.0, 1.0)
    for e in np.linspace(0.02, 1.0, 25):
        w = cost_deriv(float(e), z)
        assert upsilon(w, z) == pytest.approx(float(e), rel=1e-9, abs=1e-12)


def test_upsilon_round_trip_random_params():
    rng = np.random.default_rng(21)
    for _ in range(50):
        z = rand_params(rng)
        e = float(rng.uniform(1e-4, 1.0))
        assert upsilon(cost_deriv(e, z), z) == pytest.approx(e, rel=1e-8)


def test_upsilon_small_z2_regime():
    # the regime fitted video curves live in: z2 << z3
    z = RQParams(7.5, 2e-6, 1.0)
    for e in (0.9, 0.5, 0.1, 1e-3):
        assert upsilon(cost_deriv(e, z), z) == pytest.approx(e, rel=1e-8)


def test_upsilon_rejects_weight_below_range():
    z = RQParams(1.0, 1.0, 1.0)
    with pytest.raises(WeightOutOfRange):
        upsilon(0.5 * cost_deriv(1.0, z), z)


# ---------------------------------------------------------------- fit_rq


def test_fit_recovers_exact_ladder_points():
    truth = RQParams(7.5, 2e-6, 1.0)
    res = fit_rq(LADDER, quality_of_bitrate(LADDER, truth))
    assert isinstance(res, FitResult)
    assert res.params.z1 == pytest.approx(truth.z1, abs=1e-6)
    assert res.params.z2 == pytest.approx(truth.z2, abs=1e-6)
    assert res.params.z3 == pytest.approx(truth.z3, abs=1e-6)
    assert res.rms_residual < 1e-9


def test_fit_three_points_exact():
    truth = RQParams(3.0, 1e-5, 1.5)
    a = np.array([1e5, 8e5, 3e6])
    res = fit_rq(a, quality_of_bitrate(a, truth))
    assert res.rms_residual < 1e-10


def test_fit_noisy_points_small_residual():
    rng = np.random.default_rng(33)
    truth = RQParams(6.0, 5e-6, 1.0)
    ok = 0
    for _ in range(10):
        q = quality_of_bitrate(LADDER, truth) + rng.normal(0.0, 0.1, LADDER.size)
        if np.any(np.diff(q) <= 0):
            continue
        res = fit_rq(LADDER, q)
        ok += 1
        assert res.rms_residual <= 0.2
    assert ok >= 5


def test_fit_result_params_always_valid():
    # even when the best unconstrained fit sits outside the bounds
    a = np.array([1e5, 2e5, 4e5, 8e5])
    q = np.array([1.0, 1.2, 1.4, 1.6])  # nearly log-linear, pulls z3 low
    res = fit_rq(a, q)
    assert res.params.z1 > 0 and res.params.z2 > 0 and res.params.z3 >= 1.0


def test_fit_too_few_points():
    with pytest.raises(TooFewPoints):
        fit_rq([1e5, 2e5], [30.0, 31.0])


def test_fit_non_monotone_points():
    with pytest.raises(NonMonotonePoints):
        fit_rq([1e5, 2e5, 3e5], [30.0, 29.0, 31.0])
    with pytest.raises(NonMonotonePoints):
        fit_rq([1e5, 1e5, 3e5], [30.0, 31.0, 32.0])
