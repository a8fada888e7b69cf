"""Checks for the differential-inequality class and its decay laws.

Planted functions exp(-theta t^nu) sit exactly on the predicted decay
rate, and the bracket supremum then admits alpha up to about
theta nu (theta/gamma)^(delta/2); the tests run at 0.7x that ceiling so
membership holds with margin on the finite window.
"""

import numpy as np
import pytest

from dissipation.analysis import MomentSeries
from dissipation.odeclass import (
    DeltaOutOfRange,
    SampledFunction,
    WindowTooShort,
    check_membership,
    fit_class_parameters,
    predicted_exponent,
    sampled_from_callable,
    sampled_from_csv,
    sampled_from_moments,
    sampled_from_values,
    verify_decay_conclusion,
)

GRID = np.geomspace(1.0, 1e3, 200)


def planted(theta, nu):
    fn = lambda t: np.exp(-theta * t ** nu)
    dfn = lambda t: -theta * nu * t ** (nu - 1.0) * np.exp(-theta * t ** nu)
    return fn, dfn


def admissible_alpha(theta, nu, gamma, delta):
    return 0.7 * theta * nu * (theta / gamma) ** (delta / 2.0)


# --- planted functions across the delta range ---------------------------

@pytest.mark.parametrize("delta", [0.0, 0.5, 1.0, 1.5])
def test_planted_function_is_member(delta):
    nu = (2.0 - delta) / (2.0 + delta)
    fn, dfn = planted(0.5, nu)
    f = sampled_from_callable(fn, GRID, derivative=dfn)
    alpha = admissible_alpha(0.5, nu, 1.0, delta)
    res = check_membership(f, alpha, delta, 1.0, 1.0, 2.0)
    assert res["pass"]
    assert res["worst_margin"] >= 0.0
    assert 1.0 <= res["argmax_k"] <= 2.0 * GRID[-1]


@pytest.mark.parametrize("delta", [0.0, 0.5, 1.0, 1.5])
def test_planted_function_passes_with_numerical_derivatives(delta):
    nu = (2.0 - delta) / (2.0 + delta)
    fn, _ = planted(0.5, nu)
    f = sampled_from_values(GRID, fn(GRID))
    alpha = admissible_alpha(0.5, nu, 1.0, delta)
    assert check_membership(f, alpha, delta, 1.0, 1.0, 2.0)["pass"]


@pytest.mark.parametrize("delta", [0.0, 0.5, 1.0, 1.5])
def test_planted_function_decay_conclusion(delta):
    nu = (2.0 - delta) / (2.0 + delta)
    fn, _ = planted(0.5, nu)
    f = sampled_from_values(GRID, fn(GRID))
    res = verify_decay_conclusion(f, delta)
    # log f / t^nu is identically -theta for the planted function
    assert res["limsup_estimate"] == pytest.approx(-0.5, rel=1e-12)
    assert res["pass"]


def test_sqrtlog_case_membership_and_decay():
    grid = np.geomspace(2.0, 1e3, 200)
    fn = lambda t: np.exp(-0.5 * np.sqrt(np.log(t)))
    dfn = lambda t: -0.5 / (2.0 * t * np.sqrt(np.log(t))) * fn(t)
    exact = sampled_from_callable(fn, grid, derivative=dfn)
    assert check_membership(exact, 0.1, 2.0, 1.0, 1.0, 2.0)["pass"]
    numeric = sampled_from_values(grid, fn(grid))
    assert check_membership(numeric, 0.1, 2.0, 1.0, 1.0, 2.0)["pass"]
    res = verify_decay_conclusion(numeric, 2.0)
    assert res["limsup_estimate"] == pytest.approx(-0.5, rel=1e-12)
    assert res["pass"]


# --- the two sign-analysis examples -------------------------------------

def test_zero_function_is_member():
    f = sampled_from_callable(lambda t: 0.0, GRID, derivative=lambda t: 0.0)
    res = check_membership(f, 1.0, 1.0, 1.0, 1.0, 2.0)
    assert res["pass"]
    assert res["worst_margin"] >= 0.0


def test_constant_two_is_not_a_member():
    f = sampled_from_callable(lambda t: 2.0, GRID, derivative=lambda t: 0.0)
    res = check_membership(f, 1.0, 1.0, 1.0, 1.0, 2.0)
    assert not res["pass"]
    # worst case sits at t = 1, K = a, where the bracket is 2 - e^{ -1 }
    assert res["worst_time"] == 1.0
    assert res["argmax_k"] == pytest.approx(1.0)
    assert res["worst_margin"] == pytest.approx(-(2.0 - np.exp(-1.0)),
                                                rel=1e-12)


# --- noise handling ------------------------------------------------------

def test_declared_errors_buy_slack():
    rng = np.random.default_rng(4)
    clean = np.exp(-0.5 * np.cbrt(GRID))
    noisy = np.maximum(clean * (1.0 + 0.02 * rng.standard_normal(GRID.size)),
                       0.0)
    alpha = admissible_alpha(0.5, 1.0 / 3.0, 1.0, 1.0)
    with_se = sampled_from_values(GRID, noisy, errors=0.02 * clean)
    assert check_membership(with_se, alpha, 1.0, 1.0, 1.0, 2.0)["pass"]
    bare = sampled_from_values(GRID, noisy)
    assert not check_membership(bare, alpha, 1.0, 1.0, 1.0, 2.0)["pass"]


# --- bracket optimizer ---------------------------------------------------

@pytest.mark.parametrize("c,t", [(0.9, 1.5), (0.2, 40.0), (1e-6, 900.0),
                                 (0.0, 100.0)])
def test_bracket_max_agrees_with_dense_scan(c, t):
    from dissipation.odeclass import _bracket_max
    delta, gamma = 1.0, 1.0
    lo, hi = 1.0, 2.0 * t
    sup, k = _bracket_max(c, t, delta, gamma, lo, hi)
    kk = np.geomspace(lo, hi, 20000)
    dense = np.max((c - np.exp(-gamma * kk * kk / t)) / kk ** delta)
    assert sup >= dense - 1e-12
    assert lo <= k <= hi


# --- predicted exponent --------------------------------------------------

def test_predicted_exponent_values():
    assert predicted_exponent(0.0) == {"kind": "power", "nu": 1.0}
    assert predicted_exponent(1.0)["nu"] == pytest.approx(1.0 / 3.0)
    assert predicted_exponent(2.0) == {"kind": "sqrtlog"}


def test_predicted_exponent_monotone_to_zero():
    deltas = np.linspace(0.0, 1.999, 80)
    nus = [predicted_exponent(d)["nu"] for d in deltas]
    assert all(a > b for a, b in zip(nus, nus[1:]))
    assert predicted_exponent(1.999)["nu"] < 3e-4


def test_predicted_exponent_domain():
    with pytest.raises(DeltaOutOfRange, match="boundedness"):
        predicted_exponent(2.5)
    with pytest.raises(ValueError, match="nonnegative"):
        predicted_exponent(-0.1)


# --- decay conclusion edges ----------------------------------------------

def test_exact_synthetic_estimates():
    f = sampled_from_values(GRID, np.exp(-2.0 * np.cbrt(GRID)))
    res = verify_decay_conclusion(f, 1.0)
    assert res["limsup_estimate"] == pytest.approx(-2.0, rel=1e-12)
    g2 = np.geomspace(2.0, 1e3, 150)
    f2 = sampled_from_values(g2, np.exp(-3.0 * np.sqrt(np.log(g2))))
    res2 = verify_decay_conclusion(f2, 2.0)
    assert res2["limsup_estimate"] == pytest.approx(-3.0, rel=1e-12)


def test_strictness_threshold_rejects_power_law():
    # log(1/t)/t^(1/3) creeps up to 0 from below; on a window ending at
    # 1e16 the final-decade maximum is about -1.7e-4, inside the declared
    # dead band, so the conclusion must NOT be certified
    big = np.geomspace(1e2, 1e16, 400)
    f = sampled_from_values(big, 1.0 / big)
    res = verify_decay_conclusion(f, 1.0)
    expected = -np.log(big[-1]) / np.cbrt(big[-1])
    assert res["limsup_estimate"] == pytest.approx(expected, rel=1e-12)
    assert not res["pass"]


def test_decay_conclusion_needs_long_window():
    short = np.geomspace(1.0, 50.0, 60)
    f = sampled_from_values(short, np.exp(-short))
    with pytest.raises(ValueError, match="t >= 100"):
        verify_decay_conclusion(f, 1.0)


# --- validation ----------------------------------------------------------

def test_membership_rejects_short_windows():
    t = np.array([0.2, 0.5, 1.0, 2.0, 3.0, 4.0])
    f = sampled_from_values(t, np.exp(-t))
    with pytest.raises(WindowTooShort, match="at t >= 1"):
        check_membership(f, 1.0, 1.0, 1.0, 1.0, 2.0)


def test_membership_rejects_bad_parameters():
    f = sampled_from_values(GRID, np.exp(-np.cbrt(GRID)))
    with pytest.raises(ValueError, match="positive"):
        check_membership(f, 0.0, 1.0, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError, match="positive"):
        check_membership(f, 1.0, 1.0, -1.0, 1.0, 2.0)
    with pytest.raises(ValueError, match="nonnegative"):
        check_membership(f, 1.0, -0.5, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError, match="0 < a < b"):
        check_membership(f, 1.0, 1.0, 1.0, 2.0, 1.0)


def test_sampled_function_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        SampledFunction(times=np.array([1.0, 1.0, 2.0]),
                        values=np.zeros(3), derivatives=np.zeros(3))
    with pytest.raises(ValueError, match="nonnegative"):
        SampledFunction(times=np.array([1.0, 2.0, 3.0]),
                        values=np.array([1.0, -0.1, 0.2]),
                        derivatives=np.zeros(3))
    with pytest.raises(ValueError, match="equal-length"):
        SampledFunction(times=np.array([1.0, 2.0, 3.0]),
                        values=np.zeros(3), derivatives=np.zeros(2))
    with pytest.raises(WindowTooShort, match="difference"):
        sampled_from_values(np.array([1.0, 2.0]), np.array([1.0, 0.5]))


# --- loaders and fitting -------------------------------------------------

def test_csv_loader_roundtrip(tmp_path):
    path = tmp_path / "series.csv"
    t = np.geomspace(1.0, 100.0, 30)
    v = np.exp(-t / 10.0)
    path.write_text("t,f\n" + "".join(
        f"{float(a)!r},{float(b)!r}\n" for a, b in zip(t, v)))
    f = sampled_from_csv(path)
    np.testing.assert_array_equal(f.times, t)
    np.testing.assert_array_equal(f.values, v)
    bad = tmp_path / "empty.csv"
    bad.write_text("t,f\n")
    with pytest.raises(ValueError, match="no numeric rows"):
        sampled_from_csv(bad)


def test_moment_series_adapter_rescales():
    t = np.geomspace(1.0, 200.0, 40)
    series = MomentSeries(eta=0.5, times=t, estimates=np.exp(-np.cbrt(t)),
                          standard_errors=np.full(t.size, 0.01))
    f = sampled_from_moments(series, rescale=0.5)
    np.testing.assert_allclose(f.values, 0.5 * np.exp(-np.cbrt(t)))
    np.testing.assert_allclose(f.errors, 0.005)


def test_fit_class_parameters_recovers_planted_rate():
    f = sampled_from_values(GRID, np.exp(-0.5 * np.cbrt(GRID)))
    alpha, gamma = fit_class_parameters(f, 1.0)
    assert gamma == pytest.approx(1.0, rel=1e-8)
    assert alpha == pytest.approx(0.5 * 0.5 / 3.0 * np.sqrt(0.5), rel=1e-8)
    assert check_membership(f, alpha, 1.0, gamma, 1.0, 2.0)["pass"]


def test_fit_class_parameters_needs_decay():
    f = sampled_from_values(GRID, 1.0 + GRID / GRID[-1])
    with pytest.raises(ValueError, match="no decay"):
        fit_class_parameters(f, 1.0)
