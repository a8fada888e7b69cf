"""Membership checks for the decay-forcing differential inequality.

A nonnegative C^1 function f belongs to the class F(alpha, delta, gamma)
when f'(t) <= -alpha sup_{K in [a, bt]} (f(t) - exp(-gamma K^2/t))/K^delta
holds for all t >= 1 and some 0 < a < b.  Membership forces decay like
exp(-theta t^nu) with nu = (2-delta)/(2+delta) when delta < 2, and like
exp(-theta sqrt(log t)) at delta = 2.  This module checks sampled
trajectories against the inequality under an explicit numerical
derivative contract, and estimates the limsup that the decay conclusion
bounds.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .analysis import MomentSeries

STRICTNESS = -1e-3          # declared threshold standing in for "limsup < 0"


class WindowTooShort(ValueError):
    """Fewer than 5 samples in the checked window."""


class DeltaOutOfRange(ValueError):
    """For delta > 2 only boundedness follows; there is no decay law."""


@dataclass(frozen=True)
class SampledFunction:
    """A nonnegative function known at finitely many times.

    derivative_slack carries the local error estimate of whatever
    difference scheme produced ``derivatives`` (zero for exact
    derivatives); errors are per-sample standard errors of the values
    (zero for deterministic data).  Both feed the membership slack.
    """

    times: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray
    derivative_slack: np.ndarray = field(default=None)
    errors: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        dv = np.asarray(self.derivatives, dtype=np.float64)
        if t.ndim != 1 or t.size != v.size or t.size != dv.size:
            raise ValueError("times, values, derivatives must be equal-length")
        if t.size and np.any(np.diff(t) <= 0.0):
            raise ValueError("times must be strictly increasing")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("values must be finite and nonnegative")
        slack = (np.zeros_like(t) if self.derivative_slack is None
                 else np.asarray(self.derivative_slack, dtype=np.float64))
        errs = (np.zeros_like(t) if self.errors is None
                else np.asarray(self.errors, dtype=np.float64))
        if slack.shape != t.shape or errs.shape != t.shape:
            raise ValueError("slack and errors must match times in length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "derivatives", dv)
        object.__setattr__(self, "derivative_slack", slack)
        object.__setattr__(self, "errors", errs)


def _central_differences(times, values):
    """Three-point derivative on a possibly nonuniform grid, with a local
    error estimate from the spread against the one-sided quotients."""
    n = times.size
    deriv = np.empty(n)
    slack = np.empty(n)
    fwd = np.diff(values) / np.diff(times)
    deriv[0], deriv[-1] = fwd[0], fwd[-1]
    h0 = times[1:-1] - times[:-2]
    h1 = times[2:] - times[1:-1]
    deriv[1:-1] = (-h1 / (h0 * (h0 + h1)) * values[:-2]
                   + (h1 - h0) / (h0 * h1) * values[1:-1]
                   + h0 / (h1 * (h0 + h1)) * values[2:])
    slack[1:-1] = np.maximum(np.abs(deriv[1:-1] - fwd[:-1]),
                             np.abs(deriv[1:-1] - fwd[1:]))
    # no second scheme at the ends; charge the full neighbor spread
    slack[0] = abs(fwd[0] - deriv[1]) if n > 2 else 0.0
    slack[-1] = abs(fwd[-1] - deriv[-2]) if n > 2 else 0.0
    return deriv, slack


def sampled_from_values(times, values, errors=None) -> SampledFunction:
    """Build a SampledFunction by differencing the given samples."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.size < 3:
        raise WindowTooShort("need at least 3 samples to difference")
    deriv, slack = _central_differences(t, v)
    return SampledFunction(times=t, values=v, derivatives=deriv,
                           derivative_slack=slack, errors=errors)


def sampled_from_callable(fn, times, derivative=None) -> SampledFunction:
    """Sample a closed-form function, with its exact derivative if given."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray([fn(x) for x in t], dtype=np.float64)
    if derivative is None:
        return sampled_from_values(t, v)
    dv = np.asarray([derivative(x) for x in t], dtype=np.float64)
    return SampledFunction(times=t, values=v, derivatives=dv)


def sampled_from_csv(path) -> SampledFunction:
    """Read (t, f) rows; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ValueError(f"no numeric rows in {path}")
    t, v = map(np.asarray, zip(*rows))
    return sampled_from_values(t, v)


def sampled_from_moments(series: MomentSeries, rescale=1.0) -> SampledFunction:
    """Adapt a fractional-moment series, scaled by the given constant."""
    return sampled_from_values(series.times, rescale * series.estimates,
                               errors=rescale * series.standard_errors)


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _bracket_max(c, t, delta, gamma, lo, hi):
    """Maximize (c - exp(-gamma K^2/t))/K^delta over K in [lo, hi].

    The bracket can dip to a local minimum before its single interior
    maximum, so golden-section alone is not safe; a coarse log-spaced
    scan locates the best region first, then golden-section refines it.
    """

    def val(k):
        return (c - np.exp(-gamma * k * k / t)) / k ** delta

    grid = np.geomspace(lo, hi, 48)
    scores = val(grid)
    j = int(np.argmax(scores))
    a = grid[max(j - 1, 0)]
    b = grid[min(j + 1, grid.size - 1)]
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = val(x1), val(x2)
    while b - a > 1e-12 * max(1.0, b):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = val(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = val(x1)
    k_best = 0.5 * (a + b)
    best = val(k_best)
    # endpoints win when the maximizer sits outside (lo, hi)
    for k in (lo, hi):
        s = val(k)
        if s > best:
            best, k_best = s, k
    return float(best), float(k_best)


def _derivative_se(times, errors):
    """Noise SE of the central difference quotient, one-sided at the ends."""
    n = times.size
    se = np.zeros(n)
    if not np.any(errors > 0.0) or n < 2:
        return se
    se[1:-1] = np.hypot(errors[2:], errors[:-2]) / (times[2:] - times[:-2])
    se[0] = np.hypot(errors[0], errors[1]) / (times[1] - times[0])
    se[-1] = np.hypot(errors[-1], errors[-2]) / (times[-1] - times[-2])
    return se


def check_membership(f: SampledFunction, alpha, delta, gamma, a, b) -> dict:
    """Test the differential inequality at every sample with t >= 1.

    The slack at each sample is 3x the difference-scheme error estimate,
    plus 3x the propagated noise SE of the derivative, plus the response
    of the right side to a 3-SE perturbation of f(t).  Returns the worst
    margin (negative means violated), the maximizing K there, and the
    time at which it occurs.
    """
    if alpha <= 0.0 or gamma <= 0.0:
        raise ValueError("alpha and gamma must be positive")
    if delta < 0.0:
        raise ValueError("delta must be nonnegative")
    if not 0.0 < a < b:
        raise ValueError("need 0 < a < b")
    mask = f.times >= 1.0
    if int(mask.sum()) < 5:
        raise WindowTooShort(
            f"only {int(mask.sum())} samples at t >= 1; need at least 5")
    times = f.times[mask]
    values = f.values[mask]
    derivs = f.derivatives[mask]
    slack = 3.0 * f.derivative_slack[mask]
    dse = _derivative_se(f.times, f.errors)[mask]

    worst = np.inf
    worst_k = np.nan
    worst_t = np.nan
    for i, t in enumerate(times):
        sup, k_star = _bracket_max(values[i], t, delta, gamma, a, b * t)
        tol = (slack[i] + 3.0 * dse[i]
               + 3.0 * alpha * f.errors[mask][i] / k_star ** delta)
        margin = -alpha * sup - derivs[i] + tol
        if margin < worst:
            worst, worst_k, worst_t = margin, k_star, t
    return {"pass": bool(worst >= 0.0), "worst_margin": float(worst),
            "argmax_k": float(worst_k), "worst_time": float(worst_t)}


def predicted_exponent(delta) -> dict:
    """Decay law forced by membership: a power of t below delta = 2, the
    square-root-of-log law exactly at delta = 2."""
    if delta < 0.0:
        raise ValueError("delta must be nonnegative")
    if delta > 2.0:
        raise DeltaOutOfRange(
            f"delta = {delta:g} > 2: membership only yields boundedness")
    if delta == 2.0:
        return {"kind": "sqrtlog"}
    return {"kind": "power", "nu": (2.0 - delta) / (2.0 + delta)}


def verify_decay_conclusion(f: SampledFunction, delta) -> dict:
    """Estimate limsup log f(t) / t^nu (or / sqrt(log t) at delta = 2)
    over the final decade of the window; pass needs it below -1e-3, the
    declared stand-in for strict negativity on a finite window."""
    if f.times[-1] < 100.0:
        raise ValueError("window must reach t >= 100 for a limsup estimate")
    law = predicted_exponent(delta)
    decade = f.times >= f.times[-1] / 10.0
    t = f.times[decade]
    with np.errstate(divide="ignore"):
        logf = np.log(f.values[decade])
    if law["kind"] == "power":
        scale = t ** law["nu"]
    else:
        scale = np.sqrt(np.log(t))
    estimate = float(np.max(logf / scale))
    return {"limsup_estimate": estimate, "pass": bool(estimate <= STRICTNESS)}


def fit_class_parameters(f: SampledFunction, delta, t_min=1.0) -> tuple:
    """Suggest (alpha, gamma) under which a function decaying at the
    predicted rate passes the membership check.

    Regresses log f on the law's time scale to estimate the rate theta,
    then returns gamma = 2 theta and alpha = theta nu (theta/gamma)^(d/2)
    / 2; for a function that genuinely decays like exp(-theta t^nu) the
    bracket supremum makes any alpha up to about twice that admissible,
    so the halved value leaves margin for sampling noise.
    """
    law = predicted_exponent(delta)
    mask = (f.times >= t_min) & (f.values > 0.0)
    if int(mask.sum()) < 5:
        raise WindowTooShort("need at least 5 positive samples past t_min")
    t = f.times[mask]
    scale = t ** law["nu"] if law["kind"] == "power" else np.sqrt(np.log(t))
    theta = -np.polyfit(scale, np.log(f.values[mask]), 1)[0]
    if theta <= 0.0:
        raise ValueError("no decay detected; cannot fit class parameters")
    nu = law["nu"] if law["kind"] == "power" else 0.5
    gamma = 2.0 * theta
    alpha = 0.5 * theta * nu * (theta / gamma) ** (delta / 2.0)
    return float(alpha), float(gamma)
