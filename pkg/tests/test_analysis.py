"""Post-processing tests.

The second-moment oracle is checked against an independently derived
renewal computation (closed Bessel form of the return probability), the
fits against planted decay laws, and the statistical checks on frozen
seeds with pre-verified z-scores.
"""

import csv
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import ive

from dissipation.analysis import (BoxTooSmall, EmptyInput, InvalidC,
                                  MomentSeries, NonPositiveEstimates,
                                  SweepResult, export_sweep_csv, fit_decay,
                                  fractional_moment, laplace_monotonicity_test,
                                  local_decay_check, lower_bound_check,
                                  mass_lower_bound, norm_ratio,
                                  pam_second_moment_oracle, survival_sweep)
from dissipation.kernel import transition_kernel
from dissipation.model import (BoxPolicy, LatticeField, SimParams,
                               builtin_laplacian, linear_sigma)
from dissipation.sde import simulate_campaign

MODEL1 = (builtin_laplacian(1), linear_sigma(1.0))

# Independent targets for E[m_t^2], from the renewal equation
#   S_t = c0^2 g(t) + lam^2 int_0^t g(t-s) S_s ds,   g(u) = p_{2u}(0),
# solved by trapezoid product integration with Richardson extrapolation
# (see volterra_second_moment below).  Frozen before the ODE oracle ran.
VOLTERRA_D1 = 2.5134469433       # d=1, lam=1, t=2
VOLTERRA_D2 = 1.3390522883       # d=2, lam=1.2, t=0.25
# Regression pins of the oracle's own output at those settings
ORACLE_D1 = 2.5134469433546176
ORACLE_D2 = 1.3390522882463467


def volterra_second_moment(d, lam, t_end, h, c0=1.0):
    """Renewal-equation solution for E[m_t^2]; independent of the oracle.

    Uses p_t(0) = [e^(-t/d) I0(t/d)]^d (the rate-1 walk is a product of
    rate-1/d coordinate walks)."""
    n = int(round(t_end / h))
    t = np.arange(n + 1) * h
    g = ive(0, 2.0 * t / d) ** d
    s = np.empty(n + 1)
    s[0] = c0 * c0
    lam2h = lam * lam * h
    denom = 1.0 - 0.5 * lam2h
    for i in range(1, n + 1):
        conv = 0.5 * g[i] * s[0] + np.dot(g[i - 1:0:-1], s[1:i])
        s[i] = (c0 * c0 * g[i] + lam2h * conv) / denom
    return c0 * c0 + lam * lam * np.trapezoid(s, dx=h)


@pytest.fixture(scope="module")
def decay_campaign():
    p = SimParams(noise_level=2.0, horizon=3.0, time_step=0.018,
                  box_policy=BoxPolicy(kind="adaptive"), replica_count=300,
                  rng_seed=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate_campaign(p, MODEL1, threads=3)


@pytest.fixture(scope="module")
def small_sweep():
    with warnings.catch_warnings():
        # high-lambda adaptive boxes touch their cap now and then
        warnings.simplefilter("ignore")
        return survival_sweep(MODEL1, [0.5, 1.0, 2.0, 4.0], horizon=4.0,
                              replicas=80, seed=12, threads=3)


# --------------------------------------------------------- fractional moments


def test_eta_one_is_plain_mean(decay_campaign):
    series = fractional_moment(decay_campaign, eta=1.0)
    stack = np.stack([tr.mass for tr in decay_campaign])
    assert np.array_equal(series.estimates, stack.mean(axis=0))
    assert series.estimates[0] == 1.0          # t = 0 mass is exact


def test_constant_trajectories_give_exact_moment():
    tr = SimpleNamespace(times=np.array([0.0, 1.0, 2.0]),
                         mass=np.array([4.0, 4.0, 4.0]))
    series = fractional_moment([tr, tr, tr], eta=0.5)
    assert np.all(series.estimates == 2.0)
    assert np.all(series.standard_errors == 0.0)


def test_moment_mean_within_band(decay_campaign):
    # E[m_t] = c_0 at every sampled time; frozen seed gives max |z| = 2.46
    series = fractional_moment(decay_campaign, eta=1.0)
    se = np.where(series.standard_errors > 0, series.standard_errors, np.inf)
    assert np.max(np.abs(series.estimates - 1.0) / se) <= 4.0


def test_half_moment_is_supermartingale(decay_campaign):
    # paired per-replica differences of m^(1/2) between consecutive sample
    # times must not increase beyond noise; frozen seed gives max z = 1.35
    half = np.stack([tr.mass ** 0.5 for tr in decay_campaign])
    diffs = np.diff(half, axis=1)
    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(half.shape[0])
    assert np.max(mean / np.where(se > 0, se, np.inf)) <= 3.0


def test_moment_grid_selection(decay_campaign):
    series = fractional_moment(decay_campaign, eta=0.5, t_grid=[1.0, 3.0])
    assert series.times.size == 2
    # horizon 3.0 at dt = 0.018 rounds to 167 steps, so the run ends at 3.006
    assert series.times[-1] == decay_campaign[0].times[-1]


def test_moment_input_validation(decay_campaign):
    with pytest.raises(EmptyInput):
        fractional_moment([], eta=0.5)
    with pytest.raises(EmptyInput):
        fractional_moment(decay_campaign, eta=0.5, t_grid=[])
    with pytest.raises(ValueError, match="eta"):
        fractional_moment(decay_campaign, eta=1.5)
    bad = SimpleNamespace(times=np.array([0.0, 9.0]), mass=np.array([1.0, 1.0]))
    with pytest.raises(ValueError, match="sample times"):
        fractional_moment([decay_campaign[0], bad], eta=1.0)


def test_jackknife_matches_classical_se():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    tr = [SimpleNamespace(times=np.array([0.0]), mass=np.array([v]))
          for v in np.abs(x) + 1.0]
    series = fractional_moment(tr, eta=1.0)
    masses = np.array([t.mass[0] for t in tr])
    classical = masses.std(ddof=1) / np.sqrt(masses.size)
    assert series.standard_errors[0] == pytest.approx(classical, rel=1e-12)


# ----------------------------------------------------------------- decay fits


def synthetic_series(rate, law, amplitude=1.0):
    t = np.linspace(1.0, 60.0, 25)
    x = np.cbrt(t) if law == "d1" else np.sqrt(np.log(t))
    est = amplitude * np.exp(-rate * x)
    return MomentSeries(eta=0.5, times=t, estimates=est,
                        standard_errors=np.zeros_like(t))


def test_fit_recovers_planted_cube_root_law():
    fit = fit_decay(synthetic_series(2.0, "d1", amplitude=0.7), "d1")
    assert fit["rate"] == pytest.approx(2.0, abs=1e-6)
    assert fit["intercept"] == pytest.approx(np.log(0.7), abs=1e-6)
    assert fit["ci"][0] == pytest.approx(2.0, abs=1e-5)


def test_fit_recovers_planted_log_law():
    fit = fit_decay(synthetic_series(3.0, "d2"), "d2")
    assert fit["rate"] == pytest.approx(3.0, abs=1e-6)


def test_fit_drops_early_times():
    t = np.concatenate(([0.1, 0.5], np.linspace(1.0, 60.0, 25)))
    est = np.exp(-2.0 * np.cbrt(t))
    series = MomentSeries(eta=0.5, times=t, estimates=est,
                          standard_errors=np.zeros_like(t))
    fit = fit_decay(series, "d1")
    assert fit["n_points"] == 25
    assert fit["rate"] == pytest.approx(2.0, abs=1e-6)


def test_fit_input_validation():
    series = synthetic_series(2.0, "d1")
    with pytest.raises(ValueError, match="law"):
        fit_decay(series, "d3")
    short = MomentSeries(eta=0.5, times=series.times[:5],
                         estimates=series.estimates[:5],
                         standard_errors=series.standard_errors[:5])
    with pytest.raises(ValueError, match=">= 10 points"):
        fit_decay(short, "d1")
    dead = MomentSeries(eta=0.5, times=series.times,
                        estimates=np.zeros_like(series.times),
                        standard_errors=series.standard_errors)
    with pytest.raises(NonPositiveEstimates):
        fit_decay(dead, "d1")


# --------------------------------------------------------- second-moment oracle


def test_oracle_no_noise_conserves_mass():
    tau = builtin_laplacian(1)
    assert pam_second_moment_oracle(tau, 0.0, 1.0, 20, 2.0,
                                    time_step=1e-3) == pytest.approx(1.0, rel=1e-12)


def test_oracle_at_time_zero():
    tau = builtin_laplacian(1)
    assert pam_second_moment_oracle(tau, 1.0, 3.0, 20, 0.0) == 9.0


def test_oracle_matches_renewal_solution():
    tau = builtin_laplacian(1)
    value = pam_second_moment_oracle(tau, 1.0, 1.0, 20, 2.0)
    assert value == pytest.approx(VOLTERRA_D1, rel=1e-9)
    assert value == pytest.approx(ORACLE_D1, rel=1e-12)


def test_oracle_matches_renewal_solution_d2():
    tau = builtin_laplacian(2)
    value = pam_second_moment_oracle(tau, 1.2, 1.0, 10, 0.25, time_step=5e-3)
    assert value == pytest.approx(VOLTERRA_D2, rel=1e-9)
    assert value == pytest.approx(ORACLE_D2, rel=1e-12)


def test_oracle_scales_with_initial_mass():
    tau = builtin_laplacian(1)
    one = pam_second_moment_oracle(tau, 1.0, 1.0, 12, 0.5, time_step=1e-3)
    two = pam_second_moment_oracle(tau, 1.0, 2.0, 12, 0.5, time_step=1e-3)
    assert two == pytest.approx(4.0 * one, rel=1e-12)


def test_oracle_rejects_small_box():
    tau = builtin_laplacian(1)
    with pytest.raises(BoxTooSmall):
        pam_second_moment_oracle(tau, 1.0, 1.0, 10, 2.0)


def test_renewal_solver_self_converges():
    # step-halving sanity for the independent target itself
    coarse = volterra_second_moment(1, 1.0, 2.0, 4e-4)
    fine = volterra_second_moment(1, 1.0, 2.0, 2e-4)
    assert fine == pytest.approx(VOLTERRA_D1, rel=1e-8)
    assert abs(coarse - fine) < 1e-7


# ------------------------------------------------------------- survival sweep


def test_sweep_shape_and_monotonicity(small_sweep):
    assert small_sweep.masses.shape == (4, 80)
    assert small_sweep.threshold == 0.25
    assert small_sweep.survival[0] == 1.0
    assert small_sweep.survival[-1] == 0.0
    assert np.all(np.diff(small_sweep.survival) <= 0.0)
    assert np.all(np.diff(small_sweep.laplace) > 0.0)
    assert np.all((small_sweep.survival >= 0) & (small_sweep.survival <= 1))


def test_sweep_crossing_between_bracketing_levels(small_sweep):
    # frozen seed: survival 0.74 at lam=1 and 0.33 at lam=2
    assert small_sweep.crossing == pytest.approx(1.586, abs=0.01)


def test_sweep_zero_noise_always_survives():
    sweep = survival_sweep(MODEL1, [0.0, 0.5], horizon=1.0, replicas=10,
                           seed=1)
    assert sweep.survival[0] == 1.0
    assert sweep.crossing is None


def test_sweep_input_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        survival_sweep(MODEL1, [1.0, 0.5], horizon=1.0, replicas=4)
    with pytest.raises(ValueError, match="threshold"):
        survival_sweep(MODEL1, [0.5, 1.0], horizon=1.0, replicas=4,
                       threshold=2.0)


# ----------------------------------------------------- Laplace monotonicity


def test_laplace_monotone_on_real_sweep(small_sweep):
    report = laplace_monotonicity_test(small_sweep)
    assert report["pass"]
    assert report["violations"] == []
    assert all(p["z"] > 0.0 for p in report["pairs"])


def test_laplace_flat_degenerate_sweep_passes():
    masses = np.full((3, 20), 1.0)
    sweep = SweepResult(lambda_grid=np.array([0.0, 0.1, 0.2]),
                        survival=np.ones(3), survival_se=np.zeros(3),
                        laplace=np.full(3, np.exp(-1.0)),
                        laplace_se=np.zeros(3), crossing=None,
                        threshold=0.25, horizon=1.0, masses=masses)
    report = laplace_monotonicity_test(sweep)
    assert report["pass"]
    assert all(p["z"] == 0.0 for p in report["pairs"])


def test_laplace_shuffled_sweep_is_flagged(small_sweep):
    backwards = SweepResult(lambda_grid=small_sweep.lambda_grid,
                            survival=small_sweep.survival[::-1],
                            survival_se=small_sweep.survival_se[::-1],
                            laplace=small_sweep.laplace[::-1],
                            laplace_se=small_sweep.laplace_se[::-1],
                            crossing=None, threshold=0.25, horizon=4.0,
                            masses=small_sweep.masses[::-1])
    report = laplace_monotonicity_test(backwards)
    assert not report["pass"]
    assert report["violations"]


def test_laplace_needs_three_levels(small_sweep):
    sweep = SweepResult(lambda_grid=small_sweep.lambda_grid[:2],
                        survival=small_sweep.survival[:2],
                        survival_se=small_sweep.survival_se[:2],
                        laplace=small_sweep.laplace[:2],
                        laplace_se=small_sweep.laplace_se[:2],
                        crossing=None, threshold=0.25, horizon=4.0,
                        masses=small_sweep.masses[:2])
    with pytest.raises(ValueError, match="3 lambda"):
        laplace_monotonicity_test(sweep)


# -------------------------------------------------------------- lower bound


def test_bound_formula_asymptote():
    # exp(-lam^2 Lip^2/2) - exp(-c) at lam = Lip = 1, c = 2
    limit = np.exp(-0.5) - np.exp(-2.0)
    assert mass_lower_bound(1.0, 1.0, 1.0, 2.0, 1e9) == pytest.approx(
        limit, rel=1e-8)
    assert limit == pytest.approx(0.4711953761, rel=1e-9)


def test_bound_increases_toward_asymptote():
    ts = [1.5, 2.0, 5.0, 20.0, 100.0]
    vals = [mass_lower_bound(1.0, 1.0, 1.0, 2.0, t) for t in ts]
    assert np.all(np.diff(vals) > 0.0)
    assert vals[-1] < np.exp(-0.5) - np.exp(-2.0)


def test_bound_rejects_small_c():
    with pytest.raises(InvalidC):
        mass_lower_bound(1.0, 1.0, 1.0, 0.5, 10.0)
    with pytest.raises(InvalidC):
        lower_bound_check([], 1.0, 1.0, 0.5)


def test_lower_bound_holds_on_simulation():
    p = SimParams(noise_level=1.0, horizon=5.0, time_step=0.05,
                  box_policy=BoxPolicy(kind="adaptive"), replica_count=400,
                  rng_seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reps = simulate_campaign(p, MODEL1, threads=3)
    report = lower_bound_check(reps, 1.0, 1.0, 2.0)
    assert report["pass"]
    assert report["empirical"][-1] == 1.0      # every replica clears e^(-2t)
    assert np.all(report["bound"] < 0.5)


def test_lower_bound_input_validation(decay_campaign):
    with pytest.raises(EmptyInput):
        lower_bound_check([], 1.0, 1.0, 2.0)
    short = SimpleNamespace(times=np.array([0.0, 0.5]),
                            mass=np.array([1.0, 0.9]))
    with pytest.raises(ValueError, match="t > 1"):
        lower_bound_check([short], 1.0, 1.0, 2.0)


# -------------------------------------------------------------- local decay


def kernel_snapshot_stub(times, radius=40):
    tau = builtin_laplacian(1)
    snaps = []
    for t in times:
        k = transition_kernel(tau, t, radius)
        snaps.append((t, LatticeField(dimension=1, box_radius=radius,
                                      values=k.probabilities.copy())))
    return SimpleNamespace(snapshots=tuple(snaps))


def test_polynomial_decay_fails_every_candidate():
    # without noise u_t(0) = p_t(0) ~ t^(-1/2), far above e^(-t/c)
    stub = kernel_snapshot_stub([10.0, 30.0, 50.0])
    report = local_decay_check([stub], [1, 2, 4, 8, 16])
    assert report["status"] == "ok"
    assert not report["pass"]
    assert report["best_c"] is None
    assert not any(report["passes"].values())


def test_supercritical_run_satisfies_bound():
    p = SimParams(noise_level=8.0, horizon=10.0, time_step=0.0011297,
                  box_policy=BoxPolicy(kind="adaptive"), replica_count=50,
                  rng_seed=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reps = simulate_campaign(p, MODEL1, threads=3,
                                 snapshot_times=(5.0, 10.0))
    report = local_decay_check(reps, [1, 2, 4, 8])
    assert report["pass"]
    assert report["best_c"] == 1.0


def test_local_decay_no_data():
    assert local_decay_check([], [1, 2])["status"] == "no data"
    bare = SimpleNamespace(snapshots=())
    assert local_decay_check([bare], [1, 2])["status"] == "no data"
    stub = kernel_snapshot_stub([10.0])
    assert local_decay_check([stub], [])["status"] == "no data"


def test_local_decay_mismatched_times():
    a = kernel_snapshot_stub([10.0, 30.0])
    b = kernel_snapshot_stub([10.0, 40.0])
    with pytest.raises(ValueError, match="snapshot times"):
        local_decay_check([a, b], [1, 2])


# ------------------------------------------------------------------ plumbing


def test_norm_ratio_extremes():
    delta = LatticeField.delta(1, 5, 2.0)
    assert norm_ratio(delta) == 1.0
    flat = LatticeField(dimension=1, box_radius=1, values=np.full(3, 0.5))
    assert norm_ratio(flat) == pytest.approx(1.0 / np.sqrt(3.0), rel=1e-12)
    zero = LatticeField(dimension=1, box_radius=1, values=np.zeros(3))
    assert norm_ratio(zero) == 0.0


def test_sweep_csv_roundtrip(small_sweep, tmp_path):
    path = tmp_path / "sweep.csv"
    export_sweep_csv(small_sweep, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lambda", "survival", "survivalSE", "laplace",
                       "laplaceSE"]
    assert len(rows) == 1 + small_sweep.lambda_grid.size
    got = np.array([[float(v) for v in row] for row in rows[1:]])
    assert np.array_equal(got[:, 0], small_sweep.lambda_grid)
    assert np.array_equal(got[:, 1], small_sweep.survival)
    assert np.array_equal(got[:, 3], small_sweep.laplace)
