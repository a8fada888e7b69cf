"""Statistical post-processing for mass trajectories.

Fractional moments with jackknife errors, decay-law fits, the explicit
survival lower bound, phase-transition sweeps with a coupled-seed design,
Laplace-functional monotonicity, local-decay checks, and a deterministic
second-moment oracle for the linear-noise case.
"""

from dataclasses import dataclass

import numpy as np

from .model import SimParams, BoxPolicy, horizon_box_radius
from .sde import simulate_campaign, suggest_time_step


class EmptyInput(ValueError):
    """No trajectories (or no usable time points) were supplied."""


class NonPositiveEstimates(ValueError):
    """A log-scale fit was requested on estimates that are not positive."""


class BoxTooSmall(ValueError):
    """The requested box cannot hold the mass up to the requested time."""


class InvalidC(ValueError):
    """The decay parameter violates c > lam^2 Lip^2 / 2."""


@dataclass(frozen=True)
class MomentSeries:
    """Estimated fractional moments E[m_t^eta] on a time grid."""

    eta: float
    times: np.ndarray
    estimates: np.ndarray
    standard_errors: np.ndarray


@dataclass(frozen=True)
class SweepResult:
    """Survival and Laplace-functional curves over a noise-level grid.

    Replica i shares its noise stream across every lambda (coupled seeds),
    so per-replica differences between grid points are paired; ``masses``
    keeps the full (lambda, replica) matrix of final masses for that.
    """

    lambda_grid: np.ndarray
    survival: np.ndarray
    survival_se: np.ndarray
    laplace: np.ndarray
    laplace_se: np.ndarray
    crossing: float | None
    threshold: float
    horizon: float
    masses: np.ndarray


def _jackknife_se(values: np.ndarray) -> float:
    """Leave-one-out standard error of the sample mean."""
    n = values.size
    if n < 2:
        return 0.0
    total = values.sum()
    leave_out = (total - values) / (n - 1)
    center = leave_out.mean()
    return float(np.sqrt((n - 1) / n * np.sum((leave_out - center) ** 2)))


def norm_ratio(field) -> float:
    """Diagnostic ratio ||u||_2 / ||u||_1 (1 iff a single site carries all mass)."""
    v = field.values
    l1 = float(np.sum(np.abs(v)))
    if l1 == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(v * v)) / l1)


def fractional_moment(trajectories, eta: float = 0.5,
                      t_grid=None) -> MomentSeries:
    """Estimate E[m_t^eta] over replicas with jackknife standard errors.

    All trajectories must share the sample-time grid; t_grid selects a
    subset of it (nearest recorded times are used).  eta must lie in
    (0, 1]; eta = 1 reproduces the plain sample mean.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if len(trajectories) == 0:
        raise EmptyInput("no trajectories")
    times = trajectories[0].times
    for tr in trajectories[1:]:
        if tr.times.size != times.size or not np.allclose(
                tr.times, times, rtol=0.0, atol=1e-12):
            raise ValueError("trajectories disagree on sample times")
    if t_grid is None:
        idx = np.arange(times.size)
    else:
        wanted = np.atleast_1d(np.asarray(t_grid, dtype=np.float64))
        if wanted.size == 0:
            raise EmptyInput("empty time grid")
        idx = np.unique([int(np.argmin(np.abs(times - t))) for t in wanted])
    powers = np.stack([tr.mass[idx] ** eta for tr in trajectories])
    est = powers.mean(axis=0)
    se = np.array([_jackknife_se(powers[:, j]) for j in range(idx.size)])
    return MomentSeries(eta=eta, times=times[idx], estimates=est,
                        standard_errors=se)


def fit_decay(series: MomentSeries, law: str) -> dict:
    """Least-squares fit of log-estimates against the decay regressor.

    law "d1" regresses on t^(1/3), law "d2" on sqrt(log t); the fitted
    slope is -rate.  Needs at least 10 points with t >= 1.  Returns the
    rate with its standard error and 95% confidence interval.
    """
    if law not in ("d1", "d2"):
        raise ValueError(f"law must be 'd1' or 'd2', got {law!r}")
    keep = series.times >= 1.0
    t = series.times[keep]
    y = series.estimates[keep]
    if t.size < 10:
        raise ValueError(f"need >= 10 points with t >= 1, got {t.size}")
    if np.any(y <= 0.0):
        raise NonPositiveEstimates("estimates must be positive to fit logs")
    x = np.cbrt(t) if law == "d1" else np.sqrt(np.log(t))
    logy = np.log(y)
    slope, intercept = np.polyfit(x, logy, 1)
    resid = logy - (slope * x + intercept)
    dof = t.size - 2
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = float(np.sqrt(np.sum(resid ** 2) / dof / sxx)) if dof > 0 else 0.0
    rate = -float(slope)
    return {
        "law": law,
        "rate": rate,
        "intercept": float(intercept),
        "se": se,
        "ci": (rate - 1.96 * se, rate + 1.96 * se),
        "n_points": int(t.size),
    }


def _box_generator(tau, box_radius: int) -> np.ndarray:
    """Dense generator matrix of the walk on the box, absorbing outside."""
    d = tau.dimension
    side = 2 * box_radius + 1
    coords = np.stack(np.meshgrid(*[np.arange(-box_radius, box_radius + 1)] * d,
                                  indexing="ij"), axis=-1).reshape(-1, d)
    index = {tuple(c): i for i, c in enumerate(coords)}
    n = coords.shape[0]
    gen = -np.eye(n)
    for off, w in zip(tau.sites, tau.probabilities):
        for i, c in enumerate(coords):
            dest = tuple(c + off)
            j = index.get(dest)
            if j is not None:
                gen[j, i] += w
    return gen


def pam_second_moment_oracle(tau, noise_level: float, c0: float,
                             box_radius: int, t: float,
                             time_step: float = 1e-4) -> float:
    """E[m_t^2] for identity noise, from the closed two-point ODE.

    For sigma(u) = u the two-point function M_t(x, y) = E[u_t(x) u_t(y)]
    solves dM/dt = G M + M G^T + lam^2 diag(M) exactly; this integrates it
    with classical RK4 on the box and sums the result.  Independent of the
    stochastic solver, so it serves as an acceptance oracle.

    Cost is O((2K+1)^(2d)) memory, so keep the box modest above d = 1.
    Raises BoxTooSmall when the box cannot hold the heat flow up to t.
    """
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    if t == 0.0:
        return c0 * c0
    if box_radius < horizon_box_radius(tau, t):
        raise BoxTooSmall(
            f"box radius {box_radius} < {horizon_box_radius(tau, t)} "
            f"needed for t = {t:g}")
    gen = _box_generator(tau, box_radius)
    n = gen.shape[0]
    origin = (n - 1) // 2
    m = np.zeros((n, n))
    m[origin, origin] = c0 * c0
    lam2 = noise_level * noise_level

    def rhs(mat):
        out = gen @ mat + mat @ gen.T
        out[np.diag_indices(n)] += lam2 * np.diag(mat)
        return out

    n_steps = int(round(t / time_step))
    h = t / n_steps
    for _ in range(n_steps):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * h * k1)
        k3 = rhs(m + 0.5 * h * k2)
        k4 = rhs(m + h * k3)
        m = m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return float(m.sum())


def survival_sweep(model, lambda_grid, horizon: float,
                   threshold: float | None = None, replicas: int = 200,
                   seed: int = 0, initial_mass: float = 1.0,
                   box_policy: BoxPolicy | None = None,
                   time_step: float | None = None,
                   threads: int = 1) -> SweepResult:
    """Survival and Laplace curves over a grid of noise levels.

    Replica i reuses the stream (seed, i) at every lambda, which couples
    the columns and makes between-lambda comparisons paired.  Each lambda
    gets its own stable time step from suggest_time_step unless one is
    forced.  threshold defaults to initial_mass / 4; survival is the
    fraction of replicas with m_T above it.

    The crossing estimate interpolates the lambda where survival passes
    1/2, linearly on the logit scale between the bracketing grid points
    (with a 1/(2N) continuity correction); None if the curve never
    crosses.
    """
    tau, sigma = model
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if grid.size < 1 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("lambda grid must be strictly increasing")
    if threshold is None:
        threshold = initial_mass / 4.0
    if not 0.0 < threshold < initial_mass:
        raise ValueError("threshold must lie in (0, initial_mass)")
    policy = box_policy if box_policy is not None else BoxPolicy(kind="adaptive")

    masses = np.empty((grid.size, replicas))
    for i, lam in enumerate(grid):
        dt = time_step if time_step is not None else suggest_time_step(
            float(lam), lip=sigma.lip)
        params = SimParams(noise_level=float(lam), initial_mass=initial_mass,
                           time_step=dt, horizon=horizon, box_policy=policy,
                           replica_count=replicas, rng_seed=seed)
        runs = simulate_campaign(params, model, threads=threads)
        masses[i] = [tr.mass[-1] for tr in runs]

    survival = (masses > threshold).mean(axis=1)
    survival_se = np.sqrt(survival * (1.0 - survival) / replicas)
    laplace_samples = np.exp(-masses)
    laplace = laplace_samples.mean(axis=1)
    laplace_se = laplace_samples.std(axis=1, ddof=1) / np.sqrt(replicas)

    crossing = None
    clipped = np.clip(survival, 0.5 / replicas, 1.0 - 0.5 / replicas)
    logit = np.log(clipped / (1.0 - clipped))
    for i in range(grid.size - 1):
        if survival[i] >= 0.5 > survival[i + 1]:
            frac = logit[i] / (logit[i] - logit[i + 1])
            crossing = float(grid[i] + frac * (grid[i + 1] - grid[i]))
            break

    return SweepResult(lambda_grid=grid, survival=survival,
                       survival_se=survival_se, laplace=laplace,
                       laplace_se=laplace_se, crossing=crossing,
                       threshold=threshold, horizon=horizon, masses=masses)


def laplace_monotonicity_test(sweep: SweepResult) -> dict:
    """Check that E[exp(-m_T)] is nondecreasing in the noise level.

    Uses the paired per-replica differences between consecutive grid
    points; a decrease larger than 3 paired standard errors counts as a
    violation.
    """
    if sweep.lambda_grid.size < 3:
        raise ValueError("need at least 3 lambda values")
    lap = np.exp(-sweep.masses)
    pairs = []
    for i in range(sweep.lambda_grid.size - 1):
        diff = lap[i + 1] - lap[i]
        mean = float(diff.mean())
        se = float(diff.std(ddof=1) / np.sqrt(diff.size))
        z = mean / se if se > 0.0 else (0.0 if mean == 0.0 else np.inf)
        pairs.append({
            "lambda_low": float(sweep.lambda_grid[i]),
            "lambda_high": float(sweep.lambda_grid[i + 1]),
            "delta": mean,
            "se": se,
            "z": float(z),
        })
    violations = [p for p in pairs if p["z"] < -3.0]
    return {"pairs": pairs, "violations": violations,
            "pass": len(violations) == 0}


def mass_lower_bound(c0: float, noise_level: float, lip: float,
                     c: float, t: float) -> float:
    """Explicit lower bound for P{m_t >= exp(-c t)}.

    Valid for t > 1 and c > lam^2 Lip^2 / 2; as t grows the bound tends
    to exp(-lam^2 Lip^2 / 2) - exp(-c).
    """
    half = 0.5 * noise_level * noise_level * lip * lip
    if c <= half:
        raise InvalidC(f"need c > lam^2 Lip^2 / 2 = {half:g}, got {c:g}")
    if t <= 1.0:
        raise ValueError("the bound applies for t > 1")
    base = np.exp(-half) - np.exp(-c)
    return float(c0 ** (1.0 / (1.0 - t)) * base ** (t / (t - 1.0)))


def lower_bound_check(trajectories, noise_level: float, lip: float,
                      c: float) -> dict:
    """Empirical P{m_t >= exp(-c t)} against the explicit lower bound.

    Evaluates every shared sample time with t > 1 and reports the margin
    in binomial standard errors; passes when no time undershoots the
    bound by more than 3 SE.
    """
    half = 0.5 * noise_level * noise_level * lip * lip
    if c <= half:
        raise InvalidC(f"need c > lam^2 Lip^2 / 2 = {half:g}, got {c:g}")
    if len(trajectories) == 0:
        raise EmptyInput("no trajectories")
    times = trajectories[0].times
    c0 = float(trajectories[0].mass[0])
    keep = times > 1.0
    t_sel = times[keep]
    if t_sel.size == 0:
        raise ValueError("no sample times with t > 1")
    stack = np.stack([tr.mass[keep] for tr in trajectories])
    n = stack.shape[0]
    level = np.exp(-c * t_sel)
    empirical = (stack >= level).mean(axis=0)
    se = np.sqrt(np.clip(empirical * (1.0 - empirical), 0.0, None) / n)
    bound = np.array([mass_lower_bound(c0, noise_level, lip, c, t)
                      for t in t_sel])
    floor = np.maximum(se, 0.5 / n)           # one-replica resolution floor
    margin_z = (empirical - bound) / floor
    return {
        "times": t_sel,
        "bound": bound,
        "empirical": empirical,
        "se": se,
        "margin_z": margin_z,
        "pass": bool(np.all(margin_z >= -3.0)),
    }


def local_decay_check(replicas, c_grid) -> dict:
    """Test sup_x P{u_t(x) > exp(-t/c)} <= c exp(-t/c) on snapshot times.

    Scans the candidate grid and reports the smallest c for which the
    inequality holds at every snapshot time; best_c None (pass False)
    means no candidate works, which is the expected verdict for runs
    without noise where the field decays only polynomially.
    """
    cs = sorted(float(c) for c in c_grid)
    if len(replicas) == 0 or len(cs) == 0 or not replicas[0].snapshots:
        return {"status": "no data"}
    times = [t for t, _ in replicas[0].snapshots]
    for tr in replicas[1:]:
        if [t for t, _ in tr.snapshots] != times:
            raise ValueError("replicas disagree on snapshot times")
    stacks = [np.stack([tr.snapshots[i][1].values for tr in replicas])
              for i in range(len(times))]
    sup_exceed = {}
    passes = {}
    for c in cs:
        sups = []
        for t, stack in zip(times, stacks):
            level = np.exp(-t / c)
            sups.append(float((stack > level).mean(axis=0).max()))
        sup_exceed[c] = sups
        passes[c] = all(s <= c * np.exp(-t / c)
                        for s, t in zip(sups, times))
    best = next((c for c in cs if passes[c]), None)
    return {
        "status": "ok",
        "times": times,
        "c_grid": cs,
        "passes": passes,
        "sup_exceedance": sup_exceed,
        "best_c": best,
        "pass": best is not None,
    }


def export_sweep_csv(sweep: SweepResult, path) -> None:
    """Write the sweep curves as CSV: lambda, survival, laplace, SEs."""
    lines = ["lambda,survival,survivalSE,laplace,laplaceSE"]
    for i in range(sweep.lambda_grid.size):
        lines.append(",".join(repr(float(v)) for v in (
            sweep.lambda_grid[i], sweep.survival[i], sweep.survival_se[i],
            sweep.laplace[i], sweep.laplace_se[i])))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
