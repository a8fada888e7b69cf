"""Euler--Maruyama solver for du(x) = (Gu)(x) dt + lam*sigma(u(x)) dB(x).

The state starts from c_0 at the origin and is stepped on a truncated box
with explicit Euler--Maruyama plus max(0, .) clamping; the true solution
is positive, so clamping is the minimal positivity fix and the clamp count
quantifies its bias.  The total mass m_t is a mean-c_0 martingale and the
solver records it on a geometric time grid together with the running
quadratic-variation estimate lam^2 * sum_y sigma(u_s(y))^2 * dt.

Replicas are independent: each one derives its noise from (seed, replicaId)
through counter-based hashing, so campaigns can run on any number of
threads and still produce byte-identical output in replicaId order.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _stepper
from .model import (LatticeField, Nonlinearity, SimParams, StepDistribution,
                    _shifted, horizon_box_radius)
from .rng import normal_icdf, replica_key, site_normal

# boundary-shell mass above this fraction of total mass flags truncation bias
OVERFLOW_WARN_LEVEL = 1e-6


class BoxOverflowWarning(UserWarning):
    """Mass near the box boundary is large enough to bias the run."""


class NumericalBlowup(RuntimeError):
    """A replica produced a non-finite state; its output is unusable."""


class InsufficientReplicas(ValueError):
    """Too few replicas for the requested statistical check."""


@dataclass(frozen=True)
class MassTrajectory:
    """Recorded total-mass path of one replica.

    times[0] = 0 with mass c_0 and qv 0; later entries sit on the geometric
    sample grid, snapped to whole steps.  clamp_count is the total number
    of site-steps where positivity clamping fired.  A replica whose mass
    fell below the extinction cutoff is frozen at its last value from
    frozen_at onward (the mass martingale cannot recover from there).
    """

    times: np.ndarray
    mass: np.ndarray
    qv: np.ndarray
    clamp_count: int
    replica_id: int
    seed: int
    box_radius_final: int
    frozen_at: float | None = None
    snapshots: tuple = ()          # (time, LatticeField) pairs, if requested


def suggest_time_step(noise_level: float, lip: float = 1.0,
                      clamp_target: float = 1e-4, cap: float = 0.1) -> float:
    """Largest dt that keeps the clamp rate per site-step near clamp_target.

    A site clamps when u(1 + lam*Lip*sqrt(dt)*Z) dips below 0, i.e. with
    probability about Phi(-1/(lam*Lip*sqrt(dt))); solving for dt at the
    target rate gives the step.  Calibration runs confirm the estimate.
    """
    if noise_level <= 0.0:
        return cap
    z = -float(normal_icdf(clamp_target))
    return min(cap, (1.0 / (z * noise_level * lip)) ** 2)


def sample_time_grid(horizon: float, dt: float, per_decade: int = 60) -> np.ndarray:
    """Step indices of the geometric sample grid t_i = T*r^(M-i).

    Spans [max(dt, T/1000), T] with per_decade points per decade, snapped
    to whole steps and deduplicated; the final step is always included.
    t = 0 is not in the returned indices (callers prepend it)."""
    n_steps = int(round(horizon / dt))
    t_min = max(dt, horizon * 1e-3)
    ratio = 10.0 ** (1.0 / per_decade)
    steps = {n_steps}
    t = horizon
    while t >= t_min * (1.0 - 1e-12):
        k = int(round(t / dt))
        if 1 <= k <= n_steps:
            steps.add(k)
        t /= ratio
    return np.array(sorted(steps), dtype=np.int64)


def _site_counters(box_radius: int, dimension: int, key_radius: int) -> np.ndarray:
    """Flat noise-counter for every site of a box, in the keying layout.

    The keying layout is the (possibly larger) box of radius key_radius in
    which the compiled kernel enumerates sites; using it here makes the
    reference step reproduce the kernel's noise stream exactly."""
    if key_radius < box_radius:
        raise ValueError("key_radius must cover the field box")
    side = 2 * box_radius + 1
    kside = 2 * key_radius + 1
    shift = key_radius - box_radius
    counters = np.zeros((side,) * dimension, dtype=np.uint64)
    for j in range(dimension):
        stride = kside ** (dimension - 1 - j)
        ax = (np.arange(side, dtype=np.uint64) + np.uint64(shift)) * np.uint64(stride)
        counters += ax.reshape((side,) + (1,) * (dimension - 1 - j))
    return counters


def step_euler_maruyama(field_in: LatticeField, tau: StepDistribution,
                        sigma: Nonlinearity, noise_level: float, dt: float,
                        key: int, key_radius: int | None = None):
    """One explicit Euler--Maruyama step with positivity clamping.

    u'(x) = max(0, u(x) + (Gu)(x) dt + lam*sigma(u(x))*sqrt(dt)*Z_x) with
    independent standard normals Z_x drawn per site from ``key``.  Returns
    (updated field, clamp count).  This is the readable reference for the
    compiled replica loop and mirrors its arithmetic order.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = field_in.values
    drift = -a
    for off, w in zip(tau.sites, tau.probabilities):
        drift = drift + w * _shifted(a, off)
    nv = a + drift * dt
    clamps = 0
    if noise_level > 0.0:
        kr = field_in.box_radius if key_radius is None else key_radius
        counters = _site_counters(field_in.box_radius, field_in.dimension, kr)
        z = np.array([site_normal(key, int(c)) for c in counters.ravel()])
        z = z.reshape(a.shape)
        nv = nv + np.where(a > 0.0, noise_level * sigma(a) * np.sqrt(dt) * z, 0.0)
    clamps = int(np.count_nonzero(nv < 0.0))
    out = LatticeField(dimension=field_in.dimension,
                       box_radius=field_in.box_radius,
                       values=np.maximum(nv, 0.0))
    return out, clamps


def _prepare(tau: StepDistribution, sigma: Nonlinearity, params: SimParams,
             snapshot_times=()):
    """Precompute everything the compiled kernel needs (shared by replicas)."""
    d = tau.dimension
    r0 = tau.range_
    dt = params.time_step
    n_steps = int(round(params.horizon / dt))
    policy = params.box_policy

    grow_mode = {"fixed": _stepper.FIXED, "scheduled": _stepper.SCHEDULED,
                 "adaptive": _stepper.ADAPTIVE}[policy.kind]
    horizon_k = horizon_box_radius(tau, params.horizon)
    sched_steps = np.empty(0, dtype=np.int64)
    sched_radii = np.empty(0, dtype=np.int64)
    if grow_mode == _stepper.FIXED:
        k_max = policy.radius if policy.radius is not None else horizon_k
        k_start = k_max
    elif grow_mode == _stepper.SCHEDULED:
        # radius along the horizon formula at each step time
        var1 = float(np.max(tau.coordinate_variances()))
        t_arr = np.arange(n_steps, dtype=np.float64) * dt
        ks = (np.ceil(4.0 * r0 * np.sqrt(var1 * t_arr)) + 8).astype(np.int64)
        k_start = int(ks[0])
        k_max = int(ks[-1])
        jumps = np.nonzero(np.diff(ks))[0] + 1
        sched_steps = jumps.astype(np.int64)
        sched_radii = ks[jumps]
    else:
        k_max = policy.radius if policy.radius is not None else horizon_k
        k_start = min(k_max, max(6, 4 * r0))
    if k_max < 1:
        raise ValueError("box radius must be at least 1")

    k_arr = k_max + r0
    side = 2 * k_arr + 1
    size = side ** d
    if size > 1 << 28:
        raise ValueError(f"box with {size} sites is too large to allocate")
    strides = np.array([side ** (d - 1 - j) for j in range(d)], dtype=np.int64)
    off_lin = tau.sites.astype(np.int64) @ strides
    off_w = tau.probabilities.astype(np.float64)

    if sigma.kind == "linear":
        sig_kind = _stepper.SIGMA_LINEAR
        sig_slope = sigma.slope
        sig_grid = np.empty(0)
        sig_vals = np.empty(0)
        sig_end = 0.0
    else:
        sig_kind = _stepper.SIGMA_TABULATED
        sig_grid, sig_vals = sigma.table
        sig_slope = 0.0
        sig_end = float((sig_vals[-1] - sig_vals[-2]) / (sig_grid[-1] - sig_grid[-2]))

    samples = sample_time_grid(params.horizon, dt, params.samples_per_decade)
    snaps = sorted({min(n_steps, max(1, int(round(t / dt)))) for t in snapshot_times})
    snap_steps = np.array(snaps, dtype=np.int64)

    return {
        "dim": d, "r0": r0, "dt": dt, "n_steps": n_steps,
        "k_arr": k_arr, "k_start": k_start, "k_max": k_max,
        "grow_mode": grow_mode, "sched_steps": sched_steps,
        "sched_radii": sched_radii, "trigger": policy.trigger,
        "strides": strides, "off_lin": off_lin, "off_w": off_w,
        "sig": (sig_kind, sig_slope, sig_grid, sig_vals, sig_end),
        "size": size, "shape": (side,) * d,
        "origin": int(np.sum((k_arr) * strides)),
        "samples": samples, "snap_steps": snap_steps,
        "cutoff": params.extinction_cutoff * params.initial_mass,
    }


def _run_one(plan: dict, params: SimParams, replica_id: int) -> MassTrajectory:
    u = np.zeros(plan["size"])
    v = np.zeros(plan["size"])
    u[plan["origin"]] = params.initial_mass
    n_samp = plan["samples"].size
    n_snap = plan["snap_steps"].size
    mass_out = np.empty(n_samp)
    qv_out = np.empty(n_samp)
    snap_out = np.empty((n_snap, plan["size"]))
    sig_kind, sig_slope, sig_grid, sig_vals, sig_end = plan["sig"]
    rkey = np.uint64(replica_key(params.rng_seed, replica_id))

    status, abort_step, clamps, k_fin, warn_step, frozen_step = _stepper.run_replica(
        u, v, plan["dim"], plan["k_arr"], plan["strides"],
        plan["off_lin"], plan["off_w"], plan["r0"],
        sig_kind, sig_slope, sig_grid, sig_vals, sig_end,
        params.noise_level, plan["dt"], plan["n_steps"], rkey,
        0, plan["k_start"], plan["k_max"],
        plan["grow_mode"], plan["sched_steps"], plan["sched_radii"],
        plan["trigger"], OVERFLOW_WARN_LEVEL, plan["cutoff"],
        plan["samples"], mass_out, qv_out, plan["snap_steps"], snap_out)

    dt = plan["dt"]
    if status == _stepper.NAN_ABORT:
        raise NumericalBlowup(
            f"replica {replica_id}: non-finite mass after step {abort_step}"
            f" (t = {abort_step * dt:.6g})")
    if warn_step >= 0:
        warnings.warn(
            f"replica {replica_id}: boundary shell held >"
            f" {OVERFLOW_WARN_LEVEL:g} of total mass from t ="
            f" {warn_step * dt:.6g}; results may carry truncation bias",
            BoxOverflowWarning, stacklevel=3)

    times = np.concatenate(([0.0], plan["samples"] * dt))
    mass = np.concatenate(([params.initial_mass], mass_out))
    qv = np.concatenate(([0.0], qv_out))
    snapshots = tuple(
        (float(step * dt),
         LatticeField(dimension=plan["dim"], box_radius=plan["k_arr"],
                      values=snap_out[i].reshape(plan["shape"]).copy()))
        for i, step in enumerate(plan["snap_steps"]))
    return MassTrajectory(
        times=times, mass=mass, qv=qv, clamp_count=int(clamps),
        replica_id=replica_id, seed=params.rng_seed,
        box_radius_final=int(k_fin),
        frozen_at=float(frozen_step * dt) if frozen_step >= 0 else None,
        snapshots=snapshots)


def simulate_path(params: SimParams, model, replica_id: int = 0,
                  snapshot_times=()) -> MassTrajectory:
    """Simulate one replica from u_0 = c_0*delta_0 up to the horizon.

    Args:
        params: SimParams controlling dt, horizon, box policy, seed.
        model: (StepDistribution, Nonlinearity) pair as from load_model.
        replica_id: index used to derive this replica's noise stream.
        snapshot_times: times (snapped to steps) at which to keep the full
            field; needed by mean_field_check and local-decay reports.

    Raises NumericalBlowup on non-finite state and emits BoxOverflowWarning
    when boundary mass exceeds the truncation-bias threshold.
    """
    tau, sigma = model
    plan = _prepare(tau, sigma, params, snapshot_times)
    return _run_one(plan, params, replica_id)


def simulate_campaign(params: SimParams, model, threads: int = 1,
                      snapshot_times=()) -> list:
    """Run params.replica_count independent replicas.

    Replica i draws its noise from (rng_seed, i) alone, and results come
    back ordered by replica id, so the output is identical for any thread
    count."""
    tau, sigma = model
    plan = _prepare(tau, sigma, params, snapshot_times)
    ids = range(params.replica_count)
    if threads <= 1:
        return [_run_one(plan, params, r) for r in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: _run_one(plan, params, r), ids))


def mean_field_check(replicas, tau: StepDistribution, t: float,
                     c0: float, time_step: float = 0.0) -> dict:
    """Compare the site-wise mean field at time t against c_0 * p_t(-x).

    The stochastic integral in the mild formulation has mean zero, so the
    sample mean of u_t(x) over replicas should match the heat flow.  Uses
    the snapshot nearest t (at its exact recorded time) and reports the
    largest standardized deviation over sites.  Sites with zero sample
    variance (deterministic runs) are compared directly, with an allowance
    of 2*c0*t*time_step for the first-order Euler bias when the caller
    passes the dt used.

    Raises InsufficientReplicas when fewer than 100 replicas are given.
    """
    from .kernel import transition_kernel

    if len(replicas) < 100:
        raise InsufficientReplicas(
            f"mean-field check needs >= 100 replicas, got {len(replicas)}")
    picks = []
    for tr in replicas:
        if not tr.snapshots:
            raise ValueError("replicas carry no field snapshots")
        ts, f = min(tr.snapshots, key=lambda p: abs(p[0] - t))
        picks.append((ts, f))
    t_used = picks[0][0]
    if abs(t_used - t) > 0.1 * max(t, 1.0):
        raise ValueError(f"no snapshot near t = {t:g} (closest {t_used:g})")
    if any(abs(ts - t_used) > 1e-12 for ts, _ in picks):
        raise ValueError("replicas disagree on snapshot times")

    stack = np.stack([f.values for _, f in picks])
    n = stack.shape[0]
    mean = stack.mean(axis=0)
    se = stack.std(axis=0, ddof=1) / np.sqrt(n)

    kern = transition_kernel(tau, t_used, picks[0][1].box_radius)
    rev = (slice(None, None, -1),) * tau.dimension
    expected = c0 * kern.probabilities[rev]

    # deviations inside the declared numerical budget (series truncation,
    # first-order Euler bias, box-boundary absorption) are not standardized:
    # near the boundary the sample variance is tiny while the absorbing
    # truncation biases the mean, which would produce huge but meaningless
    # z-scores.  se below O(ulp) of the mean counts as deterministic.
    atol = c0 * (kern.truncation_error + 1e-12 + 2.0 * t_used * time_step)
    dev = mean - expected
    noisy = se > 1e-12 * np.abs(mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(dev) <= atol, 0.0,
                     np.where(noisy, dev / se, np.inf))
    flat = int(np.argmax(np.abs(z)))
    site = tuple(int(i) - picks[0][1].box_radius
                 for i in np.unravel_index(flat, z.shape))
    return {
        "n": n,
        "time": float(t_used),
        "max_abs_z": float(np.max(np.abs(z))),
        "max_site": site,
        "sites": int(z.size),
    }


def export_trajectories_csv(trajectories, path) -> None:
    """Write trajectories as CSV with columns replicaId,t,mass,qv."""
    lines = ["replicaId,t,mass,qv"]
    for tr in trajectories:
        for t, m, q in zip(tr.times, tr.mass, tr.qv):
            lines.append(f"{tr.replica_id},{float(t)!r},{float(m)!r},{float(q)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
