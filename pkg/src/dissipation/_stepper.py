"""Compiled inner loop for the lattice solver.

The field lives in one flat float64 array sized for the largest box the
run can ever reach (radius K_max + R_0, so generator reads always land
inside the array).  Growing the active box only widens the loop bounds;
the flat index of a site never changes, and that index is the per-site
noise counter, so a replica's noise stream is identical no matter how or
when the box grows.  Two buffers alternate as state and scratch: sites
outside the written region are zero in both, and the written region never
shrinks, so stale values cannot leak back in after a swap.

The kernel is dimension-generic.  Sites are visited row by row: the outer
coordinates are decoded once per row and the innermost axis is contiguous,
which keeps the decode cost off the hot path.
"""

import numpy as np
from numba import njit

from .rng import U64, site_normal_jit, step_key_jit

# run_replica status codes
OK = 0
NAN_ABORT = 1

# box growth modes (mirrors BoxPolicy.kind)
FIXED = 0
SCHEDULED = 1
ADAPTIVE = 2

SIGMA_LINEAR = 0
SIGMA_TABULATED = 1


# sigma is evaluated inline in the site loop: a helper call with array
# arguments costs about 2x the whole update, so the two kinds are branched
# on directly (the branch is loop-invariant and predicted perfectly).


@njit(cache=True, nogil=True)
def run_replica(
    u, v,                      # flat state and scratch, both zero outside u's support
    dim, k_arr,                # dimension, array radius (K_max + R_0)
    strides,                   # (dim,) int64 strides of the flat layout
    off_lin, off_w,            # jump offsets (flat-index deltas) and their rates
    r0,                        # sup-norm range of the jump law
    sig_kind, sig_slope, sig_grid, sig_vals, sig_end_slope,
    lam, dt, n_steps,
    rkey,                      # uint64 replica key
    a_start, k_start, k_max,   # support radius, active radius, growth cap
    grow_mode,                 # FIXED / SCHEDULED / ADAPTIVE
    sched_steps, sched_radii,  # scheduled growth points (step index, new radius)
    trigger, warn_level,       # adaptive growth trigger, overflow warn threshold
    cutoff,                    # absolute mass level below which the replica freezes
    sample_steps,              # strictly increasing step indices, last == n_steps
    mass_out, qv_out,          # per-sample outputs
    snap_steps, snap_out,      # snapshot step indices and (n_snap, u.size) storage
):
    """Run one replica for n_steps; returns
    (status, abort_step, clamp_total, k_final, warn_step, frozen_step)."""
    sqrt_dt = np.sqrt(dt)
    lam2dt = lam * lam * dt
    use_noise = lam > 0.0

    a_cur = a_start
    k_cur = k_start
    mass = 0.0
    for i in range(u.size):
        mass += u[i]

    qv_run = 0.0
    clamp_total = 0
    warn_step = np.int64(-1)
    frozen_step = np.int64(-1)
    status = OK
    abort_step = np.int64(-1)
    samp_i = 0
    snap_i = 0
    sched_i = 0

    for s in range(n_steps):
        if grow_mode == SCHEDULED:
            while sched_i < sched_steps.size and sched_steps[sched_i] == s:
                k_cur = sched_radii[sched_i]
                sched_i += 1
        skey = step_key_jit(rkey, s)

        a_up = a_cur + r0
        if a_up > k_cur:
            a_up = k_cur
        side = 2 * a_up + 1
        rows = 1
        for j in range(dim - 1):
            rows *= side

        new_mass = 0.0
        shell_mass = 0.0
        qv_step = 0.0
        a_new = a_cur
        shell_lo = k_cur - r0

        for r in range(rows):
            rem = r
            base = k_arr - a_up        # innermost axis starts at x = -a_up
            outer_max = 0
            for j in range(dim - 1):
                c = rem % side - a_up
                rem //= side
                base += (c + k_arr) * strides[dim - 2 - j]
                ac = -c if c < 0 else c
                if ac > outer_max:
                    outer_max = ac
            idx = base
            for i in range(side):
                a = u[idx]
                drift = -a
                for k in range(off_lin.size):
                    drift += off_w[k] * u[idx + off_lin[k]]
                nv = a + drift * dt
                if use_noise and a > 0.0:
                    if sig_kind == SIGMA_LINEAR:
                        sig = sig_slope * a
                    else:
                        # piecewise-linear table on a >= 0: mirror the
                        # Nonlinearity evaluator bit for bit
                        n = sig_grid.size
                        if a > sig_grid[n - 1]:
                            sig = sig_vals[n - 1] + sig_end_slope * (a - sig_grid[n - 1])
                        else:
                            lo = 0
                            hi = n - 1
                            while hi - lo > 1:
                                mid = (lo + hi) >> 1
                                if sig_grid[mid] <= a:
                                    lo = mid
                                else:
                                    hi = mid
                            sl = (sig_vals[lo + 1] - sig_vals[lo]) / (sig_grid[lo + 1] - sig_grid[lo])
                            sig = sl * (a - sig_grid[lo]) + sig_vals[lo]
                    qv_step += sig * sig
                    z = site_normal_jit(skey, U64(idx))
                    nv = nv + lam * sig * sqrt_dt * z
                if nv < 0.0:
                    nv = 0.0
                    clamp_total += 1
                if nv > 0.0:
                    v[idx] = nv
                    new_mass += nv
                    m = i - a_up
                    if m < 0:
                        m = -m
                    if outer_max > m:
                        m = outer_max
                    if m > a_new:
                        a_new = m
                    if m > shell_lo:
                        shell_mass += nv
                else:
                    v[idx] = 0.0
                idx += 1

        tmp = u
        u = v
        v = tmp
        mass = new_mass
        qv_run += lam2dt * qv_step
        t_step = s + 1

        if not np.isfinite(mass):
            status = NAN_ABORT
            abort_step = np.int64(t_step)
            break
        if a_new > a_cur:
            a_cur = a_new

        grew = False
        if (grow_mode == ADAPTIVE and k_cur < k_max
                and shell_mass > trigger * mass):
            g = 4 * r0
            if k_cur // 2 > g:
                g = k_cur // 2
            k_cur = k_cur + g
            if k_cur > k_max:
                k_cur = k_max
            grew = True
        if (not grew and warn_step < 0 and mass > 0.0
                and shell_mass > warn_level * mass):
            warn_step = np.int64(t_step)

        while samp_i < sample_steps.size and sample_steps[samp_i] == t_step:
            mass_out[samp_i] = mass
            qv_out[samp_i] = qv_run
            samp_i += 1
        while snap_i < snap_steps.size and snap_steps[snap_i] == t_step:
            for i in range(u.size):
                snap_out[snap_i, i] = u[i]
            snap_i += 1

        if mass <= cutoff:
            frozen_step = np.int64(t_step)
            break

    # a frozen (or aborted) replica keeps its last recorded values
    while samp_i < sample_steps.size:
        mass_out[samp_i] = mass
        qv_out[samp_i] = qv_run
        samp_i += 1
    while snap_i < snap_steps.size:
        for i in range(u.size):
            snap_out[snap_i, i] = u[i]
        snap_i += 1

    return status, abort_step, clamp_total, k_cur, warn_step, frozen_step
