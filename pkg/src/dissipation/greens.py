"""Transient-walk constants: collision local time and derived bounds.

Upsilon(0), the expected collision local time of two independent walks, is
the Fourier integral (2pi)^-d int [2(1 - Re tau_hat)]^-1 dtheta over the
torus.  The integrand blows up like 1/(theta' Sigma theta) at the origin,
so the cube is split into 3-adically shrinking shells that are smooth for
Gauss-Legendre, and the innermost cube is summed in closed form through
the self-similarity of the quadratic leading term.  A Monte Carlo run of
the difference walk cross-checks the number.
"""

from dataclasses import dataclass

import numpy as np

from .model import Nonlinearity, StepDistribution


class RecurrentWalk(ValueError):
    """The collision local time diverges (d <= 2 or degenerate steps)."""


class EpsilonOutOfRange(ValueError):
    """lam^2 Lip^2 Upsilon(0) must stay below 1 for the moment bound."""


class InvalidMoment(ValueError):
    """A second moment below c_0^2 contradicts Cauchy-Schwarz."""


@dataclass(frozen=True)
class GreensReport:
    """Upsilon(0) with its numerical error budget and MC cross-check.

    return_probability is recovered from the mean of the local time,
    which is exponential with parameter 2(1 - r); the consistency
    relation upsilon_zero = 1/(2(1 - r)) therefore holds by construction
    and is what ties the two fields together.
    """

    upsilon_zero: float
    return_probability: float
    quadrature_error: float
    mc_estimate: float
    mc_se: float
    trace: tuple


def _covariance(tau: StepDistribution) -> np.ndarray:
    x = tau.sites.astype(np.float64)
    return (x * tau.probabilities[:, None]).T @ x


def _shell_points(half: float, d: int, nodes: int):
    """Gauss-Legendre points/weights for the shell between the cube of
    half-width ``half`` and its inner third, as (m, d) points."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    b = half / 3.0
    axis_nodes = x * b
    grids = np.meshgrid(*[axis_nodes] * d, indexing="ij")
    local = np.stack([g.ravel() for g in grids], axis=1)
    wg = np.meshgrid(*[w] * d, indexing="ij")
    local_w = np.prod(np.stack([g.ravel() for g in wg], axis=1), axis=1) * b ** d

    centers = []
    for idx in np.ndindex(*(3,) * d):
        off = np.array(idx) - 1
        if np.any(off != 0):
            centers.append(off * 2.0 * b)
    centers = np.array(centers)
    pts = (centers[:, None, :] + local[None, :, :]).reshape(-1, d)
    wts = np.tile(local_w, centers.shape[0])
    return pts, wts


def _quadrature(tau: StepDistribution, shells: int, nodes: int):
    """Shell contributions for k < shells, plus the closed-form core.

    The core uses only the quadratic leading term 1/(theta' Sigma theta),
    whose integral over shell k scales exactly by 3^-(d-2) per level, so
    one numerically integrated shell sums the whole remaining cube."""
    d = tau.dimension
    sites = tau.sites.astype(np.float64)
    probs = tau.probabilities
    sigma = _covariance(tau)

    def integrand(pts):
        re_hat = np.cos(pts @ sites.T) @ probs
        return 0.5 / (1.0 - re_hat)

    def quadratic(pts):
        return 1.0 / np.einsum("ij,jk,ik->i", pts, sigma, pts)

    contributions = []
    for k in range(shells):
        pts, wts = _shell_points(np.pi / 3.0 ** k, d, nodes)
        contributions.append(float(wts @ integrand(pts)))
    pts, wts = _shell_points(np.pi / 3.0 ** shells, d, nodes)
    core = float(wts @ quadratic(pts)) / (1.0 - 3.0 ** (2 - d))
    return contributions, core


def _mc_local_time(tau: StepDistribution, horizon: float, replicas: int,
                   seed: int):
    """Collision local time of two walks, as one rate-2 difference walk.

    Returns (estimate with geometric tail correction, SE of the truncated
    mean).  The tail ratio comes from the last two decades before the
    horizon; for a power-law tail the per-decade ratio is constant, which
    is what the extrapolation uses.
    """
    rng = np.random.default_rng(seed)
    sites = np.concatenate([tau.sites, -tau.sites])
    cdf = np.cumsum(np.concatenate([tau.probabilities, tau.probabilities]) / 2.0)
    pos = np.zeros((replicas, tau.dimension), dtype=np.int64)
    t = np.zeros(replicas)
    loc = np.zeros(replicas)
    decades = np.zeros(2)            # local time started in (T/100,T/10], (T/10,T]
    edges = (horizon / 100.0, horizon / 10.0)
    while True:
        active = t < horizon
        if not np.any(active):
            break
        hold = rng.exponential(0.5, size=replicas)
        at0 = active & np.all(pos == 0, axis=1)
        gain = np.where(at0, np.minimum(hold, horizon - t), 0.0)
        loc += gain
        decades[0] += gain[(t > edges[0]) & (t <= edges[1])].sum()
        decades[1] += gain[t > edges[1]].sum()
        t += hold
        jump = np.searchsorted(cdf, rng.random(replicas))
        pos[active] += sites[jump[active]]
    mean = float(loc.mean())
    se = float(loc.std(ddof=1) / np.sqrt(replicas))
    tail = 0.0
    if decades[0] > 0.0 and decades[1] < decades[0]:
        ratio = decades[1] / decades[0]
        tail = float(decades[1] * ratio / (1.0 - ratio) / replicas)
    return mean + tail, se


def upsilon_zero(tau: StepDistribution, shells: int = 7,
                 nodes: int | None = None, mc_horizon: float = 1e3,
                 mc_replicas: int = 4000, mc_seed: int = 0) -> GreensReport:
    """Expected collision local time Upsilon(0) of the validated walk.

    Requires a transient, genuinely d-dimensional walk (d >= 3 with
    nonsingular step covariance); otherwise RecurrentWalk.  The reported
    quadrature_error compares against a coarser pass (one shell fewer,
    lower node count), so it covers both truncation knobs; the MC fields
    give the fully independent cross-check.
    """
    d = tau.dimension
    if d <= 2:
        raise RecurrentWalk(f"the walk is recurrent in dimension {d}")
    sigma = _covariance(tau)
    if np.linalg.matrix_rank(sigma, tol=1e-12) < d:
        raise RecurrentWalk("step covariance is singular; the walk is "
                            "confined to a lower-dimensional sublattice")
    if shells < 2:
        raise ValueError("need at least 2 refinement shells")
    if nodes is None:
        nodes = {3: 16, 4: 10}.get(d, 6)

    norm = (2.0 * np.pi) ** (-d)
    contributions, core = _quadrature(tau, shells, nodes)
    value = norm * (sum(contributions) + core)
    coarse_nodes = max(4, nodes - 4)
    ccontributions, ccore = _quadrature(tau, shells - 1, coarse_nodes)
    coarse = norm * (sum(ccontributions) + ccore)
    err = abs(value - coarse)

    mc_est, mc_se = _mc_local_time(tau, mc_horizon, mc_replicas, mc_seed)

    trace = []
    running = 0.0
    for k, c in enumerate(contributions):
        running += norm * c
        trace.append(("shell", k, np.pi / 3.0 ** k, norm * c, running))
    running += norm * core
    trace.append(("core", shells, np.pi / 3.0 ** shells, norm * core, running))

    ups = float(value)
    return GreensReport(
        upsilon_zero=ups,
        return_probability=1.0 - 1.0 / (2.0 * ups),
        quadrature_error=float(err),
        mc_estimate=float(mc_est),
        mc_se=float(mc_se),
        trace=tuple(trace),
    )


def lambda_lower_bound(sigma: Nonlinearity, report: GreensReport) -> float:
    """Certified noise level below which the mass stays L^2-bounded:
    1 / (Lip * sqrt(Upsilon(0)))."""
    return 1.0 / (sigma.lip * np.sqrt(report.upsilon_zero))


def second_moment_bound(noise_level: float, sigma: Nonlinearity,
                        report: GreensReport, c0: float) -> float:
    """Uniform-in-time bound 2 c_0^2 (1+eps)/(1-eps), eps = lam^2 Lip^2 Upsilon."""
    eps = noise_level ** 2 * sigma.lip ** 2 * report.upsilon_zero
    if eps >= 1.0:
        raise EpsilonOutOfRange(
            f"lam^2 Lip^2 Upsilon(0) = {eps:g} >= 1; no uniform bound")
    return 2.0 * c0 * c0 * (1.0 + eps) / (1.0 - eps)


def paley_zygmund_floor(c0: float, second_moment: float) -> float:
    """Survival floor P{W >= c_0/2} >= c_0^2 / (4 E[W^2])."""
    if second_moment < c0 * c0:
        raise InvalidMoment(
            f"second moment {second_moment:g} < c_0^2 = {c0 * c0:g}")
    return c0 * c0 / (4.0 * second_moment)


def export_trace_csv(report: GreensReport, path) -> None:
    """Write the shell refinement trace as CSV for audit."""
    lines = ["kind,level,halfWidth,contribution,cumulative"]
    for kind, level, half, contribution, cumulative in report.trace:
        lines.append(f"{kind},{level},{half!r},{contribution!r},{cumulative!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
