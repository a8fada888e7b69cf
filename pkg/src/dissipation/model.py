"""Lattice model definitions: step distribution, generator, nonlinearity.

The jump law tau lives on a finite subset of Z^d and must satisfy the
structural assumptions of the underlying theory: probabilities sum to one,
zero mean per coordinate, genuinely d-dimensional support, and tau(0) < 1.
Validation is strict and never normalizes silently.

Norm convention: ``box membership`` uses the sup norm, so boxes are
hypercubes.  The builtin Laplacian uses nearest neighbors in l1 distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np


class ModelError(ValueError):
    """Base class for model validation failures."""


class NotNormalized(ModelError):
    pass


class NonzeroMean(ModelError):
    pass


class DegenerateSupport(ModelError):
    pass


class SelfLoopOnly(ModelError):
    pass


class BoxTooSmall(ModelError):
    pass


class NonlinearityError(ModelError):
    pass


_TOL = 1e-12


@dataclass(frozen=True)
class StepDistribution:
    """Validated jump law on Z^d.

    Attributes:
        dimension: spatial dimension d.
        sites: (n, d) int array of support sites.
        probabilities: (n,) float array, each in (0, 1].
        range_: sup-norm radius of the support (R_0).
    """

    dimension: int
    sites: np.ndarray
    probabilities: np.ndarray
    range_: int

    @property
    def support(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(int(c) for c in s), float(p))
                for s, p in zip(self.sites, self.probabilities)]

    def probability(self, site: Sequence[int]) -> float:
        """tau(x); 0 for sites outside the support."""
        target = np.asarray(site, dtype=np.int64)
        hit = np.all(self.sites == target, axis=1)
        idx = np.nonzero(hit)[0]
        return float(self.probabilities[idx[0]]) if idx.size else 0.0

    def coordinate_variances(self) -> np.ndarray:
        """Per-coordinate variance of a single step (mean is zero)."""
        return self.probabilities @ (self.sites.astype(np.float64) ** 2)

    def covariance(self) -> np.ndarray:
        x = self.sites.astype(np.float64)
        return (x * self.probabilities[:, None]).T @ x

    def is_symmetric(self) -> bool:
        """True when tau(x) = tau(-x) for every support site."""
        for s, p in self.support:
            neg = tuple(-c for c in s)
            if abs(self.probability(neg) - p) > _TOL:
                return False
        return True

    def characteristic(self, theta: np.ndarray) -> np.ndarray:
        """Re tau_hat(theta) = sum_x cos(theta.x) tau(x), vectorized over
        the leading axes of theta (last axis has length d)."""
        theta = np.asarray(theta, dtype=np.float64)
        phases = theta @ self.sites.astype(np.float64).T
        return np.cos(phases) @ self.probabilities


def validate_step_distribution(
    raw: Sequence[tuple[Sequence[int] | int, float]],
    d: int,
    tol: float = _TOL,
) -> StepDistribution:
    """Check the structural assumptions on a candidate jump law.

    Args:
        raw: list of (site, probability) pairs; a bare int site is accepted
            for d=1.
        d: spatial dimension, at least 1.
        tol: absolute tolerance for the sum and mean checks.

    Returns:
        A validated StepDistribution.  Normalization is never applied
        silently: an off-by-more-than-tol sum is an error.

    Raises:
        NotNormalized, NonzeroMean, DegenerateSupport, SelfLoopOnly,
        ValueError for malformed input.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if not raw:
        raise ValueError("support must be nonempty")
    sites = []
    probs = []
    for entry in raw:
        site, p = entry
        if isinstance(site, (int, np.integer)):
            site = (int(site),)
        site = tuple(int(c) for c in site)
        if len(site) != d:
            raise ValueError(f"site {site} does not have dimension {d}")
        p = float(p)
        if not 0.0 < p <= 1.0:
            raise ValueError(f"probability {p} for site {site} not in (0, 1]")
        if site in (tuple(s) for s in sites):
            raise ValueError(f"duplicate support site {site}")
        sites.append(site)
        probs.append(p)

    sites_arr = np.asarray(sites, dtype=np.int64).reshape(len(sites), d)
    probs_arr = np.asarray(probs, dtype=np.float64)

    total = float(probs_arr.sum())
    if abs(total - 1.0) > tol:
        raise NotNormalized(f"probabilities sum to {total!r}, not 1")
    mean = probs_arr @ sites_arr.astype(np.float64)
    if np.max(np.abs(mean)) > tol:
        raise NonzeroMean(f"per-coordinate mean {mean.tolist()} is not zero")
    origin = tuple([0] * d)
    if origin in (tuple(s) for s in sites) :
        if probs_arr[[tuple(s) for s in sites].index(origin)] >= 1.0 - tol:
            raise SelfLoopOnly("tau(0) >= 1: walk never moves")
    if np.linalg.matrix_rank(sites_arr) < d:
        raise DegenerateSupport(
            f"support spans rank {np.linalg.matrix_rank(sites_arr)} < {d}")

    r0 = int(np.max(np.abs(sites_arr)))
    sites_arr.setflags(write=False)
    probs_arr.setflags(write=False)
    return StepDistribution(dimension=d, sites=sites_arr,
                            probabilities=probs_arr, range_=r0)


def builtin_laplacian(d: int) -> StepDistribution:
    """Uniform jump law on the 2d unit neighbors (simple random walk)."""
    raw = []
    for axis in range(d):
        for sign in (-1, 1):
            site = [0] * d
            site[axis] = sign
            raw.append((tuple(site), 1.0 / (2 * d)))
    return validate_step_distribution(raw, d)


def lazy_modification(tau: StepDistribution, p: float) -> StepDistribution:
    """(1-p) delta_0 + p tau: slows the walk down without changing shape."""
    if not 0.0 < p < 1.0:
        raise ValueError("laziness mixture weight must lie in (0, 1)")
    raw = [(s, p * w) for s, w in tau.support]
    origin = tuple([0] * tau.dimension)
    have = [i for i, (s, _) in enumerate(raw) if s == origin]
    if have:
        s, w = raw[have[0]]
        raw[have[0]] = (s, w + (1.0 - p))
    else:
        raw.append((origin, 1.0 - p))
    return validate_step_distribution(raw, tau.dimension)


@dataclass(frozen=True)
class Nonlinearity:
    """Noise coefficient sigma with certified linear-growth envelope.

    sigma(0) = 0 and lower*|z| <= |sigma(z)| <= lip*|z| on the certification
    grid.  ``kind`` is "linear" (sigma(z) = slope*z) or "tabulated"
    (odd piecewise-linear interpolation of (grid, values))."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    lip: float
    lower: float
    kind: str = "linear"
    slope: float = 1.0
    table: tuple[np.ndarray, np.ndarray] | None = None

    def __call__(self, z):
        return self.evaluator(z)


def _certify_sigma(evaluator, lip, lower, grid_limit=1e3, grid_points=100_000):
    if lip <= 0 or lower <= 0:
        raise NonlinearityError("lip and lower constants must be positive")
    if lower > lip + _TOL:
        raise NonlinearityError("lower constant exceeds Lipschitz constant")
    z0 = np.asarray(evaluator(np.array([0.0])))
    if z0[0] != 0.0:
        raise NonlinearityError(f"sigma(0) = {z0[0]!r}, must be exactly 0")
    z = np.linspace(-grid_limit, grid_limit, grid_points)
    vals = np.abs(np.asarray(evaluator(z)))
    mags = np.abs(z)
    slack = 1e-9 * np.maximum(mags, 1.0)
    low_bad = vals + slack < lower * mags
    high_bad = vals - slack > lip * mags
    if np.any(low_bad) or np.any(high_bad):
        zi = z[np.argmax(low_bad | high_bad)]
        raise NonlinearityError(
            f"sigma violates the declared envelope near z={zi:.6g}")


def linear_sigma(slope: float = 1.0) -> Nonlinearity:
    """sigma(z) = slope*z; the slope is both constants."""
    s = float(slope)
    if s <= 0:
        raise NonlinearityError("slope must be positive")
    nl = Nonlinearity(evaluator=lambda z: s * np.asarray(z), lip=s, lower=s,
                      kind="linear", slope=s)
    _certify_sigma(nl.evaluator, nl.lip, nl.lower)
    return nl


def tabulated_sigma(grid: Sequence[float], values: Sequence[float],
                    lip: float, lower: float) -> Nonlinearity:
    """Odd piecewise-linear sigma from samples on z >= 0.

    The table covers [0, grid[-1]]; beyond the last point the function
    continues with its final slope.  Certification checks the declared
    envelope constants on the standard grid.
    """
    g = np.asarray(grid, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if g.ndim != 1 or g.shape != v.shape or g.size < 2:
        raise NonlinearityError("table needs matching 1-d grid and values")
    if g[0] != 0.0 or v[0] != 0.0 or np.any(np.diff(g) <= 0):
        raise NonlinearityError("grid must start at 0 (with value 0) and increase")
    end_slope = (v[-1] - v[-2]) / (g[-1] - g[-2])

    def evaluator(z):
        z = np.asarray(z, dtype=np.float64)
        mag = np.abs(z)
        j = np.clip(np.searchsorted(g, mag, side="right") - 1, 0, g.size - 2)
        slope = (v[j + 1] - v[j]) / (g[j + 1] - g[j])
        inside = slope * (mag - g[j]) + v[j]
        out = np.where(mag <= g[-1], inside, v[-1] + end_slope * (mag - g[-1]))
        return np.sign(z) * out

    nl = Nonlinearity(evaluator=evaluator, lip=float(lip), lower=float(lower),
                      kind="tabulated", slope=float("nan"), table=(g, v))
    _certify_sigma(nl.evaluator, nl.lip, nl.lower)
    return nl


@dataclass(frozen=True)
class LatticeField:
    """State u restricted to the hypercube box {x : ||x||_sup <= K}.

    Stored densely: ``values`` has shape (2K+1,)*d and index (i_1,...,i_d)
    holds the value at lattice site (i_1-K, ..., i_d-K).  State fields are
    nonnegative; generator images carry signed=True and skip that check.
    """

    dimension: int
    box_radius: int
    values: np.ndarray
    signed: bool = False

    def __post_init__(self):
        expect = (2 * self.box_radius + 1,) * self.dimension
        if self.values.shape != expect:
            raise ValueError(f"values shape {self.values.shape} != {expect}")
        if not self.signed and np.any(self.values < 0):
            raise ValueError("state field has negative entries")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite entries")

    @classmethod
    def delta(cls, d: int, box_radius: int, mass: float = 1.0) -> "LatticeField":
        vals = np.zeros((2 * box_radius + 1,) * d)
        vals[(box_radius,) * d] = mass
        return cls(dimension=d, box_radius=box_radius, values=vals)

    @classmethod
    def from_map(cls, d: int, box_radius: int,
                 mapping: dict[tuple[int, ...], float]) -> "LatticeField":
        vals = np.zeros((2 * box_radius + 1,) * d)
        for site, v in mapping.items():
            if max(abs(c) for c in site) > box_radius:
                raise ValueError(f"site {site} outside box radius {box_radius}")
            vals[tuple(c + box_radius for c in site)] = v
        return cls(dimension=d, box_radius=box_radius, values=vals)

    def value(self, site: Sequence[int]) -> float:
        """Value at a lattice site; sites outside the box read as 0."""
        site = tuple(int(c) for c in site)
        if max(abs(c) for c in site) > self.box_radius:
            return 0.0
        return float(self.values[tuple(c + self.box_radius for c in site)])

    def sites(self) -> Iterator[tuple[int, ...]]:
        k = self.box_radius
        for idx in np.ndindex(*self.values.shape):
            yield tuple(i - k for i in idx)

    def total_mass(self) -> float:
        return float(self.values.sum())


def _shifted(values: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    """values translated by -offset with zero fill: out[x] = values[x+offset]."""
    out = np.zeros_like(values)
    src = []
    dst = []
    for n, o in zip(values.shape, offset):
        o = int(o)
        if abs(o) >= n:
            return out
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = values[tuple(src)]
    return out


def apply_generator(field: LatticeField, tau: StepDistribution) -> LatticeField:
    """Generator image (Gh)(x) = sum_y [h(x+y) - h(x)] tau(y) on the box.

    Sites outside the box read as zero (absorbing boundary rule), so the
    image is exact for fields supported at sup-distance >= R_0 from the
    boundary and conservative otherwise.

    Raises:
        BoxTooSmall: the box cannot hold a single jump range.
    """
    if field.dimension != tau.dimension:
        raise ValueError("field and step distribution dimensions differ")
    if field.box_radius < tau.range_:
        raise BoxTooSmall(
            f"box radius {field.box_radius} < step range {tau.range_}")
    out = -field.values.copy()
    for site, p in zip(tau.sites, tau.probabilities):
        out += p * _shifted(field.values, site)
    return LatticeField(dimension=field.dimension, box_radius=field.box_radius,
                        values=out, signed=True)


def mgf(tau: StepDistribution, z: Sequence[float]) -> float:
    """Moment generating function phi(z) = sum_x exp(z.x) tau(x)."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.shape != (tau.dimension,):
        raise ValueError(f"z must have shape ({tau.dimension},)")
    return float(np.exp(tau.sites.astype(np.float64) @ z) @ tau.probabilities)


@dataclass(frozen=True)
class BoxPolicy:
    """How the simulation box evolves.

    kind "fixed": radius stays at ``radius`` (defaults to the horizon
    formula).  kind "scheduled": radius follows the sqrt-in-time schedule,
    growing monotonically.  kind "adaptive": radius grows only when the
    boundary shell holds more than ``trigger`` of current mass, capped by
    the schedule for the horizon."""

    kind: str = "fixed"
    radius: int | None = None
    trigger: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("fixed", "scheduled", "adaptive"):
            raise ValueError(f"unknown box policy kind {self.kind!r}")


def horizon_box_radius(tau: StepDistribution, t: float) -> int:
    """Default static box: ceil(4 R_0 sqrt(Var_1 t)) + 8.

    Var_1 is the largest per-coordinate variance per unit time; the outside
    mass at this radius is exponentially negligible for the horizons used
    here."""
    var1 = float(np.max(tau.coordinate_variances()))
    return int(np.ceil(4.0 * tau.range_ * np.sqrt(var1 * max(t, 0.0)))) + 8


@dataclass(frozen=True)
class SimParams:
    """Campaign parameters for the lattice solver."""

    noise_level: float                    # lambda
    initial_mass: float = 1.0             # c_0
    time_step: float = 1e-3               # dt
    horizon: float = 1.0                  # T
    box_policy: BoxPolicy = field(default_factory=BoxPolicy)
    replica_count: int = 1
    rng_seed: int = 0
    samples_per_decade: int = 60
    extinction_cutoff: float = 1e-30      # freeze replicas below cutoff*c_0

    def __post_init__(self):
        if self.noise_level < 0:
            raise ValueError("noise level must be >= 0")
        if self.initial_mass <= 0:
            raise ValueError("initial mass must be positive")
        if self.time_step <= 0 or self.time_step > self.horizon:
            raise ValueError("need 0 < dt <= T")
        if self.replica_count < 1:
            raise ValueError("replica count must be >= 1")


# ---------------------------------------------------------------------------
# Model files ("model-v1"): dimension, support, sigma.

_BUILTIN_MODELS = {
    "srw1": 1, "srw2": 2, "srw3": 3, "srw4": 4,
}


def model_to_dict(tau: StepDistribution, sigma: Nonlinearity) -> dict:
    doc = {
        "schemaVersion": "model-v1",
        "dimension": tau.dimension,
        "support": [[list(site), p] for site, p in tau.support],
        "sigma": {"kind": sigma.kind, "lip": sigma.lip, "lower": sigma.lower},
    }
    if sigma.kind == "tabulated":
        g, v = sigma.table
        doc["sigma"]["grid"] = g.tolist()
        doc["sigma"]["values"] = v.tolist()
    return doc


def model_from_dict(doc: dict) -> tuple[StepDistribution, Nonlinearity]:
    version = doc.get("schemaVersion")
    if version != "model-v1":
        raise ValueError(f"unsupported model schema {version!r}")
    d = int(doc["dimension"])
    raw = [(tuple(site), p) for site, p in doc["support"]]
    tau = validate_step_distribution(raw, d)
    sig = doc.get("sigma", {"kind": "linear", "lip": 1.0, "lower": 1.0})
    if sig["kind"] == "linear":
        sigma = linear_sigma(float(sig.get("lip", 1.0)))
    elif sig["kind"] == "tabulated":
        sigma = tabulated_sigma(sig["grid"], sig["values"],
                                float(sig["lip"]), float(sig["lower"]))
    else:
        raise ValueError(f"unknown sigma kind {sig['kind']!r}")
    return tau, sigma


def load_model(source: str | Path) -> tuple[StepDistribution, Nonlinearity]:
    """Load a model from a JSON file or a builtin name like ``srw3``."""
    name = str(source)
    if name in _BUILTIN_MODELS:
        return builtin_laplacian(_BUILTIN_MODELS[name]), linear_sigma(1.0)
    text = Path(source).read_text()
    return model_from_dict(json.loads(text))


def save_model(path: str | Path, tau: StepDistribution,
               sigma: Nonlinearity) -> None:
    Path(path).write_text(json.dumps(model_to_dict(tau, sigma), indent=2) + "\n")
