"""Service endpoints: one POST per campaign type, JSON in and out.

The command line talks to this app in process by default and over HTTP
with --server; both paths exercise identical code.  Compute calls are
serialized behind a single lock because the solvers already parallelize
internally over replicas, so concurrent requests would only thrash the
worker pool.  Domain errors surface as 422 with the core message; the
service itself draws no randomness and touches no files.
"""

import threading
import warnings

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..analysis import (MomentSeries, fit_decay, laplace_monotonicity_test,
                        survival_sweep)
from ..continuum import (ContinuumParams, simulate_continuum_campaign,
                         suggest_continuum_time_step)
from ..greens import (lambda_lower_bound, paley_zygmund_floor,
                      second_moment_bound, upsilon_zero)
from ..kernel import check_hoeffding_bound, poisson_cutoff, transition_kernel
from ..model import (_BUILTIN_MODELS, BoxPolicy, SimParams, linear_sigma,
                     load_model, model_from_dict, model_to_dict,
                     tabulated_sigma)
from ..odeclass import (check_membership, fit_class_parameters,
                        predicted_exponent, sampled_from_values,
                        verify_decay_conclusion)
from ..sde import NumericalBlowup, simulate_campaign, suggest_time_step
from . import schemas as sc

app = FastAPI(title="dissipation", version=__version__)

_LOCK = threading.Lock()


def _resolve_model(spec):
    """Builtin name or inline model-v1 document -> (tau, sigma)."""
    if isinstance(spec, str):
        if spec not in _BUILTIN_MODELS:
            raise ValueError(
                f"unknown builtin model {spec!r}; pass the model document")
        return load_model(spec)
    try:
        return model_from_dict(spec)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc}") from None


def _domain(exc: Exception) -> HTTPException:
    return HTTPException(status_code=422, detail=str(exc))


def _trajectory(tr) -> sc.Trajectory:
    return sc.Trajectory(
        replica_id=tr.replica_id, seed=tr.seed,
        times=tr.times.tolist(), mass=tr.mass.tolist(), qv=tr.qv.tolist(),
        clamp_count=int(tr.clamp_count),
        box_radius_final=int(tr.box_radius_final),
        frozen_at=tr.frozen_at)


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.get("/meta")
def meta():
    return {
        "version": __version__,
        "rng": "counter-based splittable, keyed by (seed, replica, step, site)",
        "schemas": {"model": "model-v1", "manifest": "manifest-v1"},
        "builtinModels": sorted(_BUILTIN_MODELS),
    }


@app.post("/validate", response_model=sc.ValidateResponse)
def validate(req: sc.ValidateRequest):
    try:
        tau, sigma = _resolve_model(req.model)
    except ValueError as exc:
        return sc.ValidateResponse(valid=False,
                                   report=f"{type(exc).__name__}: {exc}")
    report = (f"valid model: dimension {tau.dimension}, "
              f"{len(tau.sites)} support sites, range {tau.range_}, "
              f"sigma {sigma.kind} (lip {sigma.lip:g})")
    return sc.ValidateResponse(valid=True, report=report,
                               dimension=tau.dimension, range_=tau.range_,
                               sigma_kind=sigma.kind)


@app.post("/simulate", response_model=sc.SimulateResponse)
def simulate(req: sc.SimulateRequest):
    try:
        tau, sigma = _resolve_model(req.model)
        dt = req.time_step if req.time_step is not None else \
            suggest_time_step(req.noise_level, lip=sigma.lip)
        params = SimParams(
            noise_level=req.noise_level, initial_mass=req.initial_mass,
            time_step=dt, horizon=req.horizon,
            box_policy=BoxPolicy(kind=req.box_kind, radius=req.box_radius,
                                 trigger=req.box_trigger),
            replica_count=req.replica_count, rng_seed=req.rng_seed,
            samples_per_decade=req.samples_per_decade,
            extinction_cutoff=req.extinction_cutoff)
    except ValueError as exc:
        raise _domain(exc)
    try:
        with _LOCK, warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            runs = simulate_campaign(params, (tau, sigma),
                                     threads=req.threads)
    except NumericalBlowup as exc:
        raise _domain(exc)
    return sc.SimulateResponse(
        model=model_to_dict(tau, sigma), time_step=dt,
        replicas=[_trajectory(tr) for tr in runs],
        warnings=sorted({str(w.message) for w in caught}))


@app.post("/sweep", response_model=sc.SweepResponse)
def sweep(req: sc.SweepRequest):
    try:
        tau, sigma = _resolve_model(req.model)
        with _LOCK, warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = survival_sweep(
                (tau, sigma), np.asarray(req.lambdas, dtype=np.float64),
                req.horizon, threshold=req.threshold, replicas=req.replicas,
                seed=req.rng_seed, time_step=req.time_step,
                threads=req.threads)
    except (ValueError, NumericalBlowup) as exc:
        raise _domain(exc)
    mono = (laplace_monotonicity_test(result)
            if result.lambda_grid.size >= 3 else None)
    return sc.SweepResponse(
        model=model_to_dict(tau, sigma),
        lambda_grid=result.lambda_grid.tolist(),
        survival=result.survival.tolist(),
        survival_se=result.survival_se.tolist(),
        laplace=result.laplace.tolist(),
        laplace_se=result.laplace_se.tolist(),
        crossing=result.crossing, threshold=result.threshold,
        horizon=result.horizon, masses=result.masses.tolist(),
        monotonicity=mono,
        warnings=sorted({str(w.message) for w in caught}))


@app.post("/kernel", response_model=sc.KernelResponse)
def kernel(req: sc.KernelRequest):
    try:
        tau, sigma = _resolve_model(req.model)
        radius = req.box_radius if req.box_radius is not None else \
            tau.range_ * poisson_cutoff(req.t)
        with _LOCK:
            kern = transition_kernel(tau, req.t, box_radius=radius)
            hoeff = None
            if req.hoeffding_q is not None:
                grid = req.t_grid if req.t_grid else [req.t]
                hoeff = check_hoeffding_bound(tau, req.hoeffding_q, grid,
                                              k_grid_per_t=req.k_grid_per_t)
    except ValueError as exc:
        raise _domain(exc)
    nz = np.argwhere(kern.probabilities > 0.0)
    sites = (nz - kern.box_radius).tolist()
    probs = kern.probabilities[tuple(nz.T)].tolist()
    return sc.KernelResponse(
        model=model_to_dict(tau, sigma), t=kern.time,
        dimension=kern.dimension, box_radius=kern.box_radius,
        truncation_error=kern.truncation_error, total=kern.total(),
        sites=sites, probabilities=probs, hoeffding=hoeff)


@app.post("/greens", response_model=sc.GreensResponse)
def greens(req: sc.GreensRequest):
    try:
        tau, sigma = _resolve_model(req.model)
        with _LOCK:
            rep = upsilon_zero(tau, shells=req.shells, nodes=req.nodes,
                               mc_horizon=req.mc_horizon,
                               mc_replicas=req.mc_replicas,
                               mc_seed=req.mc_seed)
        bound = lambda_lower_bound(sigma, rep)
        m2 = floor = None
        if req.noise_level is not None and req.noise_level > 0.0:
            m2 = second_moment_bound(req.noise_level, sigma, rep,
                                     c0=req.initial_mass)
            floor = paley_zygmund_floor(req.initial_mass, m2)
    except ValueError as exc:
        raise _domain(exc)
    return sc.GreensResponse(
        model=model_to_dict(tau, sigma),
        upsilon_zero=rep.upsilon_zero,
        return_probability=rep.return_probability,
        quadrature_error=rep.quadrature_error,
        mc_estimate=rep.mc_estimate, mc_se=rep.mc_se,
        lambda_lower_bound=bound,
        trace=[list(row) for row in rep.trace],
        second_moment=m2, survival_floor=floor)


@app.post("/odeclass", response_model=sc.OdeclassResponse)
def odeclass(req: sc.OdeclassRequest):
    try:
        values = np.asarray(req.values, dtype=np.float64) * req.rescale
        errors = None
        if req.errors is not None:
            errors = np.asarray(req.errors, dtype=np.float64) * req.rescale
        f = sampled_from_values(req.times, values, errors)
        fitted = req.alpha is None or req.gamma is None
        if fitted:
            alpha, gamma = fit_class_parameters(f, req.delta)
        else:
            alpha, gamma = req.alpha, req.gamma
        membership = check_membership(f, alpha, req.delta, gamma,
                                      req.window_a, req.window_b)
        exponent = predicted_exponent(req.delta)
        decay = (verify_decay_conclusion(f, req.delta)
                 if f.times[-1] >= 100.0 else None)
    except ValueError as exc:
        raise _domain(exc)
    return sc.OdeclassResponse(alpha=alpha, gamma=gamma, fitted=fitted,
                               membership=membership, exponent=exponent,
                               decay=decay)


def _continuum_sigma(spec: sc.SigmaSpec):
    if spec.kind == "linear":
        return linear_sigma(spec.lip)
    if spec.kind == "tabulated":
        if spec.grid is None or spec.values is None:
            raise ValueError("tabulated sigma needs grid and values")
        return tabulated_sigma(spec.grid, spec.values, spec.lip, spec.lower)
    raise ValueError(f"unknown sigma kind {spec.kind!r}")


@app.post("/continuum", response_model=sc.ContinuumResponse)
def continuum(req: sc.ContinuumRequest):
    try:
        sigma = _continuum_sigma(req.sigma)
        dt = req.time_step if req.time_step is not None else \
            suggest_continuum_time_step(req.noise_level, req.grid_spacing,
                                        lip=sigma.lip)
        params = ContinuumParams(
            noise_level=req.noise_level, horizon=req.horizon,
            grid_spacing=req.grid_spacing, time_step=dt,
            half_width=req.half_width, replica_count=req.replica_count,
            rng_seed=req.rng_seed,
            samples_per_decade=req.samples_per_decade,
            extinction_cutoff=req.extinction_cutoff)
        with _LOCK, warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            runs = simulate_continuum_campaign(params, sigma,
                                               threads=req.threads)
    except (ValueError, NumericalBlowup) as exc:
        raise _domain(exc)
    radius = runs[0].box_radius_final
    return sc.ContinuumResponse(
        time_step=dt, half_width=radius * params.grid_spacing,
        replicas=[_trajectory(tr) for tr in runs],
        warnings=sorted({str(w.message) for w in caught}))


@app.post("/fit", response_model=sc.FitResponse)
def fit(req: sc.FitRequest):
    try:
        times = np.asarray(req.times, dtype=np.float64)
        est = np.asarray(req.estimates, dtype=np.float64)
        se = (np.asarray(req.standard_errors, dtype=np.float64)
              if req.standard_errors is not None else np.zeros_like(est))
        series = MomentSeries(eta=req.eta, times=times, estimates=est,
                              standard_errors=se)
        result = fit_decay(series, req.law)
    except ValueError as exc:
        raise _domain(exc)
    return sc.FitResponse(**result)
