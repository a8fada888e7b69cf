"""Command-line front end: thin client over the service endpoints.

Every campaign command resolves its settings (defaults < config file <
flags), posts one request to the service (in process unless --server is
given), then writes the artifacts and a manifest under --out-dir.  The
client owns all file I/O; the service only computes.

Exit codes: 0 success, 1 domain failure (invalid model, failed check,
rejected request), 2 configuration and I/O errors.
"""

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import MomentSeries, SweepResult, export_sweep_csv
from .config import (ConfigError, help_config, load_config, parse_grid,
                     section)
from .greens import GreensReport, export_trace_csv
from .kernel import TransitionKernel, export_kernel_csv
from .manifest import (content_hash, start_manifest, verify_manifest,
                       write_manifest)
from .model import _BUILTIN_MODELS, load_model, model_to_dict
from .plotting import plot_decay_fit, plot_sweep
from .sde import MassTrajectory, export_trajectories_csv


class CommandFailed(RuntimeError):
    """Domain-level failure reported by the service; maps to exit 1."""


class ConnectionFailed(RuntimeError):
    """Could not reach the service; maps to exit 2."""


class ServiceClient:
    """POST wrapper over the in-process app or a remote server."""

    def __init__(self, server: str | None = None):
        if server:
            import httpx
            self._post = httpx.Client(base_url=server, timeout=None).post
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")   # test-client import chatter
                from fastapi.testclient import TestClient
            from .service.app import app
            self._post = TestClient(app).post

    def post(self, path: str, payload: dict) -> dict:
        import httpx
        try:
            response = self._post(path, json=payload)
        except httpx.HTTPError as exc:
            raise ConnectionFailed(f"service unreachable: {exc}") from None
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise CommandFailed(f"{path[1:]}: {detail}")
        return response.json()


def _resolve_model(name: str) -> dict:
    """Builtin name or model-v1 JSON path -> inline document."""
    if name in _BUILTIN_MODELS:
        return model_to_dict(*load_model(name))
    path = Path(name)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {name}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandFailed(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CommandFailed("model file must hold a JSON object")
    return doc


def _read_series_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moment-series CSV: columns t, estimate and an optional se."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                values = [float(v) for v in row[:3]]
            except ValueError:
                if i == 0:
                    continue          # header line
                raise CommandFailed(f"non-numeric row {i + 1} in {path}")
            rows.append(values)
    if len(rows) < 2:
        raise CommandFailed(f"need at least 2 data rows in {path}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise CommandFailed(f"ragged rows in {path}")
    data = np.asarray(rows, dtype=np.float64)
    se = data[:, 2] if width >= 3 else np.zeros(data.shape[0])
    return data[:, 0], data[:, 1], se


def _trajectories(doc_list) -> list[MassTrajectory]:
    return [MassTrajectory(
        times=np.asarray(d["times"]), mass=np.asarray(d["mass"]),
        qv=np.asarray(d["qv"]), clamp_count=d["clampCount"],
        replica_id=d["replicaId"], seed=d["seed"],
        box_radius_final=d["boxRadiusFinal"], frozen_at=d.get("frozenAt"))
        for d in doc_list]


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _emit(command, seed, model_doc, params, out_dir: Path, files,
          summary: str) -> None:
    """Write the manifest for artifacts already sitting in out_dir."""
    man = start_manifest(command, seed, model_doc, params)
    for f in files:
        man.add_output(f, base_dir=out_dir)
    write_manifest(man, out_dir / "manifest.json")
    print(summary)
    names = ", ".join(Path(f).name for f in files)
    print(f"out: {names} + manifest.json in {out_dir}")


def _print_warnings(resp: dict) -> None:
    for text in resp.get("warnings", []):
        print(f"warning: {text}", file=sys.stderr)


# --- command handlers ----------------------------------------------------

def cmd_validate(args, settings, client) -> int:
    doc = _resolve_model(args.model)
    resp = client.post("/validate", {"model": doc})
    print(resp["report"])
    return 0 if resp["valid"] else 1


def cmd_simulate(args, settings, client) -> int:
    doc = _resolve_model(settings["model"])
    payload = {
        "model": doc,
        "noiseLevel": settings["noise_level"],
        "initialMass": settings["initial_mass"],
        "horizon": settings["horizon"],
        "timeStep": settings["time_step"] or None,
        "replicaCount": settings["replica_count"],
        "rngSeed": settings["seed"],
        "samplesPerDecade": settings["samples_per_decade"],
        "extinctionCutoff": settings["extinction_cutoff"],
        "boxKind": settings["box_kind"],
        "boxRadius": settings["box_radius"] or None,
        "boxTrigger": settings["box_trigger"],
        "threads": settings["threads"],
    }
    resp = client.post("/simulate", payload)
    _print_warnings(resp)
    out = args.out_dir
    runs = _trajectories(resp["replicas"])
    export_trajectories_csv(runs, out / "trajectories.csv")
    final = np.array([tr.mass[-1] for tr in runs])
    params = {k: v for k, v in payload.items() if k != "model"}
    params["timeStep"] = resp["timeStep"]
    _emit("simulate", settings["seed"], doc, params, out,
          [out / "trajectories.csv"],
          f"simulate: {len(runs)} replicas to T = {settings['horizon']:g} "
          f"at lambda = {settings['noise_level']:g}, "
          f"dt = {resp['timeStep']:g}; "
          f"mean final mass {final.mean():.6g} "
          f"(se {final.std(ddof=1) / np.sqrt(final.size):.2g})")
    return 0


def cmd_sweep(args, settings, client) -> int:
    if args.d is not None:
        settings["model"] = f"srw{args.d}"
    doc = _resolve_model(settings["model"])
    grid = parse_grid(settings["lambdas"])
    payload = {
        "model": doc,
        "lambdas": grid.tolist(),
        "horizon": settings["horizon"],
        "replicas": settings["replicas"],
        "rngSeed": settings["seed"],
        "threshold": settings["threshold"] or None,
        "timeStep": settings["time_step"] or None,
        "threads": settings["threads"],
    }
    resp = client.post("/sweep", payload)
    _print_warnings(resp)
    out = args.out_dir
    sweep = SweepResult(
        lambda_grid=np.asarray(resp["lambdaGrid"]),
        survival=np.asarray(resp["survival"]),
        survival_se=np.asarray(resp["survivalSe"]),
        laplace=np.asarray(resp["laplace"]),
        laplace_se=np.asarray(resp["laplaceSe"]),
        crossing=resp["crossing"], threshold=resp["threshold"],
        horizon=resp["horizon"], masses=np.asarray(resp["masses"]))
    export_sweep_csv(sweep, out / "sweep.csv")
    plot_sweep(sweep, out / "sweep.svg")
    mono = resp.get("monotonicity")
    lines = [f"sweep: {grid.size} noise levels, "
             f"{settings['replicas']} replicas each, T = {sweep.horizon:g}"]
    if sweep.crossing is not None:
        lines.append(f"survival crosses 1/2 near lambda = {sweep.crossing:.4g}")
    if mono is not None:
        verdict = "holds" if mono["pass"] else \
            f"violated at {len(mono['violations'])} pair(s)"
        lines.append(f"Laplace monotonicity {verdict} within 3 SE")
    params = {k: v for k, v in payload.items() if k != "model"}
    _emit("sweep", settings["seed"], doc, params, out,
          [out / "sweep.csv", out / "sweep.svg"], "\n".join(lines))
    return 0


def cmd_kernel(args, settings, client) -> int:
    doc = _resolve_model(settings["model"])
    payload = {
        "model": doc,
        "t": settings["t"],
        "hoeffdingQ": settings["hoeffding_q"] or None,
        "tGrid": settings["t_grid"],
        "kGridPerT": settings["k_grid_per_t"],
    }
    resp = client.post("/kernel", payload)
    out = args.out_dir
    radius = resp["boxRadius"]
    side = 2 * radius + 1
    dense = np.zeros((side,) * resp["dimension"])
    for site, p in zip(resp["sites"], resp["probabilities"]):
        dense[tuple(c + radius for c in site)] = p
    kern = TransitionKernel(time=resp["t"], dimension=resp["dimension"],
                            box_radius=radius, probabilities=dense,
                            truncation_error=resp["truncationError"])
    export_kernel_csv(kern, out / "kernel.csv")
    summary = {k: resp[k] for k in
               ("t", "dimension", "boxRadius", "truncationError", "total")}
    summary["hoeffding"] = resp["hoeffding"]
    _write_json(summary, out / "kernel.json")
    lines = [f"kernel: t = {resp['t']:g}, d = {resp['dimension']}, "
             f"box radius {radius}, "
             f"truncation error {resp['truncationError']:.3g}"]
    if resp["hoeffding"] is not None:
        c = resp["hoeffding"]["fittedC"]
        lines.append(f"Gaussian tail bound holds with c = {c:.6g}"
                     if c > 0.0 else "Gaussian tail bound FAILED")
    params = {k: v for k, v in payload.items() if k != "model"}
    _emit("kernel", 0, doc, params, out,
          [out / "kernel.csv", out / "kernel.json"], "\n".join(lines))
    return 0


def cmd_greens(args, settings, client) -> int:
    doc = _resolve_model(settings["model"])
    payload = {
        "model": doc,
        "shells": settings["shells"],
        "nodes": settings["nodes"] or None,
        "mcHorizon": settings["mc_horizon"],
        "mcReplicas": settings["mc_replicas"],
        "mcSeed": settings["mc_seed"],
        "noiseLevel": settings["noise_level"] or None,
        "initialMass": 1.0,
    }
    resp = client.post("/greens", payload)
    out = args.out_dir
    report = GreensReport(
        upsilon_zero=resp["upsilonZero"],
        return_probability=resp["returnProbability"],
        quadrature_error=resp["quadratureError"],
        mc_estimate=resp["mcEstimate"], mc_se=resp["mcSe"],
        trace=tuple(tuple(row) for row in resp["trace"]))
    export_trace_csv(report, out / "trace.csv")
    _write_json({k: v for k, v in resp.items() if k not in ("trace", "model")},
                out / "greens.json")
    lines = [f"greens: Upsilon(0) = {resp['upsilonZero']:.10g} "
             f"(quadrature error {resp['quadratureError']:.2g}, "
             f"MC {resp['mcEstimate']:.4g} +- {resp['mcSe']:.2g})",
             f"return probability {resp['returnProbability']:.10g}, "
             f"survival-phase bound lambda > {resp['lambdaLowerBound']:.6g}"]
    if resp["secondMoment"] is not None:
        lines.append(f"second moment bound {resp['secondMoment']:.6g}, "
                     f"survival floor {resp['survivalFloor']:.6g} "
                     f"at lambda = {settings['noise_level']:g}")
    params = {k: v for k, v in payload.items() if k != "model"}
    _emit("greens", settings["mc_seed"], doc, params, out,
          [out / "greens.json", out / "trace.csv"], "\n".join(lines))
    return 0


def cmd_odeclass(args, settings, client) -> int:
    if not settings["csv"]:
        raise ConfigError("odeclass needs a csv (flag --csv or config key)")
    times, values, errors = _read_series_csv(settings["csv"])
    payload = {
        "times": times.tolist(),
        "values": values.tolist(),
        "errors": errors.tolist() if errors.any() else None,
        "delta": settings["delta"],
        "alpha": settings["alpha"] or None,
        "gamma": settings["gamma"] or None,
        "windowA": settings["window_a"],
        "windowB": settings["window_b"],
        "rescale": settings["rescale"],
    }
    resp = client.post("/odeclass", payload)
    out = args.out_dir
    _write_json(resp, out / "odeclass.json")
    mem = resp["membership"]
    exp = resp["exponent"]
    source = "fitted from data" if resp["fitted"] else "given"
    lines = [f"odeclass: alpha = {resp['alpha']:.6g}, "
             f"gamma = {resp['gamma']:.6g} ({source}), "
             f"delta = {settings['delta']:g}",
             f"membership {'PASS' if mem['pass'] else 'FAIL'} "
             f"(worst margin {mem['worst_margin']:.3g} at "
             f"t = {mem['worst_time']:g}, K = {mem['argmax_k']:.4g})"]
    if exp["kind"] == "power":
        lines.append(f"implied decay exponent nu = {exp['nu']:.6g}")
    else:
        lines.append("implied decay scale sqrt(log t)")
    if resp["decay"] is not None:
        dec = resp["decay"]
        lines.append(f"decay conclusion "
                     f"{'PASS' if dec['pass'] else 'FAIL'} "
                     f"(limsup estimate {dec['limsup_estimate']:.3g})")
    series_doc = {"times": payload["times"], "values": payload["values"]}
    _emit("odeclass", 0, series_doc,
          {k: v for k, v in payload.items()
           if k not in ("times", "values", "errors")},
          out, [out / "odeclass.json"], "\n".join(lines))
    return 0


def cmd_continuum(args, settings, client) -> int:
    payload = {
        "noiseLevel": settings["noise_level"],
        "horizon": settings["horizon"],
        "gridSpacing": settings["grid_spacing"],
        "timeStep": settings["time_step"] or None,
        "halfWidth": settings["half_width"] or None,
        "replicaCount": settings["replica_count"],
        "rngSeed": settings["seed"],
        "samplesPerDecade": settings["samples_per_decade"],
        "extinctionCutoff": settings["extinction_cutoff"],
        "sigma": {"kind": "linear", "lip": settings["sigma_lip"]},
        "threads": settings["threads"],
    }
    resp = client.post("/continuum", payload)
    _print_warnings(resp)
    out = args.out_dir
    runs = _trajectories(resp["replicas"])
    export_trajectories_csv(runs, out / "continuum.csv")
    final = np.array([tr.mass[-1] for tr in runs])
    params = dict(payload)
    params["timeStep"] = resp["timeStep"]
    params["halfWidth"] = resp["halfWidth"]
    _emit("continuum", settings["seed"], payload["sigma"], params, out,
          [out / "continuum.csv"],
          f"continuum: {len(runs)} replicas to T = {settings['horizon']:g} "
          f"at lambda = {settings['noise_level']:g}, "
          f"dx = {settings['grid_spacing']:g}, dt = {resp['timeStep']:g}; "
          f"mean final mass {final.mean():.6g}")
    return 0


def cmd_fit(args, settings, client) -> int:
    if not settings["csv"]:
        raise ConfigError("fit needs a csv (flag --csv or config key)")
    times, estimates, se = _read_series_csv(settings["csv"])
    payload = {
        "times": times.tolist(),
        "estimates": estimates.tolist(),
        "standardErrors": se.tolist(),
        "eta": settings["eta"],
        "law": settings["law"],
    }
    resp = client.post("/fit", payload)
    out = args.out_dir
    _write_json(resp, out / "fit.json")
    series = MomentSeries(eta=settings["eta"], times=times,
                          estimates=estimates, standard_errors=se)
    fit = {"law": resp["law"], "rate": resp["rate"],
           "intercept": resp["intercept"], "se": resp["se"]}
    plot_decay_fit(series, fit, out / "decay_fit.svg")
    lo, hi = resp["ci"]
    series_doc = {"times": payload["times"],
                  "estimates": payload["estimates"]}
    _emit("fit", 0, series_doc,
          {"law": settings["law"], "eta": settings["eta"],
           "csv": str(settings["csv"])},
          out, [out / "fit.json", out / "decay_fit.svg"],
          f"fit ({resp['law']}): rate = {resp['rate']:.6g} "
          f"+- {resp['se']:.2g}, 95% CI [{lo:.6g}, {hi:.6g}] "
          f"on {resp['nPoints']} points")
    return 0


def cmd_report(args, settings, client) -> int:
    path = Path(args.manifest) if args.manifest else \
        args.out_dir / settings["manifest"]
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    result = verify_manifest(path)
    print(f"campaign {doc['campaignId']} ({doc['command']}, "
          f"seed {doc['seed']}, code {doc['codeVersion']})")
    print(f"model hash {doc['modelHash'][:16]}..., "
          f"started {doc['startedAt']}, finished {doc['finishedAt']}")
    for entry in doc["outputs"]:
        if entry["path"] in result["missing"]:
            state = "MISSING"
        elif entry["path"] in result["mismatched"]:
            state = "MISMATCH"
        else:
            state = "ok"
        print(f"  {entry['path']}: {state} ({entry['sha256'][:16]}...)")
    print(f"verification {'PASS' if result['ok'] else 'FAIL'}: "
          f"{result['checked']} output(s) checked")
    return 0 if result["ok"] else 1


def cmd_serve(args, settings, client) -> int:
    import uvicorn

    from .service.app import app
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --- argument parsing ----------------------------------------------------

class _HelpConfig(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        print(help_config())
        parser.exit()


_FLAG_KEYS = {
    # flag dest -> config key it overrides
    "noise_level": "noise_level",
    "horizon": "horizon",
    "replicas": "replicas",
    "replica_count": "replica_count",
    "lambdas": "lambdas",
    "t": "t",
    "hoeffding_q": "hoeffding_q",
    "shells": "shells",
    "csv": "csv",
    "delta": "delta",
    "alpha": "alpha",
    "gamma": "gamma",
    "law": "law",
    "eta": "eta",
    "grid_spacing": "grid_spacing",
    "model": "model",
    "seed": "seed",
    "threads": "threads",
    "time_step": "time_step",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissipation",
        description="Simulation and verification campaigns for mass "
                    "dissipation in lattice stochastic heat equations.")
    parser.add_argument("--version", action="version",
                        version=f"dissipation {__version__}")
    parser.add_argument("--help-config", action=_HelpConfig, nargs=0,
                        help="print the config file schema and exit")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="TOML config file")
    common.add_argument("--out-dir", type=Path, default=Path("out"),
                        help="artifact directory (default: out)")
    common.add_argument("--server", default=None,
                        help="service URL; default runs in process")
    common.add_argument("--seed", type=int, default=None,
                        help="override the campaign seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads")

    modeled = argparse.ArgumentParser(add_help=False)
    modeled.add_argument("--model", default=None,
                         help="builtin name (srw1..srw4) or model JSON path")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common],
                       help="check a model document")
    p.add_argument("model", help="builtin name or model JSON path")

    p = sub.add_parser("simulate", parents=[common, modeled],
                       help="run a lattice campaign")
    p.add_argument("--noise-level", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--replica-count", type=int, default=None)
    p.add_argument("--time-step", type=float, default=None)

    p = sub.add_parser("sweep", parents=[common, modeled],
                       help="survival curves over a noise-level grid")
    p.add_argument("--lambdas", default=None,
                   help="grid: 'a:b:n' (geometric) or comma-separated list")
    p.add_argument("--d", type=int, default=None, choices=(1, 2, 3, 4),
                   help="shorthand for --model srw<d>")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--replicas", type=int, default=None)

    p = sub.add_parser("kernel", parents=[common, modeled],
                       help="transition kernel table and tail bound")
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--hoeffding-q", type=float, default=None)

    p = sub.add_parser("greens", parents=[common, modeled],
                       help="Green's function constants and moment bounds")
    p.add_argument("--shells", type=int, default=None)
    p.add_argument("--noise-level", type=float, default=None)

    p = sub.add_parser("odeclass", parents=[common],
                       help="differential-inequality membership check")
    p.add_argument("--csv", default=None, help="columns t,value[,error]")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)

    p = sub.add_parser("continuum", parents=[common],
                       help="interval solver campaign")
    p.add_argument("--noise-level", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--grid-spacing", type=float, default=None)
    p.add_argument("--replica-count", type=int, default=None)

    p = sub.add_parser("fit", parents=[common],
                       help="decay-law fit of a moment series")
    p.add_argument("--csv", default=None, help="columns t,estimate[,se]")
    p.add_argument("--law", default=None, choices=("d1", "d2"))
    p.add_argument("--eta", type=float, default=None)

    p = sub.add_parser("report", parents=[common],
                       help="verify a campaign manifest")
    p.add_argument("manifest", nargs="?", default=None,
                   help="manifest path (default: <out-dir>/manifest.json)")

    p = sub.add_parser("serve", parents=[common],
                       help="run the service over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


_HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "kernel": cmd_kernel,
    "greens": cmd_greens,
    "odeclass": cmd_odeclass,
    "continuum": cmd_continuum,
    "fit": cmd_fit,
    "report": cmd_report,
    "serve": cmd_serve,
}

# sections that honor the generic --seed / --threads flags
_SEEDED = {"simulate", "sweep", "continuum"}
_THREADED = {"simulate", "sweep", "continuum"}


def _merge_settings(args) -> dict:
    name = args.command
    if name in ("serve", "validate"):
        return {}
    cfg = load_config(args.config) if args.config else {}
    settings = section(cfg, name)
    for dest, key in _FLAG_KEYS.items():
        if key not in settings:
            continue
        value = getattr(args, dest, None)
        if value is not None:
            settings[key] = value
    if args.seed is not None and name in _SEEDED:
        settings["seed"] = args.seed
    if args.threads is not None and name in _THREADED:
        settings["threads"] = args.threads
    return settings


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        settings = _merge_settings(args)
        if args.command not in ("serve", "report", "validate"):
            args.out_dir.mkdir(parents=True, exist_ok=True)
        client = None
        if args.command not in ("report", "serve"):
            client = ServiceClient(args.server)
        return _HANDLERS[args.command](args, settings, client)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ConnectionFailed, FileNotFoundError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
