"""Campaign configuration: one TOML document, one flat section per command.

Every key is optional; defaults live in the schema table below and
``section`` fills them in.  Unknown sections or keys are rejected so a
typo cannot silently fall back to a default.  Command-line flags override
config values, which override defaults.
"""

import importlib.resources
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed configuration document or value."""


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ConfigError(f"expected a string, got {v!r}")
    return v


def _numlist(v):
    if isinstance(v, str):
        return v                      # grid shorthand, parsed downstream
    if not isinstance(v, list):
        raise ConfigError(f"expected a list of numbers, got {v!r}")
    return [_num(x) for x in v]


# key -> (caster, default, help); section order is the display order
SCHEMA = {
    "simulate": {
        "model": (_str, "srw1", "model-v1 JSON path or builtin srw1..srw4"),
        "noise_level": (_num, 1.0, "lambda"),
        "initial_mass": (_num, 1.0, "c_0"),
        "horizon": (_num, 10.0, "T"),
        "time_step": (_num, 0.0, "dt; 0 picks the stable step for lambda"),
        "replica_count": (_int, 100, "independent replicas"),
        "seed": (_int, 0, "base RNG seed"),
        "samples_per_decade": (_int, 60, "sample-grid density"),
        "extinction_cutoff": (_num, 1e-30, "freeze below cutoff * c_0"),
        "box_kind": (_str, "fixed", "fixed | scheduled | adaptive"),
        "box_radius": (_int, 0, "fixed-box radius; 0 = horizon formula"),
        "box_trigger": (_num, 1e-6, "adaptive growth trigger"),
        "threads": (_int, 1, "worker threads"),
    },
    "sweep": {
        "model": (_str, "srw3", "model-v1 JSON path or builtin name"),
        "lambdas": (_numlist, "0.5:8:6",
                    "list, or 'a:b:n' for n geometric points"),
        "horizon": (_num, 50.0, "T"),
        "replicas": (_int, 200, "replicas per lambda (coupled seeds)"),
        "seed": (_int, 0, "base RNG seed"),
        "threshold": (_num, 0.0, "survival threshold; 0 = c_0 / 4"),
        "time_step": (_num, 0.0, "dt; 0 picks per-lambda stable steps"),
        "threads": (_int, 1, "worker threads"),
    },
    "kernel": {
        "model": (_str, "srw1", "model-v1 JSON path or builtin name"),
        "t": (_num, 1.0, "evaluation time"),
        "hoeffding_q": (_num, 0.0, "tail check with K <= q t; 0 skips"),
        "t_grid": (_numlist, [], "times for the tail check"),
        "k_grid_per_t": (_int, 0, "subsample K values; 0 = all integers"),
    },
    "greens": {
        "model": (_str, "srw3", "model-v1 JSON path or builtin name"),
        "shells": (_int, 7, "quadrature shell count"),
        "nodes": (_int, 0, "Gauss nodes per axis; 0 = dimension default"),
        "mc_horizon": (_num, 1000.0, "local-time simulation horizon"),
        "mc_replicas": (_int, 4000, "difference-walk replicas"),
        "mc_seed": (_int, 0, "cross-check RNG seed"),
        "noise_level": (_num, 0.0,
                        "also report moment bounds at this lambda; 0 skips"),
    },
    "odeclass": {
        "csv": (_str, "", "sampled function, columns t,value[,error]"),
        "delta": (_num, 1.0, "class exponent"),
        "alpha": (_num, 0.0, "drift coefficient; 0 fits it from the data"),
        "gamma": (_num, 0.0, "comparison rate; 0 fits it from the data"),
        "window_a": (_num, 1.0, "K window lower edge"),
        "window_b": (_num, 2.0, "K window upper edge multiplier (K <= b t)"),
        "rescale": (_num, 1.0, "multiply values before checking"),
    },
    "continuum": {
        "noise_level": (_num, 1.0, "lambda"),
        "horizon": (_num, 1.0, "T"),
        "grid_spacing": (_num, 0.1, "dx"),
        "time_step": (_num, 0.0, "dt; 0 picks the noise-aware stable step"),
        "half_width": (_num, 0.0, "interval half-width; 0 = 5 sqrt(T) + 10"),
        "replica_count": (_int, 100, "independent replicas"),
        "seed": (_int, 0, "base RNG seed"),
        "samples_per_decade": (_int, 60, "sample-grid density"),
        "extinction_cutoff": (_num, 1e-30, "freeze below cutoff * mass(0)"),
        "sigma_lip": (_num, 1.0, "slope of the linear nonlinearity"),
        "threads": (_int, 1, "worker threads"),
    },
    "fit": {
        "csv": (_str, "", "moment series, columns t,estimate[,se]"),
        "law": (_str, "d1", "decay law: d1 (t^(1/3)) or d2 (sqrt(log t))"),
        "eta": (_num, 0.5, "moment order, echoed on the plot"),
    },
    "report": {
        "manifest": (_str, "manifest.json", "manifest file to verify"),
    },
}


def load_config(path) -> dict:
    """Parse and validate a TOML config; returns {section: {key: value}}.

    Values are type-checked against the schema but defaults are not
    filled in; use ``section`` for a complete view of one command.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    out = {}
    for name, table in doc.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a section, not a value")
        keys = SCHEMA[name]
        parsed = {}
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                parsed[key] = keys[key][0](value)
            except ConfigError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
        out[name] = parsed
    return out


def section(config: dict, name: str) -> dict:
    """One command's settings with schema defaults filled in."""
    if name not in SCHEMA:
        raise ConfigError(f"unknown section [{name}]")
    values = {key: default for key, (_, default, _) in SCHEMA[name].items()}
    values.update(config.get(name, {}))
    return values


def parse_grid(spec) -> np.ndarray:
    """Noise-level grid from a list or an 'a:b:n' geometric shorthand."""
    if isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid shorthand must be 'a:b:n', got {spec!r}")
        try:
            a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError(f"bad grid shorthand {spec!r}") from None
        if a <= 0.0 or b <= a or n < 2:
            raise ConfigError("grid shorthand needs 0 < a < b and n >= 2")
        return np.geomspace(a, b, n)
    grid = np.asarray(spec, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("grid must be a nonempty list of numbers")
    return grid


def help_config() -> str:
    """Render the full schema with defaults, for --help-config."""
    lines = ["Config file sections (TOML; all keys optional):", ""]
    for name, keys in SCHEMA.items():
        lines.append(f"[{name}]")
        for key, (_, default, text) in keys.items():
            shown = f'"{default}"' if isinstance(default, str) else default
            lines.append(f"  {key} = {shown}")
            lines.append(f"      {text}")
        lines.append("")
    return "\n".join(lines)


def data_path(name: str) -> Path:
    """Path of a data file shipped with the package."""
    return Path(importlib.resources.files("dissipation") / "data" / name)
