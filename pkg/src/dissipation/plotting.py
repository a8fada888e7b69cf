"""Static SVG figures for decay fits and noise-level sweeps.

Output is byte-deterministic: element ids are salted with a fixed
string, text stays text instead of font outlines, and no timestamp is
embedded.  Rendering the same data twice gives identical files, which
lets plots participate in the campaign reproducibility contract.
"""

import matplotlib
import numpy as np
from matplotlib.figure import Figure

_SAVE_STYLE = {"svg.hashsalt": "dissipation", "svg.fonttype": "none"}


def _save(fig: Figure, path) -> None:
    with matplotlib.rc_context(_SAVE_STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})


def plot_decay_fit(series, fit: dict, path) -> None:
    """Log moments against the decay regressor, with the fitted line.

    The regressor is t^(1/3) for law d1 and sqrt(log t) for d2, so the
    claimed decay appears as a straight line of slope -rate.
    """
    keep = series.times >= 1.0
    t = series.times[keep]
    y = series.estimates[keep]
    se = series.standard_errors[keep]
    x = np.cbrt(t) if fit["law"] == "d1" else np.sqrt(np.log(t))
    xlabel = "t^(1/3)" if fit["law"] == "d1" else "sqrt(log t)"

    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.subplots()
    with np.errstate(divide="ignore", invalid="ignore"):
        logy = np.log(y)
        yerr = np.where(y > 0.0, se / np.maximum(y, 1e-300), 0.0)
    ax.errorbar(x, logy, yerr=yerr, fmt="o", ms=3.0, lw=0.8, capsize=2.0,
                color="#1f4e79", label=f"moments (eta={series.eta:g})")
    line = fit["intercept"] - fit["rate"] * x
    ax.plot(x, line, color="#c0392b", lw=1.2,
            label=f"slope -{fit['rate']:.4g} +- {fit['se']:.2g}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("log E[m_t^eta]")
    ax.legend(frameon=False, fontsize=9)
    ax.grid(alpha=0.25, lw=0.5)
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(sweep, path) -> None:
    """Survival and Laplace curves over the noise-level grid."""
    fig = Figure(figsize=(8.0, 3.6))
    ax_s, ax_l = fig.subplots(1, 2)
    lam = sweep.lambda_grid

    ax_s.errorbar(lam, sweep.survival, yerr=sweep.survival_se, fmt="o-",
                  ms=3.5, lw=1.0, capsize=2.0, color="#1f4e79")
    ax_s.axhline(0.5, color="0.6", lw=0.7, ls=":")
    if sweep.crossing is not None:
        ax_s.axvline(sweep.crossing, color="#c0392b", lw=0.9, ls="--",
                     label=f"crossing {sweep.crossing:.3g}")
        ax_s.legend(frameon=False, fontsize=9)
    ax_s.set_xscale("log")
    ax_s.set_xlabel("lambda")
    ax_s.set_ylabel(f"P(m_T > {sweep.threshold:g})")
    ax_s.set_ylim(-0.05, 1.05)
    ax_s.grid(alpha=0.25, lw=0.5)

    ax_l.errorbar(lam, sweep.laplace, yerr=sweep.laplace_se, fmt="s-",
                  ms=3.5, lw=1.0, capsize=2.0, color="#2e7d32")
    ax_l.set_xscale("log")
    ax_l.set_xlabel("lambda")
    ax_l.set_ylabel("E[exp(-m_T)]")
    ax_l.grid(alpha=0.25, lw=0.5)

    fig.suptitle(f"noise-level sweep, T = {sweep.horizon:g}", fontsize=11)
    fig.tight_layout()
    _save(fig, path)
