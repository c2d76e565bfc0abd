"""Figures written next to CLI artifacts (headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dos import DOSCurve, FitResult, weyl_constant  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(curves, d: int, path):
    """N(λ) minus the Weyl term, with error bars, one series per curve."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.4, 6.0), sharex=True)
    for curve in curves:
        weyl = weyl_constant(d) * curve.lambdas ** (d / 2)
        top.plot(curve.lambdas, curve.values, marker="o", ms=3, label=curve.method)
        bottom.errorbar(curve.lambdas, curve.values - weyl, yerr=curve.stderr, fmt="o", ms=3,
                        capsize=2, label=curve.method)
    top.set_ylabel("N(λ)")
    top.legend()
    bottom.axhline(0.0, color="0.6", lw=0.8)
    bottom.set_xlabel("λ")
    bottom.set_ylabel("N(λ) − C_d λ^{d/2}")
    return _save(fig, path)


def plot_fit(curve: DOSCurve, fit: FitResult, path):
    """Data against the fitted expansion, and normalized residuals."""
    powers = []
    for term in fit.terms:
        base, _, logpart = term.partition("*")
        p = float(base.split("^")[1])
        q = int(logpart.split("^")[1]) if logpart else 0
        powers.append((p, q))
    lam = curve.lambdas
    X = np.stack([lam ** p * np.log(lam) ** q for p, q in powers], axis=1)
    model = X @ fit.values
    scale = np.where(curve.stderr > 0, curve.stderr, 1.0)
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.4, 6.0), sharex=True)
    top.plot(lam, curve.values, "o", ms=3, label=curve.method)
    grid = np.geomspace(lam.min(), lam.max(), 200)
    Xg = np.stack([grid ** p * np.log(grid) ** q for p, q in powers], axis=1)
    top.plot(grid, Xg @ fit.values, "-", lw=1, label="fit")
    top.set_xscale("log")
    top.set_ylabel("N(λ)")
    top.legend()
    bottom.plot(lam, (curve.values - model) / scale, "o", ms=3)
    bottom.axhline(0.0, color="0.6", lw=0.8)
    bottom.set_xlabel("λ")
    bottom.set_ylabel("residual / stderr")
    return _save(fig, path)


def plot_residue_errors(rows, path):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    err = np.array([max(r["relative_error"], 1e-18) for r in rows])
    sizes = np.array([r["size"] for r in rows])
    ax.scatter(np.arange(len(rows)), err, c=sizes, s=12, cmap="viridis")
    ax.axhline(1e-8, color="C3", lw=0.8, ls="--")
    ax.set_yscale("log")
    ax.set_xlabel("family")
    ax.set_ylabel("relative error")
    return _save(fig, path)


def plot_norms(diagnostics: dict, path):
    """Norm estimates of ψ_l, B_l and T_l by order."""
    orders = diagnostics["orders"]
    l = [o["order"] for o in orders]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for key, label in (("norm_psi", "ψ"), ("norm_B", "B"), ("norm_T", "T")):
        vals = np.array([max(o[key], 1e-300) for o in orders])
        ax.semilogy(l, vals, marker="o", label=label)
    ax.set_xlabel("order")
    ax.set_ylabel("norm estimate")
    ax.set_xticks(l)
    ax.legend()
    return _save(fig, path)
