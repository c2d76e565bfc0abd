"""Self-checks run by `idsasym verify`: each returns a JSON-ready record with a `passed` flag."""

from __future__ import annotations

import math

import numpy as np

from .dos import ModelIntegralSpec, model_integral_quadrature, model_integral_series, random_model_spec
from .potential import Potential, ScaleParameters
from .spectral import conjugation_discrepancy, residue_suite
from .symbols import EvalSession, Symbol, gauge_diagnostics, gauge_transform, partition


def residue_check(count: int = 100, seed: int = 0, rel_tol: float = 1e-8, count_tol: float = 1e-6) -> dict:
    rows = residue_suite(count, seed)
    worst = max(r["relative_error"] for r in rows)
    worst_count = max(r["count_error"] for r in rows)
    return {"families": count, "seed": seed, "max_relative_error": worst, "max_count_error": worst_count,
            "tolerance": rel_tol, "passed": bool(worst <= rel_tol and worst_count <= count_tol), "rows": rows}


def k1_closed_form(spec: ModelIntegralSpec) -> float:
    """(1/(ρ b)) ln(1 + ργ b / l) for K = 1, one factor with k = 1, k′ = 0 and n = 0."""
    b, l, g, r = float(spec.b[0, 0]), spec.l[0], spec.gamma, spec.rho
    return math.log1p(r * g * b / l) / (r * b)


def model_integral_check(specs: int = 20, seed: int = 0, rel_tol: float = 1e-6) -> dict:
    """K = 1 series against its closed-form expansion, then random K = 2 specs."""
    b1, l1, gamma = 1.3, 2.0, 0.7
    spec = ModelIntegralSpec(K=1, n=(0,), k=(1,), k_prime=(0,), l=(l1,), c=(1.0,), b=[[b1]], b_tilde=[[0.0]],
                             gamma=gamma)
    rhos = np.geomspace(50, 5000, 40)
    fit = model_integral_series(spec, rhos, p_max=8)
    # J = (1/(ρb))[ln ρ + ln(γb/l)] + O(ρ^{-2})
    want_log = 1.0 / b1
    want_const = math.log(gamma * b1 / l1) / b1
    got_log = fit.coefficients[(1, 1)]
    got_const = fit.coefficients[(1, 0)]
    err_log = abs(got_log - want_log) / abs(want_log)
    err_const = abs(got_const - want_const) / abs(want_const)
    quad_err = max(abs(model_integral_quadrature(spec.at(r)) - k1_closed_form(spec.at(r))) / k1_closed_form(spec.at(r))
                   for r in rhos[::8])
    k1 = {"log_coefficient": got_log, "expected_log_coefficient": want_log, "log_relative_error": err_log,
          "constant_coefficient": got_const, "expected_constant_coefficient": want_const,
          "constant_relative_error": err_const, "quadrature_relative_error": quad_err,
          "passed": bool(err_log < rel_tol and err_const < rel_tol and quad_err < 1e-8)}
    rng = np.random.default_rng(seed)
    rhos2 = np.geomspace(50, 5e4, 40)
    residuals = []
    for _ in range(specs):
        s = random_model_spec(rng)
        residuals.append(model_integral_series(s, rhos2, p_max=6).relative_residual)
    k2 = {"specs": specs, "seed": seed, "max_relative_residual": max(residuals), "threshold": 1e-4,
          "passed": bool(max(residuals) < 1e-4)}
    return {"K1": k1, "K2": k2, "passed": k1["passed"] and k2["passed"]}


def partition_check(b: Potential, params: ScaleParameters, samples: int = 1000, seed: int = 3,
                    tol: float = 1e-14) -> dict:
    """The five parts of b sum back to b at every frequency and sample point."""
    sym = Symbol.from_potential(b)
    parts = partition(sym, params)
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 6 * params.rho_n, samples)
    dirs = rng.normal(size=(samples, b.dim))
    xi = r[:, None] * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    worst = 0.0
    with EvalSession():
        for _, (theta, c) in sym.items():
            total = sum(p.coeff(theta, xi) for p in parts.values())
            worst = max(worst, float(np.max(np.abs(total - c(xi)))))
    return {"samples": samples, "max_residual": worst, "tolerance": tol, "passed": bool(worst < tol)}


def gauge_check(b: Potential, params: ScaleParameters, oracle_radius: float | None = 60.0,
                commutator_tol: float = 1e-10, symmetry_tol: float = 1e-12) -> dict:
    """Commutator equations, symmetry, support/block laws and (optionally) the matrix oracle."""
    res = gauge_transform(Symbol.from_potential(b), params)
    diag = gauge_diagnostics(res)
    comm = max(o["commutator_residual"] for o in diag["orders"])
    sym = max([o["psi_symmetry"] for o in diag["orders"]] + [diag["Y_symmetry"], diag["W_symmetry"]])
    out = {"k_tilde": res.k_tilde, "max_commutator_residual": comm, "max_symmetry_residual": sym,
           "support_law": diag["support_law"], "block_law": diag["block_law"]["passed"], "diagnostics": diag}
    ok = comm < commutator_tol and sym < symmetry_tol and diag["support_law"] and diag["block_law"]["passed"]
    if oracle_radius:
        series = [conjugation_discrepancy(b, params, k, oracle_radius) for k in range(1, res.k_tilde + 1)]
        decreasing = all(b2 < b1 for b1, b2 in zip(series, series[1:]))
        out["conjugation_discrepancy"] = series
        out["discrepancy_decreasing"] = decreasing
        ok = ok and decreasing
    out["passed"] = bool(ok)
    return out

