"""IDS curves, asymptotic fits, closed-form coefficients and the model integral J_K."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import comb, gamma as gamma_fn

from .potential import FREQ_TOL, Potential, ScaleParameters
from .symbols import EvalSession, Symbol, gauge_transform, norm_estimate, norm_grid
from .spectral import g_values, periodic_dos

log = logging.getLogger(__name__)

CHUNK = 1 << 16
FAILURE_LIMIT = 1e-3


class DOSError(RuntimeError):
    pass


def ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / gamma_fn(d / 2 + 1)


def weyl_constant(d: int) -> float:
    """C_d = w_d / (2π)^d."""
    return ball_volume(d) / (2 * math.pi) ** d


# ----------------------------------------------------------------------- curves


@dataclass
class DOSCurve:
    lambdas: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if np.any(np.diff(self.lambdas) <= 0):
            raise DOSError("curve energies must be strictly ascending")

    def monotone_violations(self) -> int:
        """Steps where N decreases by more than twice the combined standard error."""
        drop = self.values[:-1] - self.values[1:]
        tol = 2 * np.hypot(self.stderr[:-1], self.stderr[1:])
        return int(np.sum(drop > tol))

    def to_csv(self, path=None, provenance: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (provenance or {}).items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda", "N", "stderr", "method"])
        for lam, val, err in zip(self.lambdas, self.values, self.stderr):
            writer.writerow([repr(float(lam)), repr(float(val)), repr(float(err)), self.method])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path, method: str | None = None) -> "DOSCurve":
        """Read a curve; files holding several methods need `method` unless the first is wanted."""
        lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
        rows = list(csv.DictReader(lines))
        if rows and method is None:
            method = rows[0]["method"]
        rows = [r for r in rows if r["method"] == method]
        if not rows:
            raise DOSError(f"{path} holds no curve rows for method {method!r}")
        return cls([float(r["lambda"]) for r in rows], [float(r["N"]) for r in rows],
                   [float(r["stderr"]) for r in rows], rows[0]["method"])


# ----------------------------------------------------------------- volume DOS


@dataclass
class VolumeEstimate:
    value: float
    stderr: float
    samples: int
    cluster_solves: int
    failures: int
    shell: tuple
    outside_margin: int


def _shell_samples(rng, n, d, r_lo, r_hi):
    u = rng.random(n)
    r = (r_lo ** d + u * (r_hi ** d - r_lo ** d)) ** (1.0 / d)
    if d == 1:
        dirs = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
    else:
        dirs = rng.normal(size=(n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return r[:, None] * dirs


def volume_dos(w: Symbol, lam: float, geometry=None, n_samples: int = 1_000_000, seed: int = 0,
               delta: float | None = None, workers: int = 1, params: ScaleParameters | None = None,
               chunk: int = CHUNK) -> VolumeEstimate:
    """(2π)^{-d}(w_d ρ^d + vol Â⁺ − vol Â⁻) with ρ = √λ, Â± sampled uniformly in the energy shell.

    Each chunk of samples owns a child stream of the seed, and chunk sums are reduced in
    chunk order, so the result does not depend on the worker count.
    """
    d = w.dim
    if params is not None and not params.lambda_n <= lam <= 16 * params.lambda_n:
        log.warning("λ = %g lies outside the validated window [%g, %g]", lam, params.lambda_n, 16 * params.lambda_n)
    rho = math.sqrt(lam)
    base = ball_volume(d) * rho ** d / (2 * math.pi) ** d
    if delta is None:
        P = params or ScaleParameters.default(d, max(rho, 2.0))
        delta = norm_estimate(w, 0.0, 0, norm_grid(d, P)) + 1.0
    r_lo = math.sqrt(max(lam - delta, 0.0))
    r_hi = math.sqrt(lam + delta)
    shell_vol = ball_volume(d) * (r_hi ** d - r_lo ** d)
    trivial = all(np.linalg.norm(v) < FREQ_TOL for v in w.support()) and len(w) == 0
    if trivial:
        return VolumeEstimate(base, 0.0, 0, 0, 0, (r_lo, r_hi), 0)
    n_chunks = max(1, math.ceil(n_samples / chunk))
    children = np.random.SeedSequence(seed).spawn(n_chunks)

    def run(i):
        size = min(chunk, n_samples - i * chunk)
        rng = np.random.Generator(np.random.Philox(children[i]))
        xi = _shell_samples(rng, size, d, r_lo, r_hi)
        with EvalSession():
            g, solves, fails = g_values(w, xi, geometry)
        free = np.sum(xi ** 2, axis=1)
        ok = ~np.isnan(g)
        D = (g[ok] <= lam).astype(float) - (free[ok] <= lam).astype(float)
        outside = int(np.sum(np.abs(g[ok] - free[ok]) > delta))
        return D.sum(), (D * D).sum(), int(ok.sum()), solves, fails, outside

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(n_chunks)))
    else:
        parts = [run(i) for i in range(n_chunks)]
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    n = sum(p[2] for p in parts)
    solves = sum(p[3] for p in parts)
    fails = sum(p[4] for p in parts)
    outside = sum(p[5] for p in parts)
    if fails > FAILURE_LIMIT * n_samples:
        raise DOSError(f"{fails} cluster solves failed out of {n_samples} samples")
    if outside:
        log.warning("%d samples moved by more than the shell margin %.3g", outside, delta)
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    scale = shell_vol / (2 * math.pi) ** d
    return VolumeEstimate(base + scale * mean, scale * math.sqrt(var / n), n, solves, fails, (r_lo, r_hi), outside)


def gauge_volume_curve(b: Potential, params: ScaleParameters, lams, n_samples: int = 1_000_000,
                       seed: int = 0, workers: int = 1, k_tilde: int | None = None) -> DOSCurve:
    """IDS from vol{g <= λ} after the gauge transform of b."""
    from .geometry import ResonanceGeometry

    lams = np.sort(np.atleast_1d(np.asarray(lams, dtype=float)))
    sym = Symbol.from_potential(b)
    nonzero = [v for v, _ in b.items() if np.linalg.norm(v) > FREQ_TOL]
    if nonzero:
        res = gauge_transform(sym, params, k_tilde)
        w = res.W
        geometry = ResonanceGeometry(b.frequencies, params) if len(w) > 1 else None
    else:
        w, geometry = sym, None
    delta = norm_estimate(w, 0.0, 0, norm_grid(b.dim, params)) + 1.0
    vals, errs, info = [], [], []
    for i, lam in enumerate(lams):
        est = volume_dos(w, lam, geometry, n_samples, seed + i, delta, workers, params)
        vals.append(est.value)
        errs.append(est.stderr)
        info.append({"lambda": float(lam), "cluster_solves": est.cluster_solves, "failures": est.failures,
                     "outside_margin": est.outside_margin})
    return DOSCurve(lams, vals, errs, "gauge-volume", {"samples": n_samples, "seed": seed, "delta": delta,
                                                        "points": info})


def floquet_curve(b: Potential, lams, tol: float = 1e-5, quadrature: str = "linear", workers: int = 1,
                  lattice=None, n0: int | None = None, n_max: int | None = None) -> DOSCurve:
    res = periodic_dos(b, lams, tol=tol, quadrature=quadrature, workers=workers, lattice=lattice, n0=n0, n_max=n_max)
    return DOSCurve(res.lambdas, res.values, res.errors, "floquet",
                    {"grid": res.grid, "tolerance": tol, "converged": res.converged, "quadrature": quadrature})


def free_curve(d: int, lams) -> DOSCurve:
    lams = np.asarray(lams, dtype=float)
    return DOSCurve(lams, weyl_constant(d) * lams ** (d / 2), np.zeros_like(lams), "exact")


# ------------------------------------------------------------------------ fits


@dataclass
class FitResult:
    terms: list
    values: np.ndarray
    errors: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    chi2_reduced: float
    condition_number: float
    warnings: list = field(default_factory=list)

    def coefficient(self, term: str) -> tuple:
        i = self.terms.index(term)
        return float(self.values[i]), float(self.errors[i])

    @property
    def coefficients(self) -> dict:
        return {t: (float(v), float(e)) for t, v, e in zip(self.terms, self.values, self.errors)}

    def to_dict(self) -> dict:
        return {"coefficients": [{"term": t, "value": float(v), "stderr": float(e)}
                                 for t, v, e in zip(self.terms, self.values, self.errors)],
                "covariance": self.covariance.tolist(), "residual_norm": self.residual_norm,
                "chi2_reduced": self.chi2_reduced, "condition_number": self.condition_number,
                "warnings": self.warnings}


def _term_name(power: float, log_power: int) -> str:
    name = f"lambda^{power:g}"
    return name if log_power == 0 else f"{name}*log(lambda)^{log_power}"


def expansion_basis(d: int, J: int, include_logs: bool = False, max_log_power: int = 1) -> list:
    terms = []
    for j in range(J + 1):
        terms.append((d / 2 - j, 0))
        if include_logs and j >= 1:
            terms.extend((d / 2 - j, q) for q in range(1, max_log_power + 1))
    return terms


def fit_expansion(curve: DOSCurve, d: int, J: int, include_logs: bool = False, max_log_power: int = 1,
                  powers=None) -> FitResult:
    """Weighted least squares of N(λ) on {λ^{d/2−j} (log λ)^q}.

    `powers` overrides the default exponents with an explicit list.
    """
    lam, y, s = curve.lambdas, curve.values, curve.stderr.copy()
    terms = [(p, 0) for p in powers] if powers is not None else expansion_basis(d, J, include_logs, max_log_power)
    warnings = []
    if len(lam) < 3 * len(terms):
        raise DOSError(f"{len(lam)} points cannot support {len(terms)} terms (need at least {3 * len(terms)})")
    if lam.max() < 10 * lam.min():
        warnings.append("energy range spans less than one decade")
    positive = s[s > 0]
    if len(positive) == 0:
        s = np.ones_like(y)
        warnings.append("no standard errors available; unweighted fit")
    else:
        s = np.maximum(s, max(positive.min(), 1e-15 * float(np.abs(y).max())))
    X = np.stack([lam ** p * np.log(lam) ** q for p, q in terms], axis=1)
    A = X / s[:, None]
    rhs = y / s
    scale = np.linalg.norm(A, axis=0)
    As = A / scale
    cond = float(np.linalg.cond(As))
    if np.linalg.matrix_rank(As) < len(terms) or cond > 1e12:
        raise DOSError(f"design matrix is rank deficient (condition {cond:.3g}); use fewer terms")
    coef_s, *_ = np.linalg.lstsq(As, rhs, rcond=None)
    coef = coef_s / scale
    resid = rhs - As @ coef_s
    dof = max(len(y) - len(terms), 1)
    chi2 = float(resid @ resid) / dof
    cov_s = np.linalg.inv(As.T @ As) * max(1.0, chi2)
    cov = cov_s / np.outer(scale, scale)
    return FitResult([_term_name(p, q) for p, q in terms], coef, np.sqrt(np.diag(cov)), cov,
                     float(np.linalg.norm((y - X @ coef))), chi2, cond, warnings)


def reference_coefficients(b: Potential | None, d: int) -> dict:
    """C_d, e₁ = −d w_d M(b)/(2(2π)^d) and e₂ = d(d−2) w_d M(b²)/(8(2π)^d)."""
    wd = ball_volume(d)
    tp = (2 * math.pi) ** d
    mean = b.mean().real if b is not None else 0.0
    mean_sq = sum(abs(c) ** 2 for _, c in b.items()) if b is not None else 0.0
    return {"C_d": wd / tp, "w_d": wd, "e1": -d * wd / (2 * tp) * mean,
            "e2": d * (d - 2) * wd / (8 * tp) * mean_sq, "M_b": mean, "M_b2": mean_sq}


# -------------------------------------------------------------- model integral


@dataclass
class ModelIntegralSpec:
    """J_K = ∫_{0<Φ₁<…<Φ_K<γ} Π Φ_j^{n_j} / Π_t (l_t + ρ⟨b^t, Φ⟩)^{k_t} (c_t + ⟨b̃^t, Φ⟩)^{k′_t} dΦ."""
    K: int
    n: tuple
    k: tuple
    k_prime: tuple
    l: tuple
    c: tuple
    b: np.ndarray  # (T, K)
    b_tilde: np.ndarray  # (T, K)
    gamma: float
    rho: float = 1.0

    def __post_init__(self):
        if not 0 <= self.K <= 2:
            raise DOSError("model integrals are supported for K = 0, 1, 2")
        T = len(self.k)
        self.b = np.asarray(self.b, dtype=float).reshape(T, self.K)
        self.b_tilde = np.asarray(self.b_tilde, dtype=float).reshape(T, self.K)
        if len(self.n) != self.K or not (len(self.k_prime) == len(self.l) == len(self.c) == T):
            raise DOSError("exponent and parameter lengths disagree")
        if not 0 < self.gamma <= 1:
            raise DOSError("γ must lie in (0, 1]")
        if min(self.l, default=1.0) <= 0 or min(self.c, default=1.0) <= 0:
            raise DOSError("l_t and c_t must be positive")
        if np.any(self.b < 0) or np.any(self.b_tilde < 0):
            raise DOSError("b and b̃ entries must be non-negative so the denominators stay positive")

    @property
    def P(self) -> int:
        return int(sum(self.n))

    @property
    def Q(self) -> int:
        return int(sum(self.k))

    @property
    def Q_prime(self) -> int:
        return int(sum(self.k_prime))

    def at(self, rho: float) -> "ModelIntegralSpec":
        return ModelIntegralSpec(self.K, self.n, self.k, self.k_prime, self.l, self.c, self.b, self.b_tilde,
                                 self.gamma, rho)

    def integrand(self, phi: np.ndarray) -> np.ndarray:
        """phi has shape (..., K)."""
        phi = np.asarray(phi, dtype=float)
        out = np.ones(phi.shape[:-1])
        for j, nj in enumerate(self.n):
            out = out * phi[..., j] ** nj
        for t in range(len(self.k)):
            out = out / (self.l[t] + self.rho * (phi @ self.b[t])) ** self.k[t]
            out = out / (self.c[t] + phi @ self.b_tilde[t]) ** self.k_prime[t]
        return out

    def to_dict(self) -> dict:
        return {"K": self.K, "n": list(self.n), "k": list(self.k), "k_prime": list(self.k_prime),
                "l": list(self.l), "c": list(self.c), "b": self.b.tolist(), "b_tilde": self.b_tilde.tolist(),
                "gamma": self.gamma, "rho": self.rho}


def _graded_breaks(upper: float, scale: float, refine: int) -> np.ndarray:
    """Breakpoints on [0, upper] graded geometrically from 0, finest near the boundary layer."""
    scale = min(scale, upper)
    breaks = [0.0]
    x = scale / 4 ** refine
    while x < upper:
        breaks.append(x)
        x *= 2.0 ** (1.0 / refine)
    breaks.append(upper)
    return np.array(breaks)


def _layer_scale(spec: ModelIntegralSpec) -> float:
    """Width of the boundary layer at Φ = 0 where l_t + ρ b Φ changes by O(1) relative."""
    scales = [spec.l[t] / (spec.rho * max(spec.b[t].max(), 1e-300)) for t in range(len(spec.k))
              if spec.k[t] > 0 and spec.b[t].max() > 0]
    return min(scales + [spec.gamma])


def _gauss_value(spec: ModelIntegralSpec, order: int, refine: int) -> float:
    if spec.K == 0:
        return float(spec.integrand(np.zeros((1, 0)))[0])
    br = _graded_breaks(spec.gamma, _layer_scale(spec), refine)
    g, w = np.polynomial.legendre.leggauss(order)
    g = (g + 1) / 2
    w = w / 2
    a, h = br[:-1], np.diff(br)
    if spec.K == 1:
        x = a[:, None] + h[:, None] * g[None, :]
        return float(np.sum(h[:, None] * w[None, :] * spec.integrand(x[..., None])))
    # K = 2: rectangles below the diagonal plus Duffy-mapped diagonal triangles
    m = len(h)
    x = a[:, None] + h[:, None] * g[None, :]  # (cell, node)
    wx = h[:, None] * w[None, :]
    i, j = np.tril_indices(m, -1)  # Φ₂ in cell i, Φ₁ in cell j < i
    phi2 = np.broadcast_to(x[i][:, :, None], (len(i), order, order))
    phi1 = np.broadcast_to(x[j][:, None, :], (len(i), order, order))
    ww = wx[i][:, :, None] * wx[j][:, None, :]
    total = float(np.sum(ww * spec.integrand(np.stack([phi1, phi2], axis=-1))))
    # diagonal: Φ₂ = a + h s, Φ₁ = a + h s u, Jacobian h² s
    sg, ug = g[:, None], g[None, :]
    p2 = a[:, None, None] + h[:, None, None] * sg[None]
    p1 = a[:, None, None] + h[:, None, None] * (sg * ug)[None]
    p2 = np.broadcast_to(p2, p1.shape)
    jac = (h ** 2)[:, None, None] * (sg * w[:, None] * w[None, :])[None]
    total += float(np.sum(jac * spec.integrand(np.stack([p1, p2], axis=-1))))
    return total


def model_integral_quadrature(spec: ModelIntegralSpec, tol: float = 1e-8, route: str = "gauss",
                              max_refine: int = 5) -> float:
    """J_K by composite Gauss-Legendre on graded meshes, or by nested adaptive quadrature."""
    if route == "quad":
        return _quad_value(spec, tol)
    if route != "gauss":
        raise DOSError(f"unknown quadrature route {route!r}")
    prev = _gauss_value(spec, 10, 1)
    for refine in range(2, max_refine + 1):
        cur = _gauss_value(spec, 10 + 2 * refine, refine)
        if abs(cur - prev) <= tol * abs(cur):
            return cur
        prev = cur
    raise DOSError(f"model integral did not reach tolerance {tol:g}; last estimate {prev!r}")


def _quad_value(spec: ModelIntegralSpec, tol: float) -> float:
    s = _layer_scale(spec)
    opts = dict(epsabs=0.0, epsrel=tol, limit=200)
    f = lambda *phi: float(spec.integrand(np.array(phi[::-1])[None, :])[0])
    if spec.K == 0:
        return float(spec.integrand(np.zeros((1, 0)))[0])
    if spec.K == 1:
        pts = [p for p in (s, 10 * s) if p < spec.gamma]
        val, _ = integrate.quad(lambda x: f(x), 0.0, spec.gamma, points=pts or None, **opts)
        return val

    def inner(phi2):
        pts = [p for p in (s, 10 * s) if p < phi2]
        val, _ = integrate.quad(lambda x: f(phi2, x), 0.0, phi2, points=pts or None, **opts)
        return val

    pts = [p for p in (s, 10 * s) if p < spec.gamma]
    val, _ = integrate.quad(inner, 0.0, spec.gamma, points=pts or None, **opts)
    return val


@dataclass
class SeriesFit:
    coefficients: dict  # (p, q) -> e(p, q)
    relative_residual: float
    condition_number: float
    passed: bool
    rhos: np.ndarray
    values: np.ndarray

    def to_dict(self) -> dict:
        return {"coefficients": [{"p": p, "q": q, "value": v} for (p, q), v in sorted(self.coefficients.items())],
                "relative_residual": self.relative_residual, "condition_number": self.condition_number,
                "passed": self.passed}


def model_integral_series(spec: ModelIntegralSpec, rhos, p_max: int = 8, tol: float = 1e-12,
                          threshold: float = 1e-4, values=None) -> SeriesFit:
    """Fit J_K(ρ) on {ρ^{−p} (ln ρ)^q : q <= K, p <= p_max}.

    The fit is carried out in x = ρ₀/ρ and ℓ = ln(ρ/ρ₀) for conditioning, then mapped back.
    """
    rhos = np.sort(np.asarray(rhos, dtype=float))
    if values is None:
        values = np.array([model_integral_quadrature(spec.at(r), tol) for r in rhos])
    values = np.asarray(values, dtype=float)
    r0 = float(rhos[0])
    x = r0 / rhos
    ell = np.log(rhos / r0)
    K = spec.K
    cols = [(p, q) for p in range(p_max + 1) for q in range(K + 1)]
    if len(rhos) < len(cols):
        raise DOSError("too few ρ samples for the requested series; widen ρ_list")
    X = np.stack([x ** p * ell ** q for p, q in cols], axis=1)
    scale = np.linalg.norm(X, axis=0)
    cond = float(np.linalg.cond(X / scale))
    a_s, *_ = np.linalg.lstsq(X / scale, values, rcond=None)
    a = a_s / scale
    resid = values - X @ a
    rel = float(np.linalg.norm(resid) / np.linalg.norm(values))
    L0 = math.log(r0)
    e = {}
    for (p, q), apq in zip(cols, a):
        for r in range(q + 1):
            e[(p, r)] = e.get((p, r), 0.0) + apq * r0 ** p * comb(q, r, exact=True) * (-L0) ** (q - r)
    if cond > 1e14:
        log.info("series design is ill-conditioned (%.3g); widen the ρ list", cond)
    return SeriesFit(e, rel, cond, rel < threshold, rhos, values)


def random_model_spec(rng, K: int = 2, rho_n: float = 100.0, beta: float = 0.05) -> ModelIntegralSpec:
    """A random spec with parameters drawn inside the admissible ranges at scale ρ_n."""
    T = int(rng.integers(1, 3))
    lo_l, hi_l = rho_n ** beta, rho_n ** 0.5
    b = rng.uniform(0.5, 2.0, size=(T, K)) * (rng.random((T, K)) < 0.8)
    b[:, -1] = np.maximum(b[:, -1], 0.5)  # keep every ρ-denominator growing in Φ_K
    bt = rng.uniform(0.5, 2.0, size=(T, K)) * (rng.random((T, K)) < 0.6)
    return ModelIntegralSpec(
        K=K,
        n=tuple(int(v) for v in rng.integers(0, 3, size=K)),
        k=tuple(int(v) for v in rng.integers(0, 3, size=T)),
        k_prime=tuple(int(v) for v in rng.integers(0, 2, size=T)),
        l=tuple(float(v) for v in rng.uniform(lo_l, hi_l, size=T)),
        c=tuple(float(v) for v in rng.uniform(1.0, hi_l, size=T)),
        b=b, b_tilde=bt, gamma=float(rng.uniform(0.3, 1.0)))
