"""Quasi-periodic symbol calculus: products, commutators, cutoffs and the gauge transform.

A symbol is a finite map θ -> coefficient function of ξ.  Coefficient functions are
expression nodes evaluated on batches of points (an (N, d) array).  Within one
evaluation session every (node, grid) pair is computed once.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .potential import FREQ_TOL, Potential, ScaleParameters, freq_key

MOLLIFIER_INNER = 0.25
MOLLIFIER_OUTER = 0.275
SUPPORT_CAP = 20_000
K_TILDE_CAP = 5


class SymbolError(RuntimeError):
    pass


# --------------------------------------------------------------------- mollifier


def _h(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def mollifier(z, inner: float = MOLLIFIER_INNER, outer: float = MOLLIFIER_OUTER):
    """Smooth step: 1 for z <= inner, 0 for z >= outer."""
    z = np.asarray(z, dtype=float)
    a = _h(outer - z)
    b = _h(z - inner)
    out = a / (a + b)
    out = np.where(z <= inner, 1.0, out)
    out = np.where(z >= outer, 0.0, out)
    return out if out.ndim else float(out)


def cutoffs(theta, xi, params: ScaleParameters) -> dict:
    """Energy cutoffs e, ℓ>, ℓ< and resonance cutoffs ζ, φ for frequency θ at points ξ."""
    theta = np.asarray(theta, dtype=float)
    ntheta = np.linalg.norm(theta)
    if ntheta < FREQ_TOL:
        raise SymbolError("cutoffs are defined for nonzero frequencies only")
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    rho = params.rho_n
    mid = xi + theta / 2
    radial = (np.linalg.norm(mid, axis=1) - 3 * rho) / (10 * rho)
    zeta = mollifier(np.abs(mid @ theta) / (rho ** params.beta * ntheta))
    return {
        "e": mollifier(np.abs(radial)),
        "l_gt": 1.0 - mollifier(radial),
        "l_lt": 1.0 - mollifier(-radial),
        "zeta": zeta,
        "phi": 1.0 - zeta,
    }


# ------------------------------------------------------------ expression nodes

_session = threading.local()


class EvalSession:
    """Scope inside which node evaluations are memoized per (node, grid)."""

    def __enter__(self):
        self.owner = getattr(_session, "cache", None) is None
        if self.owner:
            _session.cache = {}
        return self

    def __exit__(self, *exc):
        if self.owner:
            _session.cache = None


def _digest(xi: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(xi).tobytes(), digest_size=16).digest() + bytes(str(xi.shape), "ascii")


class Coef:
    """Coefficient function node; subclasses implement _compute(xi) -> complex array."""

    is_zero = False

    def __call__(self, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        cache = getattr(_session, "cache", None)
        if cache is None:
            with EvalSession():
                return self(xi)
        key = (id(self), _digest(xi))
        hit = cache.get(key)
        if hit is None:
            hit = self._compute(xi)
            cache[key] = hit
        return hit

    def _compute(self, xi):
        raise NotImplementedError


class Zero(Coef):
    is_zero = True

    def _compute(self, xi):
        return np.zeros(len(xi), dtype=complex)


ZERO = Zero()


class Const(Coef):
    def __init__(self, value: complex):
        self.value = complex(value)

    def _compute(self, xi):
        return np.full(len(xi), self.value, dtype=complex)


class Shifted(Coef):
    def __init__(self, child: Coef, shift):
        self.child = child
        self.shift = np.asarray(shift, dtype=float)

    def _compute(self, xi):
        return self.child(xi + self.shift)


class Sum(Coef):
    def __init__(self, children, weights=None):
        self.children = list(children)
        self.weights = [1.0] * len(self.children) if weights is None else list(weights)

    def _compute(self, xi):
        out = np.zeros(len(xi), dtype=complex)
        for w, c in zip(self.weights, self.children):
            out += w * c(xi)
        return out


class Product(Coef):
    def __init__(self, *children):
        self.children = children

    def _compute(self, xi):
        out = self.children[0](xi)
        for c in self.children[1:]:
            out = out * c(xi)
        return out


class Cutoff(Coef):
    """Products of cutoff functions attached to a frequency."""

    KINDS = {"e", "l_gt", "l_lt", "zeta", "phi", "e_phi", "e_zeta", "one_minus_e_phi"}

    def __init__(self, theta, params: ScaleParameters, kind: str):
        if kind not in self.KINDS:
            raise SymbolError(f"unknown cutoff {kind!r}")
        self.theta = np.asarray(theta, dtype=float)
        self.params = params
        self.kind = kind

    def _compute(self, xi):
        c = cutoffs(self.theta, xi, self.params)
        if self.kind == "e_phi":
            v = c["e"] * c["phi"]
        elif self.kind == "e_zeta":
            v = c["e"] * c["zeta"]
        elif self.kind == "one_minus_e_phi":
            v = 1.0 - c["e"] * c["phi"]
        else:
            v = c[self.kind]
        return v.astype(complex)


class ResolventFactor(Coef):
    """e_θ φ_θ / (2⟨θ, ξ+θ/2⟩), zero where the numerator vanishes.

    On the support of φ_θ we have |⟨θ, ξ+θ/2⟩| >= ρ^β|θ|/4, which certifies the division.
    """

    def __init__(self, theta, params: ScaleParameters):
        self.theta = np.asarray(theta, dtype=float)
        self.params = params

    def _compute(self, xi):
        c = cutoffs(self.theta, xi, self.params)
        num = c["e"] * c["phi"]
        den = 2.0 * ((xi + self.theta / 2) @ self.theta)
        out = np.zeros(len(xi), dtype=complex)
        nz = num != 0
        out[nz] = num[nz] / den[nz]
        return out


class ShiftedNormSq(Coef):
    """|ξ + φ|²."""

    def __init__(self, shift):
        self.shift = np.asarray(shift, dtype=float)

    def _compute(self, xi):
        return np.sum((xi + self.shift) ** 2, axis=1).astype(complex)


def _shift(c: Coef, v) -> Coef:
    if c.is_zero or np.all(np.asarray(v) == 0):
        return c
    return Shifted(c, v)


def _sum(children, weights=None) -> Coef:
    if weights is None:
        weights = [1.0] * len(children)
    pairs = [(w, c) for w, c in zip(weights, children) if not c.is_zero and w != 0]
    if not pairs:
        return ZERO
    if len(pairs) == 1 and pairs[0][0] == 1.0:
        return pairs[0][1]
    return Sum([c for _, c in pairs], [w for w, _ in pairs])


def _prod(*children) -> Coef:
    if any(c.is_zero for c in children):
        return ZERO
    return Product(*children)


# ------------------------------------------------------------------------ symbol


class Symbol:
    """Finite map from frequencies to coefficient functions."""

    def __init__(self, dim: int, terms: dict | None = None):
        self.dim = dim
        self.terms = {}
        for key, (vec, coef) in (terms or {}).items():
            if not coef.is_zero:
                self.terms[key] = (np.asarray(vec, dtype=float), coef)

    # construction
    @classmethod
    def zero(cls, dim: int) -> "Symbol":
        return cls(dim)

    @classmethod
    def constant(cls, dim: int, value: complex) -> "Symbol":
        z = np.zeros(dim)
        return cls(dim, {freq_key(z): (z, Const(value))})

    @classmethod
    def from_potential(cls, b: Potential) -> "Symbol":
        return cls(b.dim, {freq_key(v): (v, Const(c)) for v, c in b.items()})

    @classmethod
    def kinetic(cls, dim: int) -> "Symbol":
        """|ξ|², the symbol of the free Laplacian."""
        z = np.zeros(dim)
        return cls(dim, {freq_key(z): (z, ShiftedNormSq(z))})

    # inspection
    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"Symbol(dim={self.dim}, support={len(self)})"

    def support(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, self.dim))
        return np.array([v for v, _ in self.terms.values()])

    def support_keys(self) -> set:
        return set(self.terms)

    def coef(self, theta) -> Coef:
        entry = self.terms.get(freq_key(theta))
        return ZERO if entry is None else entry[1]

    def coeff(self, theta, xi) -> np.ndarray:
        """b̂(θ, ξ) at the rows of xi."""
        return self.coef(theta)(np.atleast_2d(np.asarray(xi, dtype=float)).reshape(-1, self.dim))

    def items(self):
        return self.terms.items()

    # algebra
    def _combine(self, other: "Symbol", w_self: complex, w_other: complex) -> "Symbol":
        keys = set(self.terms) | set(other.terms)
        out = {}
        for key in keys:
            parts, weights, vec = [], [], None
            if key in self.terms:
                vec, c = self.terms[key]
                parts.append(c)
                weights.append(w_self)
            if key in other.terms:
                vec, c = other.terms[key]
                parts.append(c)
                weights.append(w_other)
            out[key] = (vec, _sum(parts, weights))
        return Symbol(self.dim, out)

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def scale(self, c: complex) -> "Symbol":
        if c == 0:
            return Symbol(self.dim)
        return Symbol(self.dim, {k: (v, _sum([coef], [c])) for k, (v, coef) in self.terms.items()})

    def restrict(self, keep) -> "Symbol":
        return Symbol(self.dim, {k: t for k, t in self.terms.items() if keep(t[0])})

    def with_cutoff(self, kind: str, params: ScaleParameters, include_zero: bool = False) -> "Symbol":
        """Multiply each θ ≠ 0 coefficient by a cutoff; θ = 0 is dropped unless include_zero."""
        out = {}
        for key, (v, c) in self.terms.items():
            if np.linalg.norm(v) < FREQ_TOL:
                if include_zero:
                    out[key] = (v, c)
                continue
            out[key] = (v, _prod(c, Cutoff(v, params, kind)))
        return Symbol(self.dim, out)

    def evaluate(self, xi) -> dict:
        with EvalSession():
            return {k: c(xi) for k, (_, c) in self.terms.items()}


def _merge(groups: dict, dim: int) -> Symbol:
    out = {}
    for key, (vec, parts, weights) in groups.items():
        out[key] = (vec, _sum(parts, weights))
    return Symbol(dim, out)


def multiply(b: Symbol, g: Symbol, cap: int = SUPPORT_CAP) -> Symbol:
    """Symbol of the operator product: (b∘g)(χ, ξ) = Σ_{θ+φ=χ} b̂(θ, ξ+φ) ĝ(φ, ξ)."""
    groups = {}
    for _, (theta, bc) in b.items():
        for _, (phi, gc) in g.items():
            chi = theta + phi
            key = freq_key(chi)
            entry = groups.setdefault(key, (chi, [], []))
            entry[1].append(_prod(_shift(bc, phi), gc))
            entry[2].append(1.0)
            if len(groups) > cap:
                raise SymbolError(f"product support exceeds the cap of {cap}")
    return _merge(groups, b.dim)


def commutator(b: Symbol, g: Symbol, cap: int = SUPPORT_CAP) -> Symbol:
    """ad(b, g) = i(b∘g − g∘b), assembled termwise."""
    groups = {}
    for _, (theta, bc) in b.items():
        for _, (phi, gc) in g.items():
            chi = theta + phi
            key = freq_key(chi)
            entry = groups.setdefault(key, (chi, [], []))
            entry[1].extend([_prod(_shift(bc, phi), gc), _prod(bc, _shift(gc, theta))])
            entry[2].extend([1j, -1j])
            if len(groups) > cap:
                raise SymbolError(f"commutator support exceeds the cap of {cap}")
    return _merge(groups, b.dim)


def multi_commutator(a: Symbol, psis) -> Symbol:
    out = a
    for p in psis:
        out = commutator(out, p)
    return out


# -------------------------------------------------------------------- partition


def partition(b: Symbol, params: ScaleParameters) -> dict:
    """Split b into large-energy, non-resonant, resonant, small-energy and mean parts."""
    zero_key = freq_key(np.zeros(b.dim))
    mean = Symbol(b.dim, {k: t for k, t in b.items() if k == zero_key})
    return {
        "sharp": b.with_cutoff("l_gt", params),
        "natural": b.with_cutoff("e_phi", params),
        "flat": b.with_cutoff("e_zeta", params),
        "down": b.with_cutoff("l_lt", params),
        "o": mean,
    }


def natural_part(b: Symbol, params: ScaleParameters) -> Symbol:
    return b.with_cutoff("e_phi", params)


def symmetry_residual(b: Symbol, xi) -> float:
    """max |b̂(θ,ξ) − conj(b̂(−θ, ξ+θ))| over the support and sample points."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    worst = 0.0
    with EvalSession():
        for _, (theta, c) in b.items():
            lhs = c(xi)
            rhs = np.conj(b.coef(-theta)(xi + theta))
            worst = max(worst, float(np.max(np.abs(lhs - rhs))) if len(xi) else 0.0)
    return worst


def is_symmetric(b: Symbol, xi, tol: float = 1e-12) -> bool:
    return symmetry_residual(b, xi) <= tol


def solve_commutator(a: Symbol, params: ScaleParameters, samples=None, check: bool = True) -> Symbol:
    """ψ with ψ̂(θ,ξ) = i â(θ,ξ) e_θφ_θ / (2⟨θ, ξ+θ/2⟩), so that ad(|ξ|²; ψ) + a^♮ = 0."""
    if check:
        pts = default_samples(a.dim, params) if samples is None else samples
        res = symmetry_residual(a, pts)
        scale = max(1.0, max((float(np.max(np.abs(c(pts)))) for _, (_, c) in a.items()), default=1.0))
        if res > 1e-10 * scale:
            raise SymbolError(f"right-hand side is not symmetric (residual {res:.3g})")
    out = {}
    for key, (theta, c) in a.items():
        if np.linalg.norm(theta) < FREQ_TOL:
            continue
        out[key] = (theta, _prod(Const(1j), c, ResolventFactor(theta, params)))
    return Symbol(a.dim, out)


def kinetic_commutator_residual(psi: Symbol, a: Symbol, params: ScaleParameters, xi) -> float:
    """max |i(|ξ+χ|² − |ξ|²) ψ̂(χ,ξ) + â^♮(χ,ξ)| over supports and sample points."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    nat = natural_part(a, params)
    keys = set(psi.support_keys()) | set(nat.support_keys())
    worst = 0.0
    with EvalSession():
        for key in keys:
            vec = (psi.terms.get(key) or nat.terms.get(key))[0]
            gap = np.sum((xi + vec) ** 2, axis=1) - np.sum(xi ** 2, axis=1)
            val = 1j * gap * psi.coef(vec)(xi) + nat.coef(vec)(xi)
            worst = max(worst, float(np.max(np.abs(val))))
    return worst


# ---------------------------------------------------------------------- norms


def norm_grid(dim: int, params: ScaleParameters, n: int = 2000, seed: int = 0) -> np.ndarray:
    """Log-spaced radii times random directions, covering all cutoff supports."""
    rng = np.random.default_rng(seed)
    radii = np.logspace(-2, math.log10(20 * params.rho_n), n)
    dirs = rng.normal(size=(n, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radii[:, None] * dirs


def default_samples(dim: int, params: ScaleParameters, n: int = 256, seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 6 * params.rho_n, n)
    dirs = rng.normal(size=(n, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return r[:, None] * dirs


def norm_estimate(b: Symbol, alpha: float, l: int, grid, beta: float = 1.0) -> float:
    """Σ_θ ⟨θ⟩^l max_grid ⟨ξ⟩^{−αβ} |b̂(θ,ξ)|, a lower bound for the sup-norm."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    weight = (1.0 + np.sum(grid ** 2, axis=1)) ** (-alpha * beta / 2)
    total = 0.0
    with EvalSession():
        for _, (theta, c) in b.items():
            bracket = (1.0 + theta @ theta) ** (l / 2)
            total += bracket * float(np.max(weight * np.abs(c(grid))))
    return total


# ----------------------------------------------------------------------- gauge


def compositions(n: int, parts: int):
    """Ordered tuples of `parts` positive integers summing to n."""
    if parts == 1:
        if n >= 1:
            yield (n,)
        return
    for first in range(1, n - parts + 2):
        for rest in compositions(n - first, parts - 1):
            yield (first,) + rest


@dataclass
class GaugeResult:
    b: Symbol
    params: ScaleParameters
    k_tilde: int
    psi: dict
    B: dict
    T: dict
    Y: Symbol
    W: Symbol
    diagnostics: dict = field(default_factory=dict)

    def natural_rhs(self, l: int) -> Symbol:
        rhs = self.B[l] if l == 1 else self.B[l] + self.T[l]
        return natural_part(rhs, self.params)


def gauge_transform(b: Symbol, params: ScaleParameters, k_tilde: int | None = None, samples=None) -> GaugeResult:
    """Iteratively solve the commutator equations and assemble Y and W."""
    k = params.k_tilde if k_tilde is None else int(k_tilde)
    if not 1 <= k <= K_TILDE_CAP:
        raise SymbolError(f"k_tilde must be between 1 and {K_TILDE_CAP}")
    pts = default_samples(b.dim, params) if samples is None else samples
    if symmetry_residual(b, pts) > 1e-12 * max(1.0, norm_estimate(b, 0, 0, pts)):
        raise SymbolError("input symbol is not symmetric")
    psi, B, T, A = {}, {1: b}, {1: Symbol(b.dim)}, {}
    chains = {}

    def chain(base: str, base_sym: Symbol, orders: tuple) -> Symbol:
        key = (base, orders)
        if key not in chains:
            prev = base_sym if len(orders) == 1 else chain(base, base_sym, orders[:-1])
            chains[key] = commutator(prev, psi[orders[-1]])
        return chains[key]

    psi[1] = solve_commutator(b, params, check=False)
    A[1] = natural_part(b, params).scale(-1.0)  # ad(H₀; Ψ₁)
    for l in range(2, k + 1):
        Bl = Symbol(b.dim)
        for j in range(1, l):
            for comp in compositions(l - 1, j):
                Bl = Bl + chain("b", b, comp).scale(1.0 / math.factorial(j))
        Tl = Symbol(b.dim)
        for j in range(2, l + 1):
            for comp in compositions(l, j):
                Tl = Tl + chain(f"A{comp[0]}", A[comp[0]], comp[1:]).scale(1.0 / math.factorial(j))
        B[l], T[l] = Bl, Tl
        try:
            psi[l] = solve_commutator(Bl + Tl, params, check=False)
        except SymbolError as exc:
            raise SymbolError(f"order {l}: {exc}") from exc
        A[l] = natural_part(Bl + Tl, params).scale(-1.0)
    Y = Symbol(b.dim)
    for l in range(1, k + 1):
        Y = Y + B[l]
        if l >= 2:
            Y = Y + T[l]
    W = Y.with_cutoff("one_minus_e_phi", params, include_zero=True)
    return GaugeResult(b, params, k, psi, B, T, Y, W)


def gauge_diagnostics(res: GaugeResult, samples=None, grid=None, shell_samples: int = 400, seed: int = 2) -> dict:
    """Structural checks: symmetry, commutator equations, support law and the resonant block law for W."""
    from .potential import theta_sum

    P = res.params
    d = res.b.dim
    pts = default_samples(d, P) if samples is None else samples
    grid = norm_grid(d, P) if grid is None else grid
    out = {"k_tilde": res.k_tilde, "orders": []}
    for l in range(1, res.k_tilde + 1):
        rhs = res.B[l] if l == 1 else res.B[l] + res.T[l]
        out["orders"].append({
            "order": l,
            "support_psi": len(res.psi[l]),
            "support_B": len(res.B[l]),
            "support_T": len(res.T[l]) if l > 1 else 0,
            "norm_psi": norm_estimate(res.psi[l], 0, 0, grid),
            "norm_B": norm_estimate(res.B[l], 0, 0, grid),
            "norm_T": norm_estimate(res.T[l], 0, 0, grid) if l > 1 else 0.0,
            "commutator_residual": kinetic_commutator_residual(res.psi[l], rhs, P, pts),
            "psi_symmetry": symmetry_residual(res.psi[l], pts),
        })
    out["Y_symmetry"] = symmetry_residual(res.Y, pts)
    out["W_symmetry"] = symmetry_residual(res.W, pts)
    out["support_Y"] = len(res.Y)
    out["support_W"] = len(res.W)
    freqs = res.b.support()
    base = np.vstack([freqs, np.zeros((1, d))])
    from .potential import FrequencySet

    allowed = theta_sum(FrequencySet(d, base), res.k_tilde)
    out["support_law"] = all(k in allowed._keys for k in res.Y.support_keys())
    out["block_law"] = block_law_check(res, shell_samples, seed)
    return out


def block_law_check(res: GaugeResult, n: int = 400, seed: int = 2) -> dict:
    """ŵ(θ,ξ) = 0 at shell points unless both ξ and ξ+θ lie in the resonance zone of θ."""
    P = res.params
    d = res.b.dim
    rng = np.random.default_rng(seed)
    lam = P.lambda_n
    r = np.sqrt(rng.uniform(0.7 * lam, 17.5 * lam, n))
    dirs = rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xi = r[:, None] * dirs
    # bias half of the points towards resonance planes so the check is not vacuous
    if len(res.W) > 1:
        thetas = [v for v in res.W.support() if np.linalg.norm(v) > FREQ_TOL]
        for i in range(n // 2):
            t = thetas[i % len(thetas)]
            u = t / np.linalg.norm(t)
            xi[i] -= (xi[i] @ u + rng.uniform(-1, 1) * 1.5 * P.L[0]) * u
        rr = np.sum(xi ** 2, axis=1)
        xi = xi[(rr >= 0.7 * lam) & (rr <= 17.5 * lam)]
    L1 = P.L[0]
    worst, checked, violations = 0.0, 0, 0
    with EvalSession():
        for _, (theta, c) in res.W.items():
            nt = np.linalg.norm(theta)
            if nt < FREQ_TOL:
                continue
            u = theta / nt
            outside = (np.abs(xi @ u) > L1) | (np.abs((xi + theta) @ u) > L1)
            if not np.any(outside):
                continue
            vals = np.abs(c(xi[outside]))
            checked += int(outside.sum())
            violations += int(np.sum(vals > 1e-14))
            worst = max(worst, float(vals.max()))
    margin = [float(L1 - (MOLLIFIER_OUTER * P.rho_n ** P.beta + np.linalg.norm(v) / 2))
              for v in res.W.support() if np.linalg.norm(v) > FREQ_TOL]
    return {"checked": checked, "violations": violations, "max_abs": worst,
            "passed": violations == 0, "containment_margin": min(margin) if margin else None}
