"""Trigonometric-polynomial potentials, frequency sets and discreteness checks."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

FREQ_TOL = 1e-9
THETA_SUM_CAP = 20_000
RELATION_BOUND = 50


class PotentialError(ValueError):
    pass


def freq_key(v) -> tuple:
    """Hashable key identifying a frequency up to FREQ_TOL."""
    return tuple(int(round(float(x) / FREQ_TOL)) for x in np.atleast_1d(v))


class FrequencySet:
    """Finite set of frequencies in R^d, deduplicated with tolerance FREQ_TOL.

    Elements are stored in a canonical order: ascending norm, then lexicographic.
    """

    def __init__(self, dim: int, elements, require_symmetric: bool = False):
        if dim not in (1, 2, 3):
            raise PotentialError(f"dimension must be 1, 2 or 3, got {dim}")
        self.dim = dim
        pts = np.asarray(elements, dtype=float).reshape(-1, dim)
        if not np.all(np.isfinite(pts)):
            raise PotentialError("frequencies must be finite")
        unique = {}
        for p in pts:
            unique.setdefault(freq_key(p), p)
        arr = np.array(list(unique.values()), dtype=float).reshape(-1, dim)
        order = np.lexsort(tuple(arr[:, j] for j in reversed(range(dim))) + (np.round(np.linalg.norm(arr, axis=1), 9),))
        self.elements = arr[order]
        self.elements.setflags(write=False)
        self._keys = {freq_key(p): i for i, p in enumerate(self.elements)}
        if require_symmetric and not self.is_symmetric():
            raise PotentialError("frequency set is not symmetric")

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __contains__(self, v):
        return freq_key(v) in self._keys

    def __repr__(self):
        return f"FrequencySet(dim={self.dim}, n={len(self)})"

    def index(self, v) -> int:
        return self._keys[freq_key(v)]

    def keys(self):
        return list(self._keys)

    def is_symmetric(self) -> bool:
        return all(freq_key(-p) in self._keys for p in self.elements)

    def nonzero(self) -> np.ndarray:
        """Elements other than the origin (Θ' in the usual notation)."""
        mask = np.linalg.norm(self.elements, axis=1) > FREQ_TOL
        return self.elements[mask]

    def rank(self) -> int:
        nz = self.nonzero()
        if len(nz) == 0:
            return 0
        return int(np.linalg.matrix_rank(nz, tol=1e-9))

    def union(self, other: "FrequencySet") -> "FrequencySet":
        return FrequencySet(self.dim, np.vstack([self.elements, other.elements]))

    def scaled(self, c: float) -> "FrequencySet":
        return FrequencySet(self.dim, c * self.elements)


def theta_sum(freqs: FrequencySet, k: int, cap: int = THETA_SUM_CAP) -> FrequencySet:
    """k-fold algebraic sum Θ + ... + Θ."""
    if k < 1:
        raise PotentialError("k must be >= 1")
    base = freqs.elements
    current = {freq_key(p): p for p in base}
    for _ in range(k - 1):
        nxt = {}
        for p in current.values():
            for q in base:
                s = p + q
                nxt.setdefault(freq_key(s), s)
            if len(nxt) > cap:
                raise PotentialError(f"theta_sum exceeded the set-size cap of {cap} elements")
        current = nxt
    if len(current) > cap:
        raise PotentialError(f"theta_sum exceeded the set-size cap of {cap} elements")
    return FrequencySet(freqs.dim, list(current.values()))


@dataclass(frozen=True)
class ScaleParameters:
    rho_n: float
    k_tilde: int
    alphas: tuple
    beta: float

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        d = len(alphas)
        if d not in (1, 2, 3):
            raise PotentialError("need one alpha per dimension (d = 1, 2, 3)")
        if self.rho_n <= 1:
            raise PotentialError("rho_n must exceed 1 so that L_j increases with j")
        if not 1 <= int(self.k_tilde) <= 5:
            raise PotentialError("k_tilde must be between 1 and 5")
        if any(a <= 0 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise PotentialError("alphas must be positive and strictly increasing")
        if alphas[-1] >= 1.0 / (2 * d):
            raise PotentialError(f"alpha_d must be below 1/(2d) = {1.0 / (2 * d):.6g}")
        if not 0 < self.beta < alphas[0]:
            raise PotentialError("beta must satisfy 0 < beta < alpha_1")

    @property
    def dim(self) -> int:
        return len(self.alphas)

    @property
    def L(self) -> np.ndarray:
        return np.array([self.rho_n ** a for a in self.alphas])

    @property
    def lambda_n(self) -> float:
        return self.rho_n ** 2

    @classmethod
    def default(cls, dim: int, rho_n: float, k_tilde: int = 3) -> "ScaleParameters":
        top = 1.0 / (2 * dim)
        alphas = tuple(top * (j + 1) / (dim + 1) for j in range(dim))
        return cls(rho_n=rho_n, k_tilde=k_tilde, alphas=alphas, beta=alphas[0] / 2)

    def to_dict(self) -> dict:
        return {"rho_n": self.rho_n, "k_tilde": self.k_tilde, "alphas": list(self.alphas), "beta": self.beta}


@dataclass
class Potential:
    """b(x) = sum over θ of a_θ exp(i θ·x), stored as frequency key -> coefficient."""

    dim: int
    coeffs: dict = field(default_factory=dict)
    vectors: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, dim: int, terms, symmetrize: bool = True) -> "Potential":
        coeffs, vectors = {}, {}
        for freq, value in terms:
            v = np.asarray(freq, dtype=float).reshape(dim)
            key = freq_key(v)
            coeffs[key] = coeffs.get(key, 0.0) + complex(value)
            vectors[key] = v
        pot = cls(dim, coeffs, vectors)
        if symmetrize:
            pot = pot._symmetrized()
        pot.validate()
        return pot

    @classmethod
    def from_json(cls, source) -> "Potential":
        if isinstance(source, (str, Path)):
            doc = json.loads(Path(source).read_text())
        else:
            doc = source
        try:
            dim = int(doc["dim"])
            terms = [(t["freq"], complex(t.get("re", 0.0), t.get("im", 0.0))) for t in doc["terms"]]
        except (KeyError, TypeError) as exc:
            raise PotentialError(f"malformed potential document: {exc}") from exc
        for f, _ in terms:
            if len(f) != dim:
                raise PotentialError(f"frequency {f} does not have {dim} coordinates")
        return cls.from_terms(dim, terms)

    def to_json(self) -> dict:
        terms = []
        for key in sorted(self.coeffs):
            c = self.coeffs[key]
            terms.append({"freq": self.vectors[key].tolist(), "re": c.real, "im": c.imag})
        return {"dim": self.dim, "terms": terms}

    def _symmetrized(self) -> "Potential":
        coeffs, vectors = dict(self.coeffs), dict(self.vectors)
        for key, c in self.coeffs.items():
            v = self.vectors[key]
            mirror = freq_key(-v)
            if mirror in self.coeffs:
                if abs(self.coeffs[mirror] - np.conj(c)) > 1e-12 * max(1.0, abs(c)):
                    raise PotentialError(f"coefficients at {v.tolist()} and its mirror are not conjugate")
            else:
                coeffs[mirror] = np.conj(c)
                vectors[mirror] = -v
        return Potential(self.dim, coeffs, vectors)

    def validate(self):
        for key, c in self.coeffs.items():
            mirror = freq_key(-self.vectors[key])
            if mirror not in self.coeffs or abs(self.coeffs[mirror] - np.conj(c)) > 1e-12 * max(1.0, abs(c)):
                raise PotentialError("potential is not real-valued (a_-θ must equal conj(a_θ))")

    @property
    def frequencies(self) -> FrequencySet:
        """Frequency set Θ: support of the coefficients together with 0."""
        pts = [self.vectors[k] for k, c in self.coeffs.items() if c != 0]
        pts.append(np.zeros(self.dim))
        return FrequencySet(self.dim, pts, require_symmetric=True)

    def coefficient(self, v) -> complex:
        return self.coeffs.get(freq_key(v), 0.0)

    def items(self):
        for key, c in self.coeffs.items():
            if c != 0:
                yield self.vectors[key], c

    def mean(self) -> complex:
        return complex(self.coeffs.get(freq_key(np.zeros(self.dim)), 0.0))

    def multiply(self, other: "Potential") -> "Potential":
        terms = []
        for u, a in self.items():
            for v, b in other.items():
                terms.append((u + v, a * b))
        return Potential.from_terms(self.dim, terms, symmetrize=False) if terms else Potential(self.dim)

    def l1_norm(self) -> float:
        return float(sum(abs(c) for c in self.coeffs.values()))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        out = np.zeros(len(x), dtype=complex)
        for v, c in self.items():
            out += c * np.exp(1j * x @ v)
        return out.real


# ---------------------------------------------------------------- condition A


@dataclass
class ConditionAReport:
    verdict: str
    tuples_checked: int
    dependent_tuples: int
    complete: bool
    violating_tuple: list | None = None
    bound: int = RELATION_BOUND

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "tuples_checked": self.tuples_checked,
            "dependent_tuples": self.dependent_tuples,
            "complete": self.complete,
            "violating_tuple": self.violating_tuple,
            "relation_bound": self.bound,
        }


def _rational_direction(v: np.ndarray, bound: int) -> np.ndarray | None:
    """Integer vector proportional to v with entries bounded by `bound`, if one exists."""
    big = np.argmax(np.abs(v))
    ratios = v / v[big]
    fracs = [Fraction(float(r)).limit_denominator(bound) for r in ratios]
    approx = np.array([float(f) for f in fracs])
    if np.max(np.abs(approx - ratios)) > 1e-9:
        return None
    den = math.lcm(*[f.denominator for f in fracs])
    ints = np.array([int(f * den) for f in fracs])
    g = math.gcd(*[abs(int(x)) for x in ints])
    ints = ints // g
    if np.max(np.abs(ints)) > bound:
        return None
    return ints


def integer_relation(vectors: np.ndarray, bound: int = RELATION_BOUND) -> np.ndarray | None:
    """Nonzero integer n with sum n_j v_j = 0 and |n_j| <= bound, or None."""
    vectors = np.asarray(vectors, dtype=float)
    n = len(vectors)
    u, sv, vt = np.linalg.svd(vectors.T)
    scale = max(sv[0], 1.0) if len(sv) else 1.0
    rank = int(np.sum(sv > 1e-9 * scale))
    null = vt[rank:]
    if len(null) == 0:
        return None
    if len(null) == 1:
        return _rational_direction(null[0], bound)
    # nullity >= 2: exhaustive bounded search
    grid = np.arange(-bound, bound + 1)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(vectors))))
    for head in itertools.product(grid, repeat=n - 1):
        head = np.array(head)
        # last coefficient ranges over the grid, vectorized
        partial = head @ vectors[:-1]
        cand = partial[None, :] + grid[:, None] * vectors[-1][None, :]
        ok = np.max(np.abs(cand), axis=1) < tol
        for idx in np.nonzero(ok)[0]:
            rel = np.append(head, grid[idx])
            if np.any(rel != 0):
                return rel
    return None


def check_condition_A(freqs: FrequencySet, k: int, bound: int = RELATION_BOUND,
                      tuple_cap: int = 200_000) -> ConditionAReport:
    """Scan d-tuples of Θ_k for linearly dependent tuples lacking an integer relation."""
    d = freqs.dim
    nz = theta_sum(freqs, k).nonzero()
    # tuples containing both θ and a multiple sign-flip of it are trivially related,
    # so keep one representative per ± pair
    reps, seen = [], set()
    for v in nz:
        if freq_key(-v) in seen:
            continue
        seen.add(freq_key(v))
        reps.append(v)
    reps = np.array(reps).reshape(-1, d)
    checked = dependent = 0
    complete = True
    for combo in itertools.combinations(range(len(reps)), d):
        if checked >= tuple_cap:
            complete = False
            break
        checked += 1
        tup = reps[list(combo)]
        if np.linalg.matrix_rank(tup, tol=1e-9) == d:
            continue
        dependent += 1
        if integer_relation(tup, bound) is None:
            return ConditionAReport("LIKELY-VIOLATED", checked, dependent, complete,
                                    [t.tolist() for t in tup], bound)
    return ConditionAReport("PASS", checked, dependent, complete, None, bound)


# ------------------------------------------------------ diophantine quantities


def lattice_basis(vectors: np.ndarray, bound: int = RELATION_BOUND) -> np.ndarray:
    """Rows form a basis of the additive group generated by `vectors`.

    Raises PotentialError if the group is not discrete (no rational structure found).
    """
    from sympy import Matrix
    from sympy.matrices.normalforms import hermite_normal_form

    vectors = np.asarray(vectors, dtype=float)
    nz = vectors[np.linalg.norm(vectors, axis=1) > FREQ_TOL]
    m = int(np.linalg.matrix_rank(nz, tol=1e-9))
    # greedy choice of an independent subset as a rational frame
    basis = []
    for v in nz:
        trial = basis + [v]
        if np.linalg.matrix_rank(np.array(trial), tol=1e-9) == len(trial):
            basis.append(v)
        if len(basis) == m:
            break
    B = np.array(basis)
    coords, *_ = np.linalg.lstsq(B.T, nz.T, rcond=None)
    fracs = []
    for c in coords.ravel():
        f = Fraction(float(c)).limit_denominator(bound ** m)
        if abs(float(f) - c) > 1e-8:
            raise PotentialError(f"no rational relation found among {nz.tolist()}; condition A fails")
        fracs.append(f)
    den = math.lcm(*[f.denominator for f in fracs])
    ints = np.array([int(f * den) for f in fracs], dtype=object).reshape(coords.shape)
    hnf = hermite_normal_form(Matrix(ints.tolist()))
    lat = np.array(hnf.tolist(), dtype=float) / den
    return (B.T @ lat).T


def lattice_covolume(vectors: np.ndarray, bound: int = RELATION_BOUND) -> float:
    """Covolume of the additive group generated by `vectors` inside their span."""
    gens = lattice_basis(vectors, bound)
    gram = gens @ gens.T
    return float(math.sqrt(abs(np.linalg.det(gram))))


def diophantine_quantities(freqs: FrequencySet, params: ScaleParameters) -> dict:
    """r, R, s and the minimal covolume for Θ̃ = Θ_k̃."""
    from .geometry import enumerate_all_subspaces, principal_angle_sine

    tilde = theta_sum(freqs, params.k_tilde)
    nz = tilde.nonzero()
    if len(nz) == 0:
        raise PotentialError("frequency set has no nonzero elements")
    norms = np.linalg.norm(nz, axis=1)
    table = enumerate_all_subspaces(tilde)
    d = freqs.dim
    proper = [V for m in range(1, d) for V in table[m]]
    s = 1.0
    for V, U in itertools.combinations(proper, 2):
        if V.contains_subspace(U) or U.contains_subspace(V):
            continue
        s = min(s, principal_angle_sine(V, U))
    covolume_spaces = proper if proper else table[d]
    cov = math.inf
    for V in covolume_spaces:
        members = nz[V.contains_points(nz)]
        cov = min(cov, lattice_covolume(members))
    return {"r": float(norms.min()), "R": float(norms.max()), "s": float(s), "min_covolume": cov,
            "covolume_over": "proper subspaces" if proper else "whole space (d=1)"}
