"""Cluster operators, the g-map, residue sums and the Floquet-Bloch periodic oracle."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import brentq

from .potential import FREQ_TOL, Potential, PotentialError, freq_key, lattice_basis
from .symbols import EvalSession, Symbol, gauge_transform

log = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-8


class SpectralError(RuntimeError):
    pass


# -------------------------------------------------------------- cluster operators


@dataclass
class ClusterOperator:
    points: np.ndarray
    matrix: np.ndarray
    seed_index: int = 0
    _eig: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    def eigenvalues(self) -> np.ndarray:
        if self._eig is None:
            self._eig = linalg.eigh(self.matrix, eigvals_only=True)
        return self._eig

    def hermitian_residual(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T))) if self.size else 0.0


def assemble(w: Symbol, points, seed_index: int = 0) -> ClusterOperator:
    """Matrix with entry (η′, η) = |η|²[η′=η] + ŵ(η′−η, η) over the ordered cluster points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    H = np.zeros((n, n), dtype=complex)
    H[np.arange(n), np.arange(n)] = np.sum(pts ** 2, axis=1)
    diff = pts[:, None, :] - pts[None, :, :]  # row minus column
    keys = {}
    for i, j in itertools.product(range(n), range(n)):
        keys.setdefault(freq_key(diff[i, j]), []).append((i, j))
    with EvalSession():
        for key, (theta, coef) in w.items():
            pairs = keys.get(key)
            if not pairs:
                continue
            rows = np.array([p[0] for p in pairs])
            cols = np.array([p[1] for p in pairs])
            H[rows, cols] += coef(pts[cols])
    op = ClusterOperator(pts, H, seed_index)
    res = op.hermitian_residual()
    if res > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(H)))):
        raise SpectralError(f"cluster matrix is not Hermitian (residual {res:.3g}); symbol symmetry is broken")
    op.matrix = (H + H.conj().T) / 2
    return op


@dataclass
class GValue:
    point: np.ndarray
    value: float
    cluster_size: int = 1


def g_map(w: Symbol, xi, geometry) -> GValue:
    """The t(ξ)-th ascending eigenvalue of the cluster operator, t(ξ) being ξ's rank in the cluster."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    cl = geometry.cluster(xi)
    op = assemble(w, cl.points, cl.seed_index)
    return GValue(xi, float(op.eigenvalues()[cl.seed_index]), len(cl))


def g_values(w: Symbol, pts, geometry=None, workers: int = 1) -> tuple:
    """g at many points; returns (values, number of cluster solves, number of failures)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    zero = np.zeros(pts.shape[1])
    with EvalSession():
        vals = np.sum(pts ** 2, axis=1) + w.coeff(zero, pts).real
    off = [v for v in w.support() if np.linalg.norm(v) > FREQ_TOL]
    if not off or geometry is None:
        return vals, 0, 0
    idx = np.nonzero(geometry.resonant_mask(pts))[0]
    failures = 0

    def solve(i):
        try:
            return i, g_map(w, pts[i], geometry).value
        except Exception as exc:  # counted, surfaced by the caller
            log.debug("cluster solve failed at %s: %s", pts[i], exc)
            return i, None

    if workers > 1 and len(idx) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(solve, idx))
    else:
        results = [solve(i) for i in idx]
    for i, v in results:
        if v is None:
            failures += 1
            vals[i] = np.nan
        else:
            vals[i] = v
    return vals, len(idx), failures


# --------------------------------------------------------------- residue sums


def _check_monotone(eigs, rs):
    steps = np.diff(eigs, axis=0)
    if np.any(steps <= 0):
        j = int(np.nonzero(np.any(steps <= 0, axis=0))[0][0])
        raise SpectralError(f"eigenbranch {j} of r²I + S(r) is not increasing on [{rs[0]:.6g}, {rs[-1]:.6g}]")


def residue_sum_direct(S, rho: float, K: int, bracket: tuple | None = None, probes: int = 65) -> float:
    """Σ_j τ_j^{K+1}, where λ_j(τ_j² I + S(τ_j)) = ρ², each branch solved by Brent's method."""
    lo, hi = bracket if bracket is not None else (rho / 2, 2 * rho)

    def branch(r):
        M = np.asarray(S(r), dtype=complex)
        M = (M + M.conj().T) / 2
        return r * r + linalg.eigh(M, eigvals_only=True)

    rs = np.linspace(lo, hi, probes)
    eigs = np.array([branch(r) for r in rs])
    _check_monotone(eigs, rs)
    total = 0.0
    for j in range(eigs.shape[1]):
        f = lambda r: branch(r)[j] - rho * rho
        if f(lo) > 0 or f(hi) < 0:
            raise SpectralError(f"branch {j} does not cross ρ² inside [{lo:.6g}, {hi:.6g}]")
        tau = brentq(f, lo, hi, xtol=1e-15 * rho, rtol=4 * np.finfo(float).eps, maxiter=500)
        total += tau ** (K + 1)
    return total


@dataclass
class ContourResult:
    value: float
    zero_count: float
    nodes: int
    converged: bool


def residue_sum_contour(S, dS, rho: float, K: int, center: float | None = None,
                        radius: float | None = None, tol: float = 1e-9, start: int = 512,
                        max_nodes: int = 1 << 15, cond_cap: float = 1e12) -> ContourResult:
    """(2πi)^{-1}∮ z^{K+1} tr[(2z + S′(z))(S(z) + z² − ρ²)^{-1}] dz by the trapezoid rule on a circle."""
    c = rho if center is None else center
    R = rho / 8 if radius is None else radius
    cache = {}

    def samples(n):
        phis = 2 * np.pi * np.arange(n) / n
        out_v, out_c = np.empty(n, dtype=complex), np.empty(n, dtype=complex)
        for i, phi in enumerate(phis):
            key = (i * (max_nodes // n))
            if key in cache:
                out_v[i], out_c[i] = cache[key]
                continue
            e = np.exp(1j * phi)
            z = c + R * e
            Sz = np.atleast_2d(np.asarray(S(z), dtype=complex))
            n_ = len(Sz)
            M = Sz + (z * z - rho * rho) * np.eye(n_)
            if np.linalg.cond(M) > cond_cap:
                raise SpectralError("contour passes too close to a zero of the determinant; perturb the radius")
            D = 2 * z * np.eye(n_) + np.atleast_2d(np.asarray(dS(z), dtype=complex))
            tr = np.trace(np.linalg.solve(M, D))
            jac = R * e  # dz / (i dφ)
            cache[key] = (z ** (K + 1) * tr * jac, tr * jac)
            out_v[i], out_c[i] = cache[key]
        return out_v.mean(), out_c.mean()

    n = start
    prev = samples(n)
    while n < max_nodes:
        n *= 2
        cur = samples(n)
        if abs(cur[0] - prev[0]) <= tol * abs(cur[0]) and abs(cur[1] - prev[1]) <= tol * max(1.0, abs(cur[1])):
            return ContourResult(float(cur[0].real), float(cur[1].real), n, True)
        prev = cur
    return ContourResult(float(prev[0].real), float(prev[1].real), n, False)


def _rand_hermitian(rng, n, norm):
    X = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    H = (X + X.conj().T) / 2
    return H * (norm / max(np.linalg.norm(H, 2), 1e-300))


@dataclass
class MatrixFamily:
    """S(z) = A + (z/ρ) B + exp(−z/ρ) C with Hermitian A, B, C."""
    rho: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def size(self) -> int:
        return len(self.A)

    def S(self, z):
        return self.A + (z / self.rho) * self.B + np.exp(-z / self.rho) * self.C

    def dS(self, z):
        return (self.B - np.exp(-z / self.rho) * self.C) / self.rho


def random_family(rng, size: int, rho: float, scale: float = 0.1) -> MatrixFamily:
    """Random analytic family whose norm on the relevant range stays below scale·ρ²."""
    parts = rng.dirichlet(np.ones(3)) * scale * rho * rho / 2
    return MatrixFamily(rho, _rand_hermitian(rng, size, parts[0]),
                        _rand_hermitian(rng, size, parts[1]), _rand_hermitian(rng, size, parts[2]))


def residue_suite(count: int = 100, seed: int = 0) -> list:
    """Cross-check both residue-sum routes on random families; one record per family."""
    rng = np.random.default_rng(seed)
    rows = []
    for fid in range(count):
        size = int(rng.integers(1, 7))
        K = int(rng.integers(0, 3))
        rho = float(rng.uniform(5, 50))
        fam = random_family(rng, size, rho)
        direct = residue_sum_direct(fam.S, rho, K)
        cont = residue_sum_contour(fam.S, fam.dS, rho, K)
        rel = abs(direct - cont.value) / abs(direct)
        rows.append({"family": fid, "size": size, "K": K, "rho": rho, "direct": direct,
                     "contour": cont.value, "relative_error": rel, "zero_count": cont.zero_count,
                     "count_error": abs(cont.zero_count - size), "nodes": cont.nodes})
    return rows


# -------------------------------------------------------------- Floquet-Bloch


def floquet_lattice(b: Potential, lattice=None) -> np.ndarray:
    """Rows form a basis of the frequency lattice containing all frequencies of b."""
    d = b.dim
    nz = [v for v, _ in b.items() if np.linalg.norm(v) > FREQ_TOL]
    if lattice is not None:
        B = np.asarray(lattice, dtype=float).reshape(d, d)
        if abs(np.linalg.det(B)) < 1e-12:
            raise SpectralError("declared lattice basis is singular")
        for v in nz:
            c = np.linalg.solve(B.T, v)
            if np.max(np.abs(c - np.round(c))) > 1e-9:
                raise SpectralError(f"frequency {v.tolist()} is not in the declared lattice")
        return B
    if not nz:
        return np.eye(d)
    try:
        B = lattice_basis(np.array(nz))
    except PotentialError as exc:
        raise SpectralError(f"frequencies do not lie in a common lattice: {exc}") from exc
    if len(B) < d:
        raise SpectralError("frequencies span a proper subspace; declare a lattice explicitly")
    return B


def _lattice_coords(B, k, cutoff):
    """Integer coordinates n with |k + n·B| <= cutoff."""
    d = len(B)
    Binv = np.linalg.inv(B)
    reach = int(math.ceil((cutoff + np.linalg.norm(k)) * np.linalg.norm(Binv, 2))) + 1
    rng = np.arange(-reach, reach + 1)
    n = np.array(list(itertools.product(rng, repeat=d)), dtype=np.int64).reshape(-1, d)
    pts = k + n @ B
    return n[np.sum(pts ** 2, axis=1) <= cutoff * cutoff]


def _lattice_points(B, k, cutoff):
    """Points k + n·B with |k + n·B| <= cutoff."""
    return k + _lattice_coords(B, k, cutoff) @ B


def _max_freq(b: Potential) -> float:
    return max((float(np.linalg.norm(v)) for v, _ in b.items()), default=0.0)


def _couplings(b: Potential):
    return [(v, c) for v, c in b.items() if np.linalg.norm(v) > FREQ_TOL]


def _encode(n, base):
    n = np.asarray(n, dtype=np.int64)
    out = np.zeros(len(n), dtype=np.int64)
    for j in range(n.shape[1]):
        out = out * (2 * base + 1) + (n[:, j] + base)
    return out


def floquet_matrix(b: Potential, k, cutoff: float, B=None) -> tuple:
    """Plane-wave matrix of H(k) on {k+γ : |k+γ| <= cutoff}; returns (matrix, points).

    The matrix is real symmetric when every coefficient of b is real.
    """
    B = floquet_lattice(b) if B is None else B
    k = np.asarray(k, dtype=float).reshape(b.dim)
    n = _lattice_coords(B, k, cutoff)
    pts = k + n @ B
    couplings = _couplings(b)
    real = all(abs(complex(c).imag) == 0 for _, c in couplings)
    H = np.diag(np.sum(pts ** 2, axis=1) + b.mean().real).astype(float if real else complex)
    if couplings:
        shifts = [np.rint(np.linalg.solve(B.T, v)).astype(np.int64) for v, _ in couplings]
        base = int(np.abs(n).max()) + int(max(np.abs(sh).max() for sh in shifts)) + 1
        keys = _encode(n, base)
        order = np.argsort(keys)
        sorted_keys = keys[order]
        for (v, c), sh in zip(couplings, shifts):
            target = _encode(n + sh, base)
            pos = np.clip(np.searchsorted(sorted_keys, target), 0, len(keys) - 1)
            hit = sorted_keys[pos] == target
            rows = order[pos[hit]]
            cols = np.nonzero(hit)[0]
            H[rows, cols] += c.real if real else c
    return H, pts


def default_cutoff(b: Potential, lam_max: float, margin_steps: float = 4.0) -> float:
    step = max(_max_freq(b), 1.0)
    return math.sqrt(max(lam_max, 0.0) + b.l1_norm()) + margin_steps * step


def floquet_count(b: Potential, k, lam: float, cutoff: float | None = None, lattice=None) -> int:
    """#{eigenvalues of H(k) <= λ} on the plane-wave truncation."""
    B = floquet_lattice(b, lattice)
    cutoff = default_cutoff(b, lam) if cutoff is None else cutoff
    if cutoff * cutoff < lam:
        raise SpectralError("cutoff must exceed √λ")
    H, _ = floquet_matrix(b, k, cutoff, B)
    ev = linalg.eigh(H, eigvals_only=True)
    return int(np.sum(ev <= lam))


def floquet_eigenvalues(b: Potential, k, cutoff: float, lattice=None) -> np.ndarray:
    H, _ = floquet_matrix(b, k, cutoff, floquet_lattice(b, lattice))
    return linalg.eigh(H, eigvals_only=True)


# ------------------------------------------------------------ band-grid DOS


def _simplex_table(d: int) -> np.ndarray:
    """Kuhn simplices of the unit cube as vertex offsets, shape (d!, d+1, d)."""
    out = []
    for perm in itertools.permutations(range(d)):
        v = np.zeros(d, dtype=int)
        verts = [v.copy()]
        for axis in perm:
            v[axis] += 1
            verts.append(v.copy())
        out.append(verts)
    return np.array(out)


def grid_simplices(n: int, d: int, periodic: bool) -> np.ndarray:
    """Node indices (ns, d+1) of the Kuhn triangulation of an n^d cell grid.

    Periodic grids have n^d nodes (indices wrap); open grids have (n+1)^d nodes.
    """
    m = n if periodic else n + 1
    cells = np.array(list(itertools.product(range(n), repeat=d)), dtype=int)
    table = _simplex_table(d)
    verts = cells[:, None, None, :] + table[None, :, :, :]  # (cells, d!, d+1, d)
    if periodic:
        verts %= n
    weights = m ** np.arange(d - 1, -1, -1)
    idx = verts @ weights
    return idx.reshape(-1, d + 1)


def grid_nodes(n: int, d: int, periodic: bool) -> np.ndarray:
    m = n if periodic else n + 1
    return np.array(list(itertools.product(range(m), repeat=d)), dtype=float) / n


_NETWORKS = {2: [(0, 1)], 3: [(0, 1), (1, 2), (0, 1)], 4: [(0, 1), (2, 3), (0, 2), (1, 3), (1, 2)]}


def _sort_rows(E: np.ndarray) -> np.ndarray:
    """Sort along the last (short) axis with a min/max network."""
    cols = [E[..., i] for i in range(E.shape[-1])]
    for i, j in _NETWORKS.get(len(cols), []):
        a, b = cols[i], cols[j]
        cols[i], cols[j] = np.minimum(a, b), np.maximum(a, b)
    return np.stack(cols, axis=-1)


def fraction_below(E: np.ndarray, lam: float, presorted: bool = False) -> np.ndarray:
    """Volume fraction of each simplex where the linear interpolant of vertex energies is <= λ.

    E has shape (m, d+1) with d = 1, 2, 3.
    """
    if not presorted:
        E = _sort_rows(E)
    m, v = E.shape
    d = v - 1
    f = np.zeros(m)
    f[E[:, -1] <= lam] = 1.0
    mid = (E[:, 0] < lam) & (E[:, -1] > lam)
    if not np.any(mid):
        return f
    e = E[mid]
    # split exact ties so every denominator is positive; the fraction is continuous in E
    spread = np.maximum(np.abs(e).max(axis=1, keepdims=True), 1.0) * 1e-12
    e = e + spread * np.arange(v)[None, :]
    x = lam
    if d == 1:
        f[mid] = (x - e[:, 0]) / (e[:, 1] - e[:, 0])
        return f
    if d == 2:
        e1, e2, e3 = e.T
        out = np.where(x < e2, (x - e1) ** 2 / ((e2 - e1) * (e3 - e1)),
                       1.0 - (e3 - x) ** 2 / ((e3 - e1) * (e3 - e2)))
        f[mid] = out
        return f
    if d == 3:
        e1, e2, e3, e4 = e.T
        e21, e31, e41, e32, e42, e43 = e2 - e1, e3 - e1, e4 - e1, e3 - e2, e4 - e2, e4 - e3
        low = (x - e1) ** 3 / (e21 * e31 * e41)
        t = x - e2
        middle = (e21 ** 2 + 3 * e21 * t + 3 * t ** 2 - (e31 + e42) / (e32 * e42) * t ** 3) / (e31 * e41)
        high = 1.0 - (e4 - x) ** 3 / (e41 * e42 * e43)
        f[mid] = np.where(x < e2, low, np.where(x < e3, middle, high))
        return f
    raise SpectralError("band-grid quadrature supports d = 1, 2, 3")


@dataclass
class BandGrid:
    """Band energies at the nodes of a regular grid over the dual cell.

    Coupled bands are stored sorted per node (periodic grid).  Free bands |k+γ|² + M(b)
    are generated on demand on an open grid, one smooth band per lattice point γ.
    """
    n: int
    dim: int
    basis: np.ndarray
    periodic: bool
    bands_complete_below: float
    energies: np.ndarray | None = None  # (nodes, bands)
    free_shifts: np.ndarray | None = None
    free_offset: float = 0.0

    @property
    def cell_volume(self) -> float:
        return float(abs(np.linalg.det(self.basis)))

    @property
    def band_count(self) -> int:
        return len(self.free_shifts) if self.energies is None else self.energies.shape[1]

    def band_energies(self, bands) -> np.ndarray:
        if self.energies is not None:
            return self.energies[:, bands]
        nodes = grid_nodes(self.n, self.dim, periodic=False) @ self.basis
        gam = self.free_shifts[bands]
        return np.sum((nodes[:, None, :] + gam[None, :, :]) ** 2, axis=2) + self.free_offset

    def count(self, lams, chunk: int = 64) -> np.ndarray:
        """(2π)^{-d} ∫_cell #{E_j(k) <= λ} dk with linearly interpolated bands."""
        lams = np.atleast_1d(np.asarray(lams, dtype=float))
        if np.any(lams > self.bands_complete_below):
            raise SpectralError(f"λ = {lams.max()} exceeds the range covered by the computed bands")
        simp = grid_simplices(self.n, self.dim, self.periodic)
        ns = len(simp)
        totals = np.zeros(len(lams))
        todo = np.arange(self.band_count)
        if self.energies is None:
            # free bands: skip those whose whole range lies on one side of every λ
            lo_b, hi_b = self._free_band_bounds()
            straddle = np.any((lo_b[:, None] < lams[None, :]) & (hi_b[:, None] > lams[None, :]), axis=1)
            totals += np.sum(hi_b[~straddle, None] <= lams[None, :], axis=0) * float(ns)
            todo = np.nonzero(straddle)[0]
        for start in range(0, len(todo), chunk):
            bands = todo[start:start + chunk]
            Eb = self.band_energies(bands)
            lo, hi = Eb.min(axis=0), Eb.max(axis=0)
            totals += np.array([float(np.sum(hi <= lam)) * ns for lam in lams])
            active = np.any((lo[:, None] < lams[None, :]) & (hi[:, None] > lams[None, :]), axis=1)
            if not np.any(active):
                continue
            bands_a = np.nonzero(active)[0]
            E = np.moveaxis(Eb[:, bands_a][simp], 2, 1)  # (ns, nb, d+1), unsorted
            e_min, e_max = E.min(axis=2), E.max(axis=2)
            for i, lam in enumerate(lams):
                cut = (lo[bands_a] < lam) & (hi[bands_a] > lam)
                if not np.any(cut):
                    continue
                totals[i] += float(np.count_nonzero(e_max[:, cut] <= lam))
                cross = (e_min[:, cut] < lam) & (e_max[:, cut] > lam)
                if np.any(cross):
                    totals[i] += float(np.sum(fraction_below(E[:, cut, :][cross], lam)))
        return totals / ns * self.cell_volume / (2 * math.pi) ** self.dim

    def _free_band_bounds(self) -> tuple:
        """Enclosing range of |k+γ|² over the cell: k lies within the circumradius of the cell centre."""
        corners = np.array(list(itertools.product((0.0, 1.0), repeat=self.dim))) @ self.basis
        centre = corners.mean(axis=0)
        radius = float(np.max(np.linalg.norm(corners - centre, axis=1))) * (1 + 1e-12)
        dist = np.linalg.norm(self.free_shifts + centre, axis=1)
        lo = np.maximum(dist - radius, 0.0) ** 2 + self.free_offset
        hi = (dist + radius) ** 2 + self.free_offset
        return lo, hi

    def count_midpoint(self, lams) -> np.ndarray:
        raise SpectralError("midpoint counts are produced by periodic_dos(quadrature='midpoint')")


def _band_count_bound(b: Potential, B, lam_max: float) -> int:
    """Weyl bound on the number of eigenvalues below λ_max over all k (min-max with ‖b‖∞ <= Σ|a|)."""
    d = b.dim
    reach = math.sqrt(max(lam_max + b.l1_norm() - b.mean().real, 0.0))
    # count of lattice points in a ball of radius reach + cell diameter
    diam = float(np.linalg.norm(B.sum(axis=0))) + float(np.linalg.norm(B, axis=1).sum())
    pts = _lattice_points(B, np.zeros(d), reach + diam)
    return max(len(pts), 1)


def band_grid(b: Potential, n: int, lam_max: float, lattice=None, margin_steps: float = 4.0,
              workers: int = 1, cache: dict | None = None) -> BandGrid:
    """Band energies on a regular grid over the dual cell."""
    d = b.dim
    B = floquet_lattice(b, lattice)
    couplings = _couplings(b)
    mean = b.mean().real
    if not couplings:
        # free bands |k+γ|² + M(b), each smooth over the cell: open grid, no sorting
        reach = math.sqrt(max(lam_max - mean, 0.0)) + float(np.linalg.norm(B, axis=1).sum()) + 1.0
        gam = _lattice_points(B, np.zeros(d), reach)
        return BandGrid(n, d, B, False, lam_max, free_shifts=gam, free_offset=mean)
    cutoff = default_cutoff(b, lam_max, margin_steps)
    nb = _band_count_bound(b, B, lam_max)
    nodes = grid_nodes(n, d, periodic=True)
    cache = {} if cache is None else cache

    def solve(t):
        # H(−k) is the complex conjugate of H(k) for real potentials: same spectrum
        fwd = np.round(t * 2 ** 20).astype(np.int64) % 2 ** 20
        key = min(tuple(fwd), tuple((-fwd) % 2 ** 20))
        hit = cache.get(key)
        if hit is not None and len(hit) >= nb:
            return hit[:nb]
        H, _ = floquet_matrix(b, t @ B, cutoff, B)
        top = min(nb, len(H)) - 1
        ev = linalg.eigh(H, eigvals_only=True, subset_by_index=[0, top])
        cache[key] = ev
        return ev

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(solve, nodes))
    else:
        rows = [solve(t) for t in nodes]
    E = np.array(rows)
    if E.shape[1] < nb:
        raise SpectralError("plane-wave basis smaller than the band count bound; raise the cutoff")
    # above the lowest energy of the last computed band, higher bands could intrude
    return BandGrid(n, d, B, True, float(E[:, -1].min()), energies=E)


@dataclass
class PeriodicDOS:
    lambdas: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    grid: int
    tolerance: float
    converged: bool
    quadrature: str


def periodic_dos(b: Potential, lams, tol: float = 1e-5, n0: int | None = None, n_max: int | None = None,
                 quadrature: str = "linear", lattice=None, workers: int = 1) -> PeriodicDOS:
    """N(λ) = (2π)^{-d} ∫_cell #{eigenvalues of H(k) <= λ} dk with a grid-doubling error estimate.

    Both quadratures converge at second order away from band edges, so the error of the
    finer grid is estimated as |N_n − N_{n/2}|/3; doubling stops once it falls below tol·max(1, N).
    """
    lams = np.sort(np.atleast_1d(np.asarray(lams, dtype=float)))
    d = b.dim
    defaults = {1: (64, 4096), 2: (8, 64), 3: (4, 16)}
    n0 = defaults[d][0] if n0 is None else n0
    n_max = defaults[d][1] if n_max is None else n_max
    lam_max = float(lams.max())
    cache = {}

    def evaluate(n):
        if quadrature == "linear":
            return band_grid(b, n, lam_max, lattice, workers=workers, cache=cache).count(lams)
        if quadrature == "midpoint":
            return _midpoint_count(b, n, lams, lattice, cache)
        raise SpectralError(f"unknown quadrature {quadrature!r}")

    n = n0
    prev = evaluate(n)
    while True:
        n *= 2
        cur = evaluate(n)
        err = np.abs(cur - prev) / 3
        ok = bool(np.all(err <= tol * np.maximum(1.0, np.abs(cur))))
        if ok or n >= n_max:
            if not ok:
                log.warning("periodic DOS did not reach tolerance %.1e at grid %d (max error %.3g)", tol, n, err.max())
            return PeriodicDOS(lams, cur, err, n, tol, ok, quadrature)
        prev = cur


def _midpoint_count(b: Potential, n: int, lams, lattice, cache) -> np.ndarray:
    d = b.dim
    B = floquet_lattice(b, lattice)
    lam_max = float(np.max(lams))
    cutoff = default_cutoff(b, lam_max)
    t = (np.array(list(itertools.product(range(n), repeat=d)), dtype=float) + 0.5) / n
    counts = np.zeros(len(np.atleast_1d(lams)))
    for tk in t:
        key = ("mid",) + tuple(np.round(tk * 2 ** 20).astype(np.int64))
        ev = cache.get(key)
        if ev is None:
            if _couplings(b):
                H, _ = floquet_matrix(b, tk @ B, cutoff, B)
                ev = linalg.eigh(H, eigvals_only=True)
            else:
                pts = _lattice_points(B, tk @ B, cutoff)
                ev = np.sort(np.sum(pts ** 2, axis=1)) + b.mean().real
            cache[key] = ev
        counts += np.searchsorted(ev, np.atleast_1d(lams), side="right")
    return counts / len(t) * abs(np.linalg.det(B)) / (2 * math.pi) ** d


# --------------------------------------------------------------- matrix oracles


def lattice_modes(b: Potential, radius: float, lattice=None) -> np.ndarray:
    B = floquet_lattice(b, lattice)
    pts = _lattice_points(B, np.zeros(b.dim), radius)
    return pts[np.lexsort(tuple(pts.T[::-1]))]


def symbol_matrix(sym: Symbol, modes, xi0) -> np.ndarray:
    """Matrix of op(sym) on plane waves e^{i(ξ0+ν)x}: entry (ν+θ, ν) = ŝ(θ, ξ0+ν)."""
    modes = np.atleast_2d(modes)
    xi0 = np.asarray(xi0, dtype=float).reshape(modes.shape[1])
    index = {freq_key(m): i for i, m in enumerate(modes)}
    pts = modes + xi0
    n = len(modes)
    M = np.zeros((n, n), dtype=complex)
    with EvalSession():
        for _, (theta, coef) in sym.items():
            rows = np.array([index.get(freq_key(m + theta), -1) for m in modes])
            cols = np.nonzero(rows >= 0)[0]
            if len(cols):
                M[rows[cols], cols] += coef(pts[cols])
    return M


def _inner(modes, radius):
    return np.nonzero(np.linalg.norm(modes, axis=1) <= radius)[0]


def conjugation_discrepancy(b: Potential, params, k_tilde: int, radius: float = 60.0,
                            xi0=None, inner: float | None = None, gauge=None) -> float:
    """‖U*(H₀+B)U − (H₀+W)‖₂ on an inner block, with U = exp(iΨ) built from ψ_1..ψ_k̃."""
    d = b.dim
    xi0 = np.full(d, 0.3173) if xi0 is None else np.asarray(xi0, dtype=float)
    modes = lattice_modes(b, radius)
    res = gauge if gauge is not None else gauge_transform(Symbol.from_potential(b), params, k_tilde)
    pts = modes + xi0
    H0 = np.diag(np.sum(pts ** 2, axis=1)).astype(complex)
    H = H0 + symbol_matrix(Symbol.from_potential(b), modes, xi0)
    Psi = sum(symbol_matrix(res.psi[l], modes, xi0) for l in range(1, k_tilde + 1))
    Psi = (Psi + Psi.conj().T) / 2
    mu, V = linalg.eigh(Psi)
    U = (V * np.exp(1j * mu)) @ V.conj().T
    A1 = U.conj().T @ H @ U
    target = H0 + symbol_matrix(res.W, modes, xi0)
    sel = _inner(modes, radius - 20 * max(_max_freq(b), 1.0) if inner is None else inner)
    D = (A1 - target)[np.ix_(sel, sel)]
    return float(np.linalg.norm(D, 2))


def formal_expansion_discrepancy(b: Potential, params, k_tilde: int, radius: float = 60.0,
                                 xi0=None, inner: float | None = None, gauge=None) -> dict:
    """Grade-≤k̃ part of Σ_j ad(H; Ψ, …, Ψ)/j! built from matrices, compared with H₀ + W."""
    d = b.dim
    xi0 = np.full(d, 0.3173) if xi0 is None else np.asarray(xi0, dtype=float)
    modes = lattice_modes(b, radius)
    res = gauge if gauge is not None else gauge_transform(Symbol.from_potential(b), params, k_tilde)
    pts = modes + xi0
    H0 = np.diag(np.sum(pts ** 2, axis=1)).astype(complex)
    Bm = symbol_matrix(Symbol.from_potential(b), modes, xi0)
    P = {l: symbol_matrix(res.psi[l], modes, xi0) for l in range(1, k_tilde + 1)}
    ad = lambda X, Y: 1j * (X @ Y - Y @ X)
    total = H0 + Bm
    memo = {}

    def chain(base, X, comp):
        key = (base, comp)
        if key not in memo:
            prev = X if len(comp) == 1 else chain(base, X, comp[:-1])
            memo[key] = ad(prev, P[comp[-1]])
        return memo[key]

    from .symbols import compositions

    for grade in range(1, k_tilde + 1):
        for j in range(1, grade + 1):
            for comp in compositions(grade, j):
                total = total + chain("h0", H0, comp) / math.factorial(j)
        for j in range(1, grade):
            for comp in compositions(grade - 1, j):
                total = total + chain("b", Bm, comp) / math.factorial(j)
    target = H0 + symbol_matrix(res.W, modes, xi0)
    sel = _inner(modes, radius / 2 if inner is None else inner)
    D = (total - target)[np.ix_(sel, sel)]
    diag_sel = (np.diag(total) - np.diag(target))[sel]
    return {"max_abs": float(np.max(np.abs(D))), "diagonal_max_abs": float(np.max(np.abs(diag_sel))),
            "inner_modes": int(len(sel))}
