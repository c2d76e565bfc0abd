"""Quasi-lattice subspaces, resonance zones and regions, clusters, and chamber decomposition."""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .potential import FREQ_TOL, FrequencySet, ScaleParameters, theta_sum

SUBSPACE_TOL = 1e-9
CLUSTER_CAP = 10_000
SUBSET_CAP = 2_000_000


class GeometryError(RuntimeError):
    pass


class Subspace:
    """Span of linearly independent frequencies, with an orthonormal frame."""

    def __init__(self, d: int, basis):
        basis = np.asarray(basis, dtype=float).reshape(-1, d)
        self.d = d
        self.basis = basis
        if len(basis) == 0:
            self.frame = np.zeros((0, d))
        else:
            q, r = np.linalg.qr(basis.T)
            rank = int(np.sum(np.abs(np.diag(r)) > SUBSPACE_TOL * max(1.0, np.abs(r).max())))
            if rank != len(basis):
                raise GeometryError("basis vectors are linearly dependent")
            self.frame = q[:, :rank].T
        self.dim = len(self.frame)
        self.projector = self.frame.T @ self.frame
        full = np.linalg.svd(np.eye(d) - self.projector)[0]
        self.complement = full[:, : d - self.dim].T if self.dim < d else np.zeros((0, d))
        self.id = None

    def __repr__(self):
        return f"Subspace(dim={self.dim}, id={self.id})"

    def same_as(self, other: "Subspace") -> bool:
        return self.dim == other.dim and np.max(np.abs(self.projector - other.projector)) < SUBSPACE_TOL

    def contains_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        resid = np.linalg.norm(pts - pts @ self.projector, axis=1)
        return resid < SUBSPACE_TOL * np.maximum(1.0, np.linalg.norm(pts, axis=1))

    def contains_subspace(self, other: "Subspace") -> bool:
        return other.dim <= self.dim and bool(np.all(self.contains_points(other.frame))) if other.dim else True

    def coords(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.frame.T

    def perp_coords(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.complement.T


def _unique_directions(vectors: np.ndarray) -> np.ndarray:
    """Unit directions up to sign."""
    out = []
    for v in vectors:
        n = np.linalg.norm(v)
        if n < FREQ_TOL:
            continue
        u = v / n
        if not any(abs(abs(u @ w) - 1.0) < 1e-12 for w in out):
            out.append(u)
    return np.array(out).reshape(-1, vectors.shape[1] if vectors.ndim == 2 else 1)


def enumerate_subspaces(tilde: FrequencySet, m: int, cap: int = SUBSET_CAP) -> list:
    d = tilde.dim
    if not 0 <= m <= d:
        raise GeometryError("subspace dimension out of range")
    if m == 0:
        return [Subspace(d, [])]
    if m == d:
        return [Subspace(d, np.eye(d))]
    dirs = _unique_directions(tilde.nonzero())
    if math.comb(len(dirs), m) > cap:
        raise GeometryError(f"subspace enumeration exceeds the cap of {cap} subsets")
    found = []
    for combo in itertools.combinations(range(len(dirs)), m):
        vecs = dirs[list(combo)]
        if np.linalg.matrix_rank(vecs, tol=1e-9) < m:
            continue
        cand = Subspace(d, vecs)
        if not any(cand.same_as(S) for S in found):
            found.append(cand)
    return found


def enumerate_all_subspaces(tilde: FrequencySet) -> dict:
    return {m: enumerate_subspaces(tilde, m) for m in range(tilde.dim + 1)}


def _intersection(V: Subspace, U: Subspace) -> np.ndarray:
    if V.dim == 0 or U.dim == 0:
        return np.zeros((0, V.d))
    M = (np.eye(V.d) - U.projector) @ V.frame.T
    _, sv, vt = np.linalg.svd(M)
    null = vt[np.sum(sv > 1e-9):]
    return null @ V.frame


def _orth_remainder(S: Subspace, W: np.ndarray) -> np.ndarray:
    """Orthonormal basis of S ⊖ span(W)."""
    if len(W) == 0:
        return S.frame
    Pw = W.T @ np.linalg.pinv(W @ W.T) @ W
    rest = S.frame - S.frame @ Pw
    u, sv, _ = np.linalg.svd(rest.T, full_matrices=False)
    return u[:, sv > 1e-9].T


def principal_angle_sine(V: Subspace, U: Subspace) -> float:
    """Sine of the smallest principal angle between V⊖W and U⊖W with W = V∩U."""
    W = _intersection(V, U)
    A, B = _orth_remainder(V, W), _orth_remainder(U, W)
    if len(A) == 0 or len(B) == 0:
        return 1.0
    cos_max = np.linalg.svd(A @ B.T, compute_uv=False).max()
    return float(math.sqrt(max(0.0, 1.0 - min(1.0, cos_max) ** 2)))


def in_lambda(theta, xi, params: ScaleParameters) -> bool:
    theta = np.asarray(theta, dtype=float)
    n = np.linalg.norm(theta)
    if n < FREQ_TOL:
        raise GeometryError("resonance zone is undefined for the zero frequency")
    return bool(abs(np.asarray(xi, dtype=float) @ theta) / n <= params.L[0])


@dataclass
class Cluster:
    seed: np.ndarray
    points: np.ndarray
    subspace: Subspace
    seed_index: int

    def __len__(self):
        return len(self.points)

    def diameter(self) -> float:
        if len(self.points) < 2:
            return 0.0
        diff = self.points[:, None, :] - self.points[None, :, :]
        return float(np.linalg.norm(diff, axis=2).max())


def order_points(points: np.ndarray) -> np.ndarray:
    """Permutation sorting by ascending norm, ties broken lexicographically."""
    norms = np.round(np.linalg.norm(points, axis=1), 9)
    keys = tuple(np.round(points[:, j], 9) for j in reversed(range(points.shape[1]))) + (norms,)
    return np.lexsort(keys)


# ---------------------------------------------------------------- decomposition


@dataclass
class SimplexPatch:
    subspace: Subspace
    apex: np.ndarray
    face_normals: np.ndarray
    vertices: np.ndarray
    chamber_normals: np.ndarray
    level: float
    kind: str
    min_side: float = math.inf
    min_angle: float = math.inf

    @property
    def K(self) -> int:
        return len(self.face_normals) - 1

    def diameter(self) -> float:
        if len(self.vertices) < 2:
            return 0.0
        g = np.clip(self.vertices @ self.vertices.T, -1, 1)
        return float(np.arccos(g).max())

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        eta = np.atleast_2d(pts) @ self.subspace.complement.T @ self.subspace.complement - self.apex
        return np.all(eta @ self.face_normals.T > -tol, axis=1)

    def margin(self, pts) -> np.ndarray:
        eta = np.atleast_2d(pts) @ self.subspace.complement.T @ self.subspace.complement - self.apex
        return np.min(eta @ self.face_normals.T, axis=1)

    def certificate(self) -> dict:
        return {"kind": self.kind, "min_side": _finite(self.min_side), "min_angle": _finite(self.min_angle),
                "apex": self.apex.tolist(), "faces": len(self.face_normals)}


@dataclass
class SlabPiece:
    """Piece of a non-cone chamber between the true face and the shifted apex level."""

    subspace: Subspace
    normals: np.ndarray
    lower: np.ndarray
    slice_index: int
    upper: float

    def margin(self, pts) -> np.ndarray:
        proj = np.atleast_2d(pts) @ self.normals.T
        slack = proj - self.lower
        top = self.upper - proj[:, self.slice_index]
        return np.minimum(slack.min(axis=1), top)

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        return self.margin(pts) > -tol

    def _section_constraints(self, t: float):
        local = self.normals @ self.subspace.complement.T
        n = local[self.slice_index]
        k = len(n)
        plane = np.linalg.svd(np.eye(k) - np.outer(n, n))[0][:, : k - 1].T
        A, c = [], []
        for j, (mu, low) in enumerate(zip(local, self.lower)):
            if j == self.slice_index:
                continue
            a = plane @ mu
            A.append(a)
            c.append(low - t * (mu @ n))
        return plane, np.array(A), np.array(c)

    def interval(self, t: float) -> tuple:
        """1-D section {⟨ξ, n_l⟩ = t} as an interval of the in-line coordinate."""
        _, A, c = self._section_constraints(t)
        lo, hi = -math.inf, math.inf
        for a, low in zip(A[:, 0], c):
            if abs(a) < 1e-14:
                if low >= 0:
                    return (0.0, 0.0)
                continue
            if a > 0:
                lo = max(lo, low / a)
            else:
                hi = min(hi, low / a)
        return (lo, max(lo, hi))

    def section(self, t: float, triangulation: str = "vertex"):
        """Section at level t: an interval for 2-D complements, a chamber decomposition for 3-D."""
        if len(self.normals @ self.subspace.complement.T) == 0:
            raise GeometryError("empty slab")
        plane, A, c = self._section_constraints(t)
        if plane.shape[0] == 1:
            return self.interval(t)
        norms = np.linalg.norm(A, axis=1)
        keep = norms > 1e-12
        return decompose_chamber(A[keep] / norms[keep, None], c[keep] / norms[keep], triangulation)


def _finite(x):
    return None if not np.isfinite(x) else float(x)


@dataclass
class Chamber:
    subspace: Subspace
    signs: tuple
    constraints: np.ndarray
    normals: np.ndarray
    level: float
    kind: str
    patches: list = field(default_factory=list)
    slabs: list = field(default_factory=list)

    def contains(self, pts) -> np.ndarray:
        proj = np.atleast_2d(pts) @ self.constraints.T
        return np.all(proj > self.level, axis=1)

    def pieces(self) -> list:
        return list(self.patches) + list(self.slabs)


@dataclass
class RegionDecomposition:
    subspace: Subspace
    level: float
    chambers: list
    floor: float

    def patches(self) -> list:
        return [p for c in self.chambers for p in c.patches]

    def tiling_check(self, n_points: int = 100_000, seed: int = 0, tol: float = 1e-9) -> dict:
        """Monte Carlo check that each chamber is the disjoint union of its pieces.

        Points are drawn in a ball of V⊥ around the origin large enough to reach past every apex;
        points within `tol` of a piece boundary are ignored.
        """
        comp = self.subspace.complement
        k = comp.shape[0]
        apexes = [np.linalg.norm(p.apex) for p in self.patches()]
        radius = 4 * max(apexes + [abs(self.level), 1.0])
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_points, k))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = (radius * rng.random(n_points) ** (1.0 / k))[:, None] * dirs @ comp
        inside_total, gaps, doubles = 0, 0, 0
        for ch in self.chambers:
            inside = pts[ch.contains(pts)]
            pieces = ch.pieces()
            if len(inside) == 0 or not pieces:
                continue
            margins = np.stack([p.margin(inside) for p in pieces])
            clear = np.all(np.abs(margins) > tol, axis=0)
            hits = np.sum(margins > tol, axis=0)[clear]
            inside_total += int(clear.sum())
            gaps += int(np.sum(hits == 0))
            doubles += int(np.sum(hits > 1))
        return {"points": n_points, "inside": inside_total, "gaps": gaps, "double_membership": doubles,
                "passed": gaps == 0 and doubles == 0}

    def report(self) -> dict:
        kinds = {}
        for c in self.chambers:
            kinds[c.kind] = kinds.get(c.kind, 0) + 1
        certs = [p.certificate() for p in self.patches()]
        sides = [c["min_side"] for c in certs if c["min_side"] is not None]
        angles = [c["min_angle"] for c in certs if c["min_angle"] is not None]
        return {
            "subspace_dim": self.subspace.dim,
            "level": self.level,
            "chambers": len(self.chambers),
            "chamber_kinds": kinds,
            "patches": len(certs),
            "slabs": sum(len(c.slabs) for c in self.chambers),
            "min_side": min(sides) if sides else None,
            "min_angle": min(angles) if angles else None,
            "floor": self.floor,
            "certified": all((s is None or s >= self.floor) for s in sides + angles),
            "patch_certificates": certs,
        }


def _lp_min(c, A_ge, b_ge):
    """min c·x subject to A_ge x >= b_ge; returns (status, value)."""
    res = linprog(c, A_ub=-A_ge, b_ub=-b_ge, bounds=[(None, None)] * len(c), method="highs")
    if res.status == 3:
        return "unbounded", -math.inf
    if res.status != 0:
        return "infeasible", math.inf
    return "ok", float(res.fun)


def _irredundant(M: np.ndarray, levels: np.ndarray) -> list:
    keep = []
    for i in range(len(M)):
        others = [j for j in range(len(M)) if j != i]
        if not others:
            keep.append(i)
            continue
        status, val = _lp_min(M[i], M[others], levels[others])
        if status == "unbounded" or val < levels[i] - 1e-9 * max(1.0, abs(levels[i])):
            keep.append(i)
    return keep


def _sign_chambers(dirs: np.ndarray) -> list:
    """Sign vectors of the nonempty open chambers of a central hyperplane arrangement."""
    k = dirs.shape[1]
    if len(dirs) == 0:
        return [()]
    if k == 1:
        return [(1,), (-1,)]
    out = []

    def feasible(signs):
        A = np.array(signs)[:, None] * dirs[: len(signs)]
        status, _ = _lp_min(np.zeros(k), A, np.ones(len(signs)))
        return status != "infeasible"

    def dfs(prefix):
        if len(prefix) == len(dirs):
            out.append(tuple(prefix))
            return
        for s in (1, -1):
            cand = prefix + [s]
            if feasible(cand):
                dfs(cand)

    dfs([])
    return out


def _simplex_vertices(N: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(N)
    v = inv.T
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _simplex_certificate(N: np.ndarray) -> tuple:
    k = len(N)
    if k == 1:
        return math.inf, math.inf
    V = _simplex_vertices(N)
    sides = [math.acos(np.clip(V[i] @ V[j], -1, 1)) for i, j in itertools.combinations(range(k), 2)]
    angles = [math.sqrt(max(0.0, 1 - (N[i] @ N[j]) ** 2)) for i, j in itertools.combinations(range(k), 2)]
    return min(sides), min(angles)


def _normals_from_vertices(V: np.ndarray) -> np.ndarray:
    """Inward unit face normals of the simplicial cone spanned by vertex directions V (k×k)."""
    inv = np.linalg.inv(V.T)
    N = inv / np.linalg.norm(inv, axis=1, keepdims=True)
    return N


def _polygon_vertices(N: np.ndarray) -> np.ndarray:
    """Ordered vertex directions of the spherical polygon {η : N η >= 0} in R^3."""
    verts = []
    for i, j in itertools.combinations(range(len(N)), 2):
        v = np.cross(N[i], N[j])
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            continue
        v = v / nv
        for cand in (v, -v):
            if np.all(N @ cand > -1e-10) and not any(np.linalg.norm(cand - w) < 1e-9 for w in verts):
                verts.append(cand)
    verts = np.array(verts)
    c = verts.sum(axis=0)
    c /= np.linalg.norm(c)
    e1 = verts[0] - (verts[0] @ c) * c
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(c, e1)
    ang = np.arctan2(verts @ e2, verts @ e1)
    return verts[np.argsort(ang)]


def _subdivide(V: np.ndarray, max_diameter: float) -> list:
    """Midpoint subdivision of a spherical simplex until its diameter is below max_diameter."""
    g = np.clip(V @ V.T, -1, 1)
    if np.arccos(g).max() <= max_diameter:
        return [V]
    k = len(V)
    if k == 2:
        mid = V[0] + V[1]
        mid /= np.linalg.norm(mid)
        return _subdivide(np.array([V[0], mid]), max_diameter) + _subdivide(np.array([mid, V[1]]), max_diameter)
    m01, m12, m02 = [(V[a] + V[b]) / np.linalg.norm(V[a] + V[b]) for a, b in ((0, 1), (1, 2), (0, 2))]
    pieces = [np.array([V[0], m01, m02]), np.array([m01, V[1], m12]),
              np.array([m02, m12, V[2]]), np.array([m01, m12, m02])]
    out = []
    for p in pieces:
        out.extend(_subdivide(p, max_diameter))
    return out


def decompose_chamber(normals: np.ndarray, level, triangulation: str = "vertex",
                      max_diameter: float | None = None) -> tuple:
    """Decompose the chamber {η : ⟨η, μ_j⟩ > level_j} given in V⊥ coordinates.

    Returns (kind, irredundant normals, levels, patches, slabs); patches are tuples
    (apex, face_normals, vertices, patch_kind) and slabs are (normals, lower, index, upper).
    """
    M = np.asarray(normals, dtype=float)
    k = M.shape[1]
    levels = np.broadcast_to(np.asarray(level, dtype=float), (len(M),)).copy()
    keep = _irredundant(M, levels)
    M, levels = M[keep], levels[keep]
    J = len(M)
    slabs = []
    if J < k:
        raise GeometryError("chamber is unbounded in some direction; not a proper chamber")
    if J == k:
        apex = np.linalg.solve(M, levels)
        kind = "simplex"
        pieces = [(apex, M, "simplex")]
    else:
        apex, *_ = np.linalg.lstsq(M, levels, rcond=None)
        if np.max(np.abs(M @ apex - levels)) < 1e-9 * max(1.0, np.abs(levels).max()):
            kind = "cone"
            pieces = [(apex, F, "cone") for F in _triangulate_cone(M, triangulation)]
        else:
            kind = "general"
            if k > 3:
                raise GeometryError(f"non-cone chamber in a {k}-dimensional complement is not supported")
            res = linprog(M.sum(axis=0), A_ub=-M, b_ub=-levels, bounds=[(None, None)] * k, method="highs")
            a = res.x
            top = M @ a
            inner = _irredundant(M, top)
            pieces = [(a, F, "general-cone") for F in _triangulate_cone(M[inner], triangulation)]
            for l in range(J):
                if top[l] - levels[l] <= 1e-12 * max(1.0, abs(top[l])):
                    continue
                lower = np.where(np.arange(J) < l, top, levels)
                slabs.append((M.copy(), lower, l, float(top[l])))
    patches = []
    for apex, F, pkind in pieces:
        if max_diameter is None:
            patches.append((apex, F, _simplex_vertices(F), pkind))
            continue
        for V in _subdivide(_simplex_vertices(F), max_diameter):
            patches.append((apex, _normals_from_vertices(V), V, pkind + "-subdivided"))
    return kind, M, levels, patches, slabs


def _triangulate_cone(M: np.ndarray, triangulation: str) -> list:
    k = M.shape[1]
    if len(M) == k:
        return [M]
    if k == 1:
        return [M[:1]]
    if k == 2:
        # the cross-section is an arc; keep its two extreme faces
        verts = []
        for i in range(len(M)):
            v = np.array([-M[i][1], M[i][0]])
            for cand in (v, -v):
                if np.all(M @ cand > -1e-10) and not any(np.allclose(cand, w) for w in verts):
                    verts.append(cand / np.linalg.norm(cand))
        return [_normals_from_vertices(np.array(verts[:2]))]
    verts = _polygon_vertices(M)
    n = len(verts)
    if n == 3:
        return [_normals_from_vertices(verts)]
    tris = []
    if triangulation == "vertex":
        for i in range(1, n - 1):
            tris.append(np.array([verts[0], verts[i], verts[i + 1]]))
    elif triangulation == "gravity":
        g = verts.sum(axis=0)
        g /= np.linalg.norm(g)
        for i in range(n):
            tris.append(np.array([g, verts[i], verts[(i + 1) % n]]))
    else:
        raise GeometryError(f"unknown triangulation {triangulation!r}")
    return [_normals_from_vertices(T) for T in tris]


class ResonanceGeometry:
    """Resonance regions for Θ̃ = Θ_k̃ at the scales L_j = ρ_n^{α_j}."""

    def __init__(self, freqs: FrequencySet, params: ScaleParameters, tilde: FrequencySet | None = None):
        if params.dim != freqs.dim:
            raise GeometryError("scale parameters and frequencies disagree on the dimension")
        self.d = freqs.dim
        self.params = params
        self.L = params.L
        self.tilde = tilde if tilde is not None else theta_sum(freqs, params.k_tilde)
        self.table = enumerate_all_subspaces(self.tilde)
        self.subspaces = [V for m in range(self.d + 1) for V in self.table[m]]
        for i, V in enumerate(self.subspaces):
            V.id = i
        self.zero = self.table[0][0]
        self.whole = self.table[self.d][0]
        nz = self.tilde.nonzero()
        self.directions = _unique_directions(nz)
        steps = []
        for v in nz:
            if any(np.allclose(-v, s) for s in steps):
                continue
            steps.append(v)
        self.steps = np.array(steps).reshape(-1, self.d)
        self.parents = {V.id: [] for V in self.subspaces}
        self.children = {V.id: [] for V in self.subspaces}
        for m in range(self.d):
            for V in self.table[m]:
                for W in self.table[m + 1]:
                    if W.contains_subspace(V):
                        mu = _orth_remainder(W, V.frame)[0]
                        self.parents[V.id].append((W, mu))
                        self.children[W.id].append((V, mu))
        self._s = None

    # -- classification -------------------------------------------------------

    def classify(self, xi) -> Subspace:
        return self.subspaces[int(self.classify_many(np.atleast_2d(xi))[0])]

    def classify_many(self, pts) -> np.ndarray:
        """Ascend by dimension: move to W ⊃ V whenever |⟨ξ, μ⟩| <= L_{m+1}."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ids = np.full(len(pts), self.zero.id)
        for m in range(self.d):
            for V in self.table[m]:
                sel = np.nonzero(ids == V.id)[0]
                if len(sel) == 0:
                    continue
                cur = ids[sel]
                proj = pts[sel]
                for W, mu in self.parents[V.id]:
                    hit = (cur == V.id) & (np.abs(proj @ mu) <= self.L[m])
                    cur[hit] = W.id
                ids[sel] = cur
        return ids

    def in_xi1(self, xi, V: Subspace) -> bool:
        """Membership in Ξ₁(V) by searching flags ending at V."""
        xi = np.asarray(xi, dtype=float)
        memo = {}

        def rec(S):
            if S.dim == 0:
                return True
            if S.id in memo:
                return memo[S.id]
            ok = any(abs(xi @ nu) <= self.L[S.dim - 1] and rec(U) for U, nu in self.children[S.id])
            memo[S.id] = ok
            return ok

        return rec(V)

    def regions_by_definition(self, xi) -> list:
        """All V with ξ ∈ Ξ(V) = Ξ₁(V) minus the Ξ₁ of its one-step parents."""
        inside = {V.id: self.in_xi1(xi, V) for V in self.subspaces}
        out = []
        for V in self.subspaces:
            if inside[V.id] and not any(inside[W.id] for W, _ in self.parents[V.id]):
                out.append(V)
        return out

    def resonant_mask(self, pts) -> np.ndarray:
        """Points lying in at least one resonance zone Λ(θ)."""
        pts = np.atleast_2d(pts)
        if len(self.directions) == 0:
            return np.zeros(len(pts), dtype=bool)
        return np.any(np.abs(pts @ self.directions.T) <= self.L[0], axis=1)

    # -- clusters ---------------------------------------------------------------

    def cluster(self, xi, cap: int = CLUSTER_CAP) -> Cluster:
        xi = np.asarray(xi, dtype=float).reshape(self.d)
        V = self.classify(xi)
        if V.dim == self.d:
            raise GeometryError(f"point {xi.tolist()} lies in the bounded region of the whole space")
        L1 = self.L[0]
        norms = np.linalg.norm(self.steps, axis=1)
        units = self.steps / norms[:, None]
        seen = {self._key(xi, xi): xi}
        queue = deque([xi])
        while queue:
            eta = queue.popleft()
            proj = units @ eta
            for j in np.nonzero(np.abs(proj) <= L1)[0]:
                lo = math.ceil((-L1 - proj[j]) / norms[j] - 1e-12)
                hi = math.floor((L1 - proj[j]) / norms[j] + 1e-12)
                for l in range(lo, hi + 1):
                    if l == 0:
                        continue
                    new = eta + l * self.steps[j]
                    key = self._key(new, xi)
                    if key not in seen:
                        seen[key] = new
                        queue.append(new)
                        if len(seen) > cap:
                            raise GeometryError(f"cluster of {xi.tolist()} exceeds the cap of {cap} points")
        pts = np.array(list(seen.values()))
        order = order_points(pts)
        pts = pts[order]
        seed_index = int(np.nonzero(order == 0)[0][0])
        return Cluster(xi, pts, V, seed_index)

    @staticmethod
    def _key(p, origin):
        return tuple(np.round((p - origin) * 1e8).astype(np.int64))

    # -- chambers -----------------------------------------------------------------

    def s_value(self) -> float:
        if self._s is None:
            s = 1.0
            proper = [V for m in range(1, self.d) for V in self.table[m]]
            for V, U in itertools.combinations(proper, 2):
                if V.contains_subspace(U) or U.contains_subspace(V):
                    continue
                s = min(s, principal_angle_sine(V, U))
            self._s = s
        return self._s

    def face_directions(self, V: Subspace) -> np.ndarray:
        """Unit directions n(θ_{V⊥}) for θ ∉ V, in V⊥ coordinates, up to sign."""
        nz = self.tilde.nonzero()
        outside = nz[~V.contains_points(nz)]
        return _unique_directions(V.perp_coords(outside))

    def decompose_region(self, V: Subspace, triangulation: str = "vertex",
                         max_diameter: float | None = None, floor: float | None = None) -> RegionDecomposition:
        if V.dim >= self.d:
            raise GeometryError("decompose_region needs a proper subspace")
        level = float(self.L[V.dim])
        floor = self.s_value() / 4 if floor is None else floor
        dirs = self.face_directions(V)
        Q = V.complement
        chambers = []
        for signs in _sign_chambers(dirs):
            mu = np.array(signs)[:, None] * dirs if len(dirs) else np.zeros((0, len(Q)))
            kind, M, _, patches, slabs = decompose_chamber(mu, level, triangulation, max_diameter)
            ch = Chamber(V, tuple(signs), mu @ Q, M @ Q, level, kind)
            for apex, F, verts, pkind in patches:
                side, ang = _simplex_certificate(F)
                ch.patches.append(SimplexPatch(V, apex @ Q, F @ Q, verts @ Q, M @ Q, level, pkind, side, ang))
            for normals, lower, idx, upper in slabs:
                ch.slabs.append(SlabPiece(V, normals @ Q, lower, idx, upper))
            chambers.append(ch)
        return RegionDecomposition(V, level, chambers, floor)


# ------------------------------------------------------------ patch coordinates


def shifted_coords(patch: SimplexPatch, xi, check: bool = True) -> dict:
    V = patch.subspace
    xi = np.asarray(xi, dtype=float)
    X = V.coords(xi)[0]
    Q = V.complement
    eta = Q @ xi - Q @ patch.apex
    N = patch.face_normals @ Q.T
    r = float(np.linalg.norm(eta))
    if r == 0.0:
        return {"X": X, "r": 0.0, "Phi": np.zeros(len(N)), "constraint_residual": 0.0}
    sin_phi = N @ (eta / r)
    if check and np.any(sin_phi < -1e-9):
        raise GeometryError("point lies outside the patch")
    A = np.linalg.inv(N)
    resid = abs(float(np.sum((A @ sin_phi) ** 2)) - 1.0)
    if check and resid > 1e-10:
        raise GeometryError(f"angular constraint violated (residual {resid:.3g})")
    return {"X": X, "r": r, "Phi": np.arcsin(np.clip(sin_phi, -1, 1)), "constraint_residual": resid}


@dataclass
class InnerProductStructure:
    theta_V: np.ndarray
    offset: float
    b: np.ndarray
    b_chamber: np.ndarray
    sign: int

    def c0(self, X) -> float:
        return float(np.asarray(X) @ self.theta_V + self.offset)

    def evaluate(self, coords: dict) -> float:
        return self.c0(coords["X"]) + coords["r"] * float(self.b @ np.sin(coords["Phi"]))


def inner_product_structure(patch: SimplexPatch, theta) -> InnerProductStructure:
    V = patch.subspace
    theta = np.asarray(theta, dtype=float)
    Q = V.complement
    t = Q @ theta
    N = patch.face_normals @ Q.T
    b = np.linalg.solve(N.T, t)
    scale = max(1.0, np.linalg.norm(t))
    if np.all(b >= -1e-9 * scale):
        sign = 1 if np.any(b > 1e-9 * scale) else 0
    elif np.all(b <= 1e-9 * scale):
        sign = -1
    else:
        raise GeometryError(f"mixed-sign face coefficients {b.tolist()} for θ = {theta.tolist()}")
    M = patch.chamber_normals @ Q.T
    bc = np.zeros(len(M))
    if sign != 0:
        bc, resid = nnls(M.T, sign * t)
        if resid > 1e-9 * scale:
            raise GeometryError("no one-signed representation in the chamber normals")
        bc = sign * bc
    offset = float(patch.apex @ theta)
    return InnerProductStructure(V.coords(theta)[0], offset, b, bc, sign)
