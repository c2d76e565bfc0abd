import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idsasym.potential import Potential, ScaleParameters
from idsasym.symbols import (Symbol, SymbolError, commutator, cutoffs, default_samples, gauge_diagnostics,
                             gauge_transform, kinetic_commutator_residual, mollifier, multiply, natural_part,
                             norm_estimate, norm_grid, partition, solve_commutator, symmetry_residual)

P1 = ScaleParameters(rho_n=10.0, k_tilde=3, alphas=(0.45,), beta=0.1)
P2 = ScaleParameters(rho_n=20.0, k_tilde=2, alphas=(0.1, 0.2), beta=0.05)


def cos_symbol():
    return Symbol.from_potential(Potential.from_terms(1, [((1,), 1.0)]))


def samples(n=1000, seed=0, dim=1, P=P1):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 8 * P.rho_n, n)
    d = rng.normal(size=(n, dim))
    return r[:, None] * d / np.linalg.norm(d, axis=1, keepdims=True)


# ------------------------------------------------------------ mollifier


def test_mollifier_plateaus():
    assert mollifier(0.2) == 1.0
    assert mollifier(0.3) == 0.0
    assert mollifier(0.25) == 1.0 and mollifier(0.275) == 0.0


def test_mollifier_blend_is_strictly_decreasing():
    assert 0.0 < mollifier(0.26) < 1.0
    z = np.linspace(0.2501, 0.2749, 400)
    m = mollifier(z)
    # the flanks round to exactly 0 or 1 in double precision
    blend = (m > 0) & (m < 1)
    assert np.all(np.diff(m) <= 0)
    assert np.all(np.diff(m[blend]) < 0) and blend.sum() > 100


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10))
def test_mollifier_range(z):
    assert 0.0 <= mollifier(z) <= 1.0


# -------------------------------------------------------------- cutoffs


def point_at(theta, radius):
    theta = np.asarray(theta, float)
    perp = np.array([-theta[1], theta[0]]) / np.linalg.norm(theta)
    return radius * perp - theta / 2


def test_cutoffs_on_energy_sphere():
    theta = np.array([1.0, 0.0])
    c = cutoffs(theta, point_at(theta, 3 * P2.rho_n), P2)
    assert (c["e"][0], c["l_gt"][0], c["l_lt"][0]) == (1.0, 0.0, 0.0)


def test_cutoffs_at_large_energy():
    theta = np.array([1.0, 0.0])
    c = cutoffs(theta, point_at(theta, 6 * P2.rho_n), P2)
    assert (c["e"][0], c["l_gt"][0]) == (0.0, 1.0)


def test_cutoffs_on_resonance_plane():
    theta = np.array([1.0, 0.0])
    c = cutoffs(theta, point_at(theta, 4 * P2.rho_n), P2)
    assert (c["zeta"][0], c["phi"][0]) == (1.0, 0.0)


def test_cutoffs_partition_unity():
    theta = np.array([1.0, 2.0])
    xi = samples(500, 1, 2, P2)
    c = cutoffs(theta, xi, P2)
    assert np.max(np.abs(c["e"] + c["l_gt"] + c["l_lt"] - 1)) < 1e-15
    assert np.max(np.abs(c["zeta"] + c["phi"] - 1)) < 1e-15


def test_cutoffs_reject_zero_frequency():
    with pytest.raises(SymbolError):
        cutoffs([0.0, 0.0], [[1.0, 1.0]], P2)


# ------------------------------------------------------------ partition


def test_partition_of_constant_is_mean_only():
    parts = partition(Symbol.constant(2, 3.0), P2)
    assert len(parts["o"]) == 1
    assert all(len(parts[k]) == 0 for k in ("sharp", "natural", "flat", "down"))


def test_partition_natural_part_where_e_and_phi_are_one():
    b = Symbol.from_potential(Potential.from_terms(2, [((1, 0), 1.0)]))
    theta = np.array([1.0, 0.0])
    # on the energy sphere and far from the resonance plane
    xi = np.array([[3 * P2.rho_n, 0.0]]) - theta / 2
    parts = partition(b, P2)
    assert parts["natural"].coeff(theta, xi)[0] == pytest.approx(1.0)
    assert parts["flat"].coeff(theta, xi)[0] == 0.0


def test_partition_reassembles_exactly():
    b = Symbol.from_potential(Potential.from_terms(2, [((0, 0), 0.3), ((1, 0), 1.0), ((1, 1), 0.5 + 0.2j)]))
    xi = samples(1000, 2, 2, P2)
    parts = partition(b, P2)
    worst = 0.0
    for _, (theta, c) in b.items():
        total = sum(p.coeff(theta, xi) for p in parts.values())
        worst = max(worst, float(np.max(np.abs(total - c(xi)))))
    assert worst < 1e-14


def test_partition_support_properties():
    b = Symbol.from_potential(Potential.from_terms(2, [((1, 0), 1.0), ((1, 1), 1.0)]))
    parts = partition(b, P2)
    xi = samples(2000, 3, 2, P2)
    R = np.sqrt(2)
    r = np.linalg.norm(xi, axis=1)
    for _, (theta, _) in b.items():
        down = np.abs(parts["down"].coeff(theta, xi))
        sharp = np.abs(parts["sharp"].coeff(theta, xi))
        assert np.all(down[r > P2.rho_n / 2 + R / 2] == 0)
        assert np.all(sharp[r < 11 * P2.rho_n / 2 - R / 2] == 0)


def test_partition_preserves_symmetry():
    b = Symbol.from_potential(Potential.from_terms(2, [((1, 0), 1.0), ((1, 1), 0.5 + 0.2j)]))
    xi = samples(300, 4, 2, P2)
    for part in partition(b, P2).values():
        assert symmetry_residual(part, xi) < 1e-12


# ------------------------------------------------------- products, commutators


def test_product_with_identity():
    b = cos_symbol()
    xi = samples(50)
    prod = multiply(b, Symbol.constant(1, 1.0))
    for _, (theta, c) in b.items():
        assert np.allclose(prod.coeff(theta, xi), c(xi))


def test_square_of_cosine_symbol_has_mean_two():
    bb = multiply(cos_symbol(), cos_symbol())
    assert np.allclose(bb.coeff([0.0], samples(20)), 2.0)
    assert np.allclose(bb.coeff([2.0], samples(20)), 1.0)


def test_kinetic_product():
    psi = solve_commutator(cos_symbol(), P1)
    h0 = Symbol.kinetic(1)
    xi = samples(200, 5)
    prod = multiply(h0, psi)
    for _, (chi, c) in psi.items():
        assert np.allclose(prod.coeff(chi, xi), np.sum((xi + chi) ** 2, axis=1) * c(xi))


def test_self_commutator_vanishes():
    b = cos_symbol()
    ad = commutator(b, b)
    xi = samples(100)
    for _, (_, c) in ad.items():
        assert np.max(np.abs(c(xi))) < 1e-15


def test_commutator_with_constant_vanishes():
    ad = commutator(cos_symbol(), Symbol.constant(1, 2.5))
    xi = samples(100)
    assert all(np.max(np.abs(c(xi))) < 1e-15 for _, (_, c) in ad.items())


def test_kinetic_commutator_formula():
    psi = solve_commutator(cos_symbol(), P1)
    ad = commutator(Symbol.kinetic(1), psi)
    xi = samples(300, 6)
    for _, (chi, c) in psi.items():
        want = 1j * (np.sum((xi + chi) ** 2, axis=1) - np.sum(xi ** 2, axis=1)) * c(xi)
        assert np.allclose(ad.coeff(chi, xi), want, atol=1e-12)


def test_commutator_is_difference_of_products():
    b = cos_symbol()
    g = solve_commutator(b, P1)
    ad = commutator(b, g)
    diff = (multiply(b, g) - multiply(g, b)).scale(1j)
    xi = samples(200, 7)
    for _, (chi, c) in diff.items():
        assert np.allclose(ad.coeff(chi, xi), c(xi), atol=1e-14)


# ------------------------------------------------------------ solver


def test_solver_value_on_energy_sphere():
    theta = np.array([1.0])
    c = 7.0  # ⟨θ, ξ+θ/2⟩, far from the resonance plane
    xi = np.array([[c - 0.5]])
    a = Symbol.from_potential(Potential.from_terms(1, [((1,), 1.0)]))
    P = ScaleParameters(rho_n=c / 3, k_tilde=1, alphas=(0.3,), beta=0.01)
    psi = solve_commutator(a, P)
    assert psi.coeff(theta, xi)[0] == pytest.approx(1j / (2 * c))


def test_solver_vanishes_on_resonance_plane():
    psi = solve_commutator(cos_symbol(), P1)
    xi = np.array([[-0.5]])  # ⟨θ, ξ+θ/2⟩ = 0
    assert psi.coeff([1.0], xi)[0] == 0


def test_solver_satisfies_commutator_equation():
    b = cos_symbol()
    psi = solve_commutator(b, P1)
    assert kinetic_commutator_residual(psi, b, P1, samples(1000, 8)) < 1e-12
    assert symmetry_residual(psi, samples(1000, 8)) < 1e-12


def test_solver_rejects_asymmetric_input():
    b = Symbol.from_potential(Potential.from_terms(1, [((1,), 1.0)], symmetrize=True))
    lop = b.restrict(lambda v: v[0] > 0)
    with pytest.raises(SymbolError):
        solve_commutator(lop, P1)


# ----------------------------------------------------------- gauge transform


def test_constant_potential_gauge_is_trivial():
    b = Symbol.constant(1, 2.0)
    res = gauge_transform(b, P1)
    xi = samples(100)
    assert all(len(res.psi[l]) == 0 for l in res.psi)
    assert np.allclose(res.Y.coeff([0.0], xi), 2.0) and np.allclose(res.W.coeff([0.0], xi), 2.0)


def test_first_order_gauge():
    b = cos_symbol()
    res = gauge_transform(b, P1, k_tilde=1)
    xi = samples(500, 9)
    want = b - natural_part(b, P1)
    for _, (theta, c) in b.items():
        assert np.allclose(res.Y.coeff(theta, xi), c(xi))
        assert np.allclose(res.W.coeff(theta, xi), want.coeff(theta, xi), atol=1e-15)


def test_gauge_structural_diagnostics():
    res = gauge_transform(cos_symbol(), P1)
    diag = gauge_diagnostics(res, samples=samples(1000, 10))
    for o in diag["orders"]:
        assert o["commutator_residual"] < 1e-10
        assert o["psi_symmetry"] < 1e-12
    assert diag["Y_symmetry"] < 1e-12 and diag["W_symmetry"] < 1e-12
    assert diag["support_law"]
    assert diag["block_law"]["passed"] and diag["block_law"]["checked"] > 0


def test_gauge_support_growth_is_bounded_by_sums():
    res = gauge_transform(cos_symbol(), P1)
    freqs = {round(float(v[0]), 9) for v in res.Y.support()}
    assert freqs <= {float(k) for k in range(-3, 4)}


def test_gauge_rejects_large_order():
    with pytest.raises(SymbolError):
        gauge_transform(cos_symbol(), P1, k_tilde=6)


def test_two_dimensional_gauge_is_symmetric():
    b = Symbol.from_potential(Potential.from_terms(2, [((1, 0), 1.0), ((0, 1), 0.5)]))
    res = gauge_transform(b, P2)
    xi = default_samples(2, P2)
    assert symmetry_residual(res.W, xi) < 1e-12
    for l in res.psi:
        rhs = res.B[l] if l == 1 else res.B[l] + res.T[l]
        assert kinetic_commutator_residual(res.psi[l], rhs, P2, xi) < 1e-10


# ------------------------------------------------------------ norms


def test_norm_of_zero_symbol():
    assert norm_estimate(Symbol(1), 0, 0, norm_grid(1, P1)) == 0.0


def test_norm_of_single_constant():
    s = Symbol.from_potential(Potential.from_terms(1, [((0,), -2.5)]))
    assert norm_estimate(s, 0, 0, norm_grid(1, P1)) == pytest.approx(2.5)


def test_norm_with_frequency_weight():
    # ⟨±1⟩² = 2 for each of the two unit coefficients
    assert norm_estimate(cos_symbol(), 0, 2, norm_grid(1, P1)) == pytest.approx(4.0)
