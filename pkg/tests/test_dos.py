import math

import numpy as np
import pytest

from idsasym.dos import (DOSCurve, DOSError, ModelIntegralSpec, fit_expansion, free_curve, gauge_volume_curve,
                         model_integral_quadrature, model_integral_series, reference_coefficients, random_model_spec,
                         volume_dos, weyl_constant)
from idsasym.potential import Potential, ScaleParameters
from idsasym.suites import k1_closed_form
from idsasym.symbols import Symbol

from conftest import load_fixture


def constant(dim, c):
    return Potential.from_terms(dim, [((0,) * dim, c)])


# ---------------------------------------------------------------- constants


@pytest.mark.parametrize("d, value", [(1, 1 / math.pi), (2, 1 / (4 * math.pi)), (3, 1 / (6 * math.pi ** 2))])
def test_weyl_constant(d, value):
    assert weyl_constant(d) == pytest.approx(value, rel=1e-15)


def test_one_dimensional_reference_coefficients():
    c = reference_coefficients(load_fixture("shifted-mathieu"), 1)
    assert c["C_d"] == pytest.approx(1 / math.pi)
    assert c["e1"] == pytest.approx(-1 / (2 * math.pi))
    assert c["e2"] == pytest.approx(-3 / (8 * math.pi))


def test_two_dimensional_reference_coefficients(square):
    c = reference_coefficients(square, 2)
    assert c["e1"] == pytest.approx(-1 / (4 * math.pi))
    assert c["e2"] == 0.0


# -------------------------------------------------------------- volume DOS


@pytest.mark.parametrize("d", [1, 2, 3])
def test_free_volume_dos_is_exact(d):
    P = ScaleParameters.default(d, 10.0, 1)
    curve = gauge_volume_curve(Potential.from_terms(d, []), P, [100.0, 400.0], n_samples=1000)
    assert np.allclose(curve.values, weyl_constant(d) * curve.lambdas ** (d / 2), rtol=1e-15)
    assert np.all(curve.stderr == 0)


@pytest.mark.parametrize("d", [1, 2])
def test_constant_potential_shifts_the_count(d):
    c = 1.5
    P = ScaleParameters.default(d, 10.0, 1)
    curve = gauge_volume_curve(constant(d, c), P, [100.0, 200.0], n_samples=200_000, seed=5)
    want = weyl_constant(d) * (curve.lambdas - c) ** (d / 2)
    assert np.all(np.abs(curve.values - want) <= 3 * curve.stderr)
    assert np.all(curve.stderr > 0)


def test_larger_constant_lowers_the_count():
    w1 = Symbol.from_potential(constant(2, 0.5))
    w2 = Symbol.from_potential(constant(2, 4.0))
    a = volume_dos(w1, 150.0, n_samples=100_000, delta=5.0, seed=2)
    b = volume_dos(w2, 150.0, n_samples=100_000, delta=5.0, seed=2)
    assert b.value < a.value


def test_volume_dos_does_not_depend_on_worker_count():
    w = Symbol.from_potential(constant(2, 1.0))
    one = volume_dos(w, 120.0, n_samples=150_000, seed=9, workers=1)
    three = volume_dos(w, 120.0, n_samples=150_000, seed=9, workers=3)
    assert (one.value, one.stderr) == (three.value, three.stderr)


# -------------------------------------------------------------------- fits


def synthetic_curve():
    lams = np.geomspace(100, 4000, 20)
    vals = lams ** 0.5 / math.pi - lams ** -0.5 / (2 * math.pi) + 0.03 * lams ** -1.5
    return DOSCurve(lams, vals, np.zeros_like(lams), "synthetic")


def test_fit_recovers_synthetic_series():
    fit = fit_expansion(synthetic_curve(), 1, 2)
    assert fit.terms == ["lambda^0.5", "lambda^-0.5", "lambda^-1.5"]
    assert fit.coefficient("lambda^0.5")[0] == pytest.approx(1 / math.pi, abs=1e-10)
    assert fit.coefficient("lambda^-0.5")[0] == pytest.approx(-1 / (2 * math.pi), abs=1e-10)
    assert any("unweighted" in w for w in fit.warnings)


def test_fit_of_free_curve_has_no_correction():
    fit = fit_expansion(free_curve(2, np.linspace(40, 400, 12)), 2, 1)
    assert fit.coefficient("lambda^1")[0] == pytest.approx(1 / (4 * math.pi), rel=1e-12)
    assert abs(fit.coefficient("lambda^0")[0]) < 1e-10


def test_fit_refuses_duplicate_terms():
    with pytest.raises(DOSError, match="rank deficient"):
        fit_expansion(synthetic_curve(), 1, 0, powers=[0.5, 0.5, -0.5])


def test_fit_refuses_too_few_points():
    lams = np.linspace(100, 200, 5)
    curve = DOSCurve(lams, np.sqrt(lams), np.zeros(5), "synthetic")
    with pytest.raises(DOSError, match="cannot support"):
        fit_expansion(curve, 1, 2)


def test_fit_warns_on_narrow_window():
    lams = np.linspace(40, 160, 13)
    fit = fit_expansion(DOSCurve(lams, lams / (4 * math.pi) - 0.08, np.full(13, 1e-6), "synthetic"), 2, 1)
    assert any("decade" in w for w in fit.warnings)


def test_fit_weights_by_standard_error():
    lams = np.geomspace(100, 4000, 20)
    err = np.full(20, 1e-3)
    vals = lams ** 0.5 / math.pi + np.where(np.arange(20) % 2, 1, -1) * 1e-3
    fit = fit_expansion(DOSCurve(lams, vals, err, "noisy"), 1, 1)
    assert fit.coefficient("lambda^0.5")[1] > 0 and fit.chi2_reduced == pytest.approx(1.0, rel=0.3)


# --------------------------------------------------------------- curve files


def test_csv_round_trip(tmp_path):
    curve = DOSCurve([1.0, 2.5], [0.1, 1 / 3], [0.0, 1e-7], "floquet")
    path = tmp_path / "c.csv"
    curve.to_csv(path, provenance={"seed": 3})
    again = DOSCurve.from_csv(path)
    assert again.method == "floquet"
    assert np.array_equal(again.values, curve.values) and np.array_equal(again.stderr, curve.stderr)


def test_csv_with_two_methods_selects_rows(tmp_path):
    a = DOSCurve([1.0, 2.0], [1.0, 2.0], [0.0, 0.0], "floquet").to_csv()
    b = DOSCurve([1.0, 2.0], [5.0, 6.0], [0.1, 0.1], "gauge-volume").to_csv()
    path = tmp_path / "both.csv"
    path.write_text(a + b.split("\n", 1)[1])
    assert DOSCurve.from_csv(path, "gauge-volume").values.tolist() == [5.0, 6.0]
    assert DOSCurve.from_csv(path).values.tolist() == [1.0, 2.0]
    with pytest.raises(DOSError):
        DOSCurve.from_csv(path, "exact")


def test_curve_rejects_unsorted_energies():
    with pytest.raises(DOSError):
        DOSCurve([2.0, 1.0], [0, 0], [0, 0], "x")


def test_monotone_violations_respect_error_bars():
    curve = DOSCurve([1, 2, 3], [1.0, 0.99, 2.0], [0.01, 0.01, 0.0], "x")
    assert curve.monotone_violations() == 0
    assert DOSCurve([1, 2], [1.0, 0.5], [0.01, 0.01], "x").monotone_violations() == 1


# ---------------------------------------------------------- model integrals


def k1_spec(rho=200.0):
    return ModelIntegralSpec(K=1, n=(0,), k=(1,), k_prime=(0,), l=(2.0,), c=(1.0,), b=[[1.3]], b_tilde=[[0.0]],
                             gamma=0.7, rho=rho)


@pytest.mark.parametrize("route", ["gauss", "quad"])
def test_single_factor_integral_has_closed_form(route):
    spec = k1_spec()
    assert model_integral_quadrature(spec, 1e-10, route) == pytest.approx(k1_closed_form(spec), rel=1e-9)


def test_trivial_integrand_gives_gamma():
    spec = ModelIntegralSpec(K=1, n=(0,), k=(0,), k_prime=(0,), l=(1.0,), c=(1.0,), b=[[0.0]], b_tilde=[[0.0]],
                             gamma=0.4)
    assert model_integral_quadrature(spec) == pytest.approx(0.4, rel=1e-14)


@pytest.mark.parametrize("route", ["gauss", "quad"])
def test_separable_integrand_on_ordered_simplex(route):
    rho, l, g = 50.0, 1.5, 0.8
    spec = ModelIntegralSpec(K=2, n=(0, 0), k=(1, 1), k_prime=(0, 0), l=(l, l), c=(1.0, 1.0),
                             b=[[1.0, 0.0], [0.0, 1.0]], b_tilde=[[0.0, 0.0], [0.0, 0.0]], gamma=g, rho=rho)
    one = math.log1p(rho * g / l) / rho
    assert model_integral_quadrature(spec, 1e-10, route) == pytest.approx(one * one / 2, rel=1e-8)


def test_single_factor_series_matches_expansion():
    fit = model_integral_series(k1_spec(), np.geomspace(50, 5000, 40), p_max=8)
    b, l, g = 1.3, 2.0, 0.7
    assert fit.coefficients[(1, 1)] == pytest.approx(1 / b, rel=1e-6)
    assert fit.coefficients[(1, 0)] == pytest.approx(math.log(g * b / l) / b, rel=1e-6)
    assert abs(fit.coefficients[(0, 0)]) < 1e-6


def test_random_pair_specs_fit_log_power_series():
    rng = np.random.default_rng(1)
    for _ in range(3):
        fit = model_integral_series(random_model_spec(rng), np.geomspace(50, 5e4, 40), p_max=6)
        assert fit.relative_residual < 1e-4 and fit.passed


def test_series_needs_enough_samples():
    with pytest.raises(DOSError, match="too few"):
        model_integral_series(k1_spec(), [100.0, 200.0, 300.0], p_max=8)


@pytest.mark.parametrize("change", [{"K": 3}, {"gamma": 1.5}, {"b": [[-1.0]]}, {"l": (0.0,)}])
def test_spec_validation(change):
    kw = dict(K=1, n=(0,), k=(1,), k_prime=(0,), l=(2.0,), c=(1.0,), b=[[1.0]], b_tilde=[[0.0]], gamma=0.5)
    kw.update(change)
    with pytest.raises(DOSError):
        ModelIntegralSpec(**kw)
