import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idsasym.potential import (FrequencySet, Potential, PotentialError, ScaleParameters, check_condition_A,
                               diophantine_quantities, lattice_covolume, theta_sum)

from conftest import freqs, load_fixture


def keyset(fs):
    return {tuple(np.round(v, 9)) for v in fs.elements}


# ---------------------------------------------------------------- mean


def test_mean_of_shifted_cosine_is_one():
    assert load_fixture("shifted-mathieu").mean() == pytest.approx(1.0)


def test_mean_of_pure_cosine_is_zero():
    assert load_fixture("mathieu").mean() == 0


def test_mean_of_square_of_shifted_cosine():
    b = load_fixture("shifted-mathieu")
    # (1 + 2cos x)^2 = 1 + 4cos x + 4cos^2 x, whose mean is 1 + 2
    assert b.multiply(b).mean() == pytest.approx(3.0)


def test_potential_evaluates_as_real_trig_polynomial():
    b = load_fixture("shifted-mathieu")
    x = np.linspace(-3, 3, 7)
    assert np.allclose(b(x), 1 + 2 * np.cos(x))


def test_loader_adds_conjugate_mirror():
    b = Potential.from_json({"dim": 1, "terms": [{"freq": [2.0], "re": 0.5, "im": 0.25}]})
    assert b.coefficient([-2.0]) == pytest.approx(0.5 - 0.25j)


def test_loader_rejects_non_real_pair():
    doc = {"dim": 1, "terms": [{"freq": [1.0], "re": 1.0, "im": 0.0}, {"freq": [-1.0], "re": 2.0, "im": 0.0}]}
    with pytest.raises(PotentialError):
        Potential.from_json(doc)


def test_loader_rejects_wrong_arity():
    with pytest.raises(PotentialError):
        Potential.from_json({"dim": 2, "terms": [{"freq": [1.0], "re": 1.0}]})


def test_json_round_trip(square):
    again = Potential.from_json(square.to_json())
    assert again.to_json() == square.to_json()


# ------------------------------------------------------------ theta_sum


def test_theta_sum_one_dimensional():
    out = theta_sum(freqs(1, [[1], [-1]]), 2)
    assert keyset(out) == {(0.0,), (1.0,), (-1.0,), (2.0,), (-2.0,)}


def test_theta_sum_square_lattice():
    base = freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1]])
    want = {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (-2, 0), (0, 2), (0, -2),
            (1, 1), (-1, -1), (1, -1), (-1, 1)}
    assert keyset(theta_sum(base, 2)) == {tuple(float(c) for c in w) for w in want}


def test_theta_sum_of_origin_stays_origin():
    assert len(theta_sum(FrequencySet(2, [[0, 0]]), 4)) == 1


def test_theta_sum_cap_is_reported():
    base = freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1], [math.sqrt(2), 0.3], [-math.sqrt(2), -0.3]])
    with pytest.raises(PotentialError, match="cap of 50"):
        theta_sum(base, 4, cap=50)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=3), st.integers(1, 3))
def test_theta_sum_monotone_and_symmetric(vecs, k):
    base = freqs(2, [v for v in vecs] + [(-a, -b) for a, b in vecs])
    small, big = theta_sum(base, k), theta_sum(base, k + 1)
    assert keyset(small) <= keyset(big)
    assert small.is_symmetric() and [0.0, 0.0] in small


# --------------------------------------------------------- condition A


def test_condition_a_square_lattice_passes():
    rep = check_condition_A(freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1]]), 2)
    assert rep.verdict == "PASS" and rep.complete
    assert rep.dependent_tuples > 0


def test_condition_a_flags_irrational_collinear_pair():
    rep = check_condition_A(freqs(2, [[1, 0], [-1, 0], [math.sqrt(2), 0], [-math.sqrt(2), 0]]), 1)
    assert rep.verdict == "LIKELY-VIOLATED"
    got = sorted(abs(t[0]) for t in rep.violating_tuple)
    assert got == pytest.approx([1.0, math.sqrt(2)])


def test_condition_a_one_dimensional_passes():
    assert check_condition_A(freqs(1, [[1], [-1]]), 1).verdict == "PASS"


def test_condition_a_invariant_under_negation_and_order():
    a = freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 2], [-1, -2]])
    b = freqs(2, [[-1, -2], [0, -1], [1, 2], [-1, 0], [0, 1], [1, 0]])
    assert check_condition_A(a, 2).to_dict() == check_condition_A(b, 2).to_dict()


def test_condition_a_reports_partial_scan():
    rep = check_condition_A(freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1]]), 3, tuple_cap=5)
    assert not rep.complete and rep.tuples_checked == 5


# ------------------------------------------------ diophantine quantities


def square_set():
    return freqs(2, [[1, 0], [-1, 0], [0, 1], [0, -1]])


def test_quantities_square_lattice_k1():
    q = diophantine_quantities(square_set(), ScaleParameters.default(2, 100.0, 1))
    assert (q["r"], q["R"], q["s"], q["min_covolume"]) == pytest.approx((1.0, 1.0, 1.0, 1.0))


def test_quantities_square_lattice_k2_angle():
    q = diophantine_quantities(square_set(), ScaleParameters.default(2, 100.0, 2))
    assert q["s"] == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_quantities_one_dimensional_covolume():
    q = diophantine_quantities(freqs(1, [[2], [-2]]), ScaleParameters.default(1, 100.0, 1))
    assert (q["r"], q["R"], q["min_covolume"]) == pytest.approx((2.0, 2.0, 2.0))


def test_covolume_of_generated_group_uses_gcd():
    assert lattice_covolume(np.array([[4.0], [6.0]])) == pytest.approx(2.0)


def test_quantities_raise_on_condition_a_violation():
    bad = freqs(2, [[1, 0], [-1, 0], [math.sqrt(2), 0], [-math.sqrt(2), 0], [0, 1], [0, -1]])
    with pytest.raises(PotentialError, match="no rational relation"):
        diophantine_quantities(bad, ScaleParameters.default(2, 100.0, 1))


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_quantities_scale_covariantly(c):
    P = ScaleParameters.default(2, 100.0, 2)
    base = freqs(2, [[1, 0], [-1, 0], [1, 2], [-1, -2]])
    q1 = diophantine_quantities(base, P)
    q2 = diophantine_quantities(base.scaled(c), P)
    assert q2["r"] == pytest.approx(c * q1["r"]) and q2["R"] == pytest.approx(c * q1["R"])
    assert q2["s"] == pytest.approx(q1["s"])
    assert 0 < q1["s"] <= 1 and q1["r"] <= q1["R"]


# ----------------------------------------------------- scale parameters


def test_scale_parameters_reject_bad_alphas():
    with pytest.raises(PotentialError):
        ScaleParameters(100.0, 2, (0.2, 0.1), 0.05)
    with pytest.raises(PotentialError):
        ScaleParameters(100.0, 2, (0.1, 0.3), 0.05)  # α_2 must stay below 1/4
    with pytest.raises(PotentialError):
        ScaleParameters(100.0, 2, (0.1, 0.2), 0.15)


def test_scale_lengths_increase():
    P = ScaleParameters(1e6, 2, (0.1, 0.24), 0.05)
    assert np.all(np.diff(P.L) > 0) and P.lambda_n == pytest.approx(1e12)
