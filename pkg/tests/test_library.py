import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modrec.errors import CapacityError, ContractError
from modrec.library import (
    SparseModel,
    build_library,
    evaluate,
    evaluate_jacobian,
    library_size,
    rhs,
)


def pascal_count(n, order):
    """Independent size oracle: Pascal's rule on a (degree, vars) table."""
    table = [[1] * (n + 1)]
    for deg in range(1, order + 1):
        row = [1]
        for v in range(1, n + 1):
            row.append(row[v - 1] + table[deg - 1][v])
        table.append(row)
    return table[order][n]


def brute_force_exponents(v, order):
    return sorted(
        (e for e in product(range(order + 1), repeat=v) if sum(e) <= order),
        key=lambda e: (sum(e), tuple(-x for x in e)),
    )


def test_sizes_match_binomial():
    assert build_library(2, 0, 3).size == 10
    assert build_library(3, 0, 2).size == 10
    assert build_library(2, 1, 2).size == len(brute_force_exponents(3, 2))


def test_sizes_match_pascal_rule_all_small_configs():
    for n in range(1, 7):
        for order in range(0, 6):
            lib = build_library(n, 0, order)
            assert lib.size == math.comb(order + n, n)
            assert lib.size == pascal_count(n, order)


def test_enumeration_is_graded_lex_and_stable():
    lib = build_library(2, 0, 2)
    names = [t.as_string(2) for t in lib.terms]
    assert names == ["1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]
    lib2 = build_library(2, 0, 2)
    assert [t.exponents for t in lib.terms] == [t.exponents for t in lib2.terms]


@given(st.integers(1, 4), st.integers(0, 2), st.integers(0, 4))
@settings(max_examples=40, deadline=None)
def test_enumeration_matches_brute_force(n, m, order):
    lib = build_library(n, m, order)
    assert [t.exponents for t in lib.terms] == brute_force_exponents(n + m, order)


def test_capacity_error():
    with pytest.raises(CapacityError):
        build_library(6, 0, 30)
    assert library_size(6, 0, 30) > 1_000_000


def test_bad_dimensions_rejected():
    with pytest.raises(ContractError):
        build_library(0, 0, 2)
    with pytest.raises(ContractError):
        build_library(2, -1, 2)
    with pytest.raises(ContractError):
        build_library(2, 0, -1)


def test_evaluate_at_zero_is_unit_vector():
    lib = build_library(3, 0, 2)
    f = evaluate(lib, [0.0, 0.0, 0.0])
    assert f[0] == 1.0
    assert np.all(f[1:] == 0.0)


def test_evaluate_hand_case():
    lib = build_library(2, 0, 2)
    np.testing.assert_allclose(evaluate(lib, [2.0, 3.0]), [1, 2, 3, 4, 6, 9])


def test_evaluate_unit_component_reduces():
    lib = build_library(2, 0, 3)
    f = evaluate(lib, [1.0, 5.0])
    # with x1 = 1, every monomial becomes a pure power of x2
    expected = [5.0 ** t.exponents[1] for t in lib.terms]
    np.testing.assert_allclose(f, expected)


def test_jacobian_constant_row_zero_and_power_rule():
    lib = build_library(2, 0, 2)
    J = evaluate_jacobian(lib, [3.0, 7.0])
    assert np.all(J[0] == 0.0)
    j_sq = next(i for i, t in enumerate(lib.terms) if t.exponents == (2, 0))
    assert J[j_sq, 0] == 6.0


def test_jacobian_zero_state_no_nan():
    lib = build_library(2, 0, 3)
    J = evaluate_jacobian(lib, [0.0, 0.0])
    assert np.all(np.isfinite(J))
    # d(x1)/dx1 = 1 even at the origin; d(x1^2)/dx1 = 0 there
    j_lin = next(i for i, t in enumerate(lib.terms) if t.exponents == (1, 0))
    assert J[j_lin, 0] == 1.0


@given(st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m, order = rng.integers(1, 4), rng.integers(0, 3), rng.integers(1, 4)
    lib = build_library(int(n), int(m), int(order))
    y = rng.normal(size=int(n))
    u = rng.normal(size=int(m)) if m else None
    J = evaluate_jacobian(lib, y, u)
    h = 1e-6
    for i in range(int(n)):
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        fd = (evaluate(lib, yp, u) - evaluate(lib, ym, u)) / (2 * h)
        denom = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(J[:, i] - fd) / denom) < 1e-6


def test_rhs_zero_model():
    lib = build_library(2, 0, 2)
    model = SparseModel(lib, np.zeros((2, lib.size)))
    assert np.all(rhs(model, [1.3, -2.0]) == 0.0)
    assert model.p == 0


def test_rhs_matches_dense_product():
    rng = np.random.default_rng(7)
    lib = build_library(3, 1, 2)
    theta = np.where(rng.random((3, lib.size)) < 0.3, rng.normal(size=(3, lib.size)), 0.0)
    model = SparseModel(lib, theta)
    y, u = rng.normal(size=3), rng.normal(size=1)
    np.testing.assert_allclose(rhs(model, y, u), theta @ evaluate(lib, y, u), rtol=1e-12)


def test_sparse_model_support_and_masking():
    lib = build_library(2, 0, 1)
    theta = np.array([[0.0, 2.0, 0.0], [1.0, 0.0, 5.0]])
    model = SparseModel(lib, theta)
    assert model.support == {(0, 1), (1, 0), (1, 2)}
    assert model.p == 3
    # explicit support zeroes everything else
    model2 = SparseModel(lib, theta, support={(0, 1)})
    assert model2.theta[1, 0] == 0.0 and model2.theta[0, 1] == 2.0
    with pytest.raises(ContractError):
        SparseModel(lib, theta, support={(5, 0)})
    with pytest.raises(ContractError):
        SparseModel(lib, np.zeros((3, lib.size)))


def test_index_map_export_round_trip():
    lib = build_library(2, 1, 2)
    text = lib.index_map_text()
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    assert len(lines) == lib.size
    for line in lines:
        idx, exps, _ = line.split("\t")
        assert lib.index_of(tuple(int(e) for e in exps.split())) == int(idx)
