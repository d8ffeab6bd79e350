from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from photocert import fock as fk
from photocert.weyl import (
    ANGLES,
    HBAR,
    evaluate_terms,
    key_homodyne_terms,
    key_to_weyl,
    mono_homodyne_terms,
    standard_to_weyl,
    weyl_angle_weights,
    word_to_standard,
    word_to_weyl,
)


def test_pq_reorders_with_commutator():
    # p q = q p - i hbar
    assert word_to_standard((1, 0)) == {(1, 1): 1, (0, 0): -1j * HBAR}


def test_qp_is_weyl_plus_half_commutator():
    w = standard_to_weyl({(1, 1): 1})
    assert w == {(1, 1): 1, (0, 0): 0.5j * HBAR}


@pytest.mark.parametrize("word", [(0, 1), (1, 0), (0, 1, 1, 0), (1, 1, 0, 0), (0, 1, 0, 1)])
def test_word_expansion_against_matrices(word):
    # evaluate both sides on a truncated single mode, away from the cutoff
    cut = 14
    ops = fk.fock_operators(1, cut)
    q, p = ops.r[0].toarray(), ops.r[1].toarray()
    lhs = np.eye(cut + 1, dtype=complex)
    for letter in word:
        lhs = lhs @ (p if letter else q)
    rhs = np.zeros_like(lhs)
    for (a, b), c in word_to_weyl(word):
        rhs += c * _weyl_matrix(q, p, a, b)
    keep = slice(0, cut - len(word))
    assert np.allclose(lhs[keep, keep], rhs[keep, keep], atol=1e-10)


def _weyl_matrix(q, p, a, b):
    """Symmetrized product: average over all distinct orderings."""
    from itertools import permutations

    words = set(permutations([0] * a + [1] * b))
    out = np.zeros_like(q, dtype=complex)
    for w in words:
        t = np.eye(q.shape[0], dtype=complex)
        for letter in w:
            t = t @ (p if letter else q)
        out += t
    return out / len(words)


@given(st.integers(0, 5), st.integers(0, 5), st.floats(-2, 2), st.floats(-2, 2))
def test_angle_weights_reproduce_commuting_monomial(a, b, q, p):
    if a + b == 0 or a + b > 7:
        return
    total = sum(w * (np.cos(ANGLES[i]) * q + np.sin(ANGLES[i]) * p) ** (a + b) for i, w in weyl_angle_weights(a, b))
    assert total == pytest.approx(q**a * p**b, abs=1e-9)


def test_mixed_qp_uses_three_angles():
    w = dict(weyl_angle_weights(1, 1))
    assert w == pytest.approx({0: -0.5, 1: -0.5, 2: 1.0})


def test_same_mode_pair_product_has_constant():
    # sym(q^2) sym(p^2) averaged over orderings = W(q^2 p^2) - 1/8
    out = dict(key_to_weyl(((0, 0), (1, 1))))
    assert out[()] == pytest.approx(-0.125)
    assert out[((0, 2, 2),)] == pytest.approx(1.0)


def test_cross_mode_key_factorizes():
    out = key_to_weyl(((0, 2),))
    assert out == ((((0, 1, 0), (1, 1, 0)), 1.0),)


def test_homodyne_terms_for_qp_key():
    const, terms = key_homodyne_terms(((0, 1),))
    assert const == 0
    assert set(terms) == {((0, 0),), ((0, 1),), ((0, 2),)}


def test_evaluate_terms_products():
    terms = mono_homodyne_terms(((0, 1, 0), (1, 2, 0)))[((0, 0), (1, 0))]
    x = np.array([[2.0, 3.0], [1.0, -1.0]])
    assert np.allclose(evaluate_terms(terms, x), [18.0, 1.0])


def test_binomial_sanity():
    # x_pi/4^2 = (q^2 + p^2)/2 + W(qp)
    w = dict(weyl_angle_weights(1, 1))
    assert comb(2, 1) * 0.5 * w[2] == pytest.approx(1.0)
