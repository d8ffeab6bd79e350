"""Operator ordering and homodyne decomposition of quadrature monomials.

With [q, p] = i/2, any product of single-mode quadratures can be rewritten as
a combination of Weyl-symmetric monomials W(q^a p^b), and every W(q^a p^b) of
degree k is a linear combination of powers x_theta^k of rotated quadratures
x_theta = cos(theta) q + sin(theta) p.  Products across modes factorize, so a
moment key becomes a constant plus polynomials in jointly measured outcomes.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import permutations
from math import comb, factorial

import numpy as np

HBAR = 0.5
COEFF_TOL = 1e-12

# Homodyne angle alphabet; settings refer to these by index.
ANGLES = (0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4, np.pi / 8, 3 * np.pi / 8, 5 * np.pi / 8, 7 * np.pi / 8)
Q, P, R45 = 0, 1, 2


def _add(d: dict, k, v):
    d[k] = d.get(k, 0) + v


def word_to_standard(word) -> dict:
    """Standard-ordered (all q left of all p) expansion of a letter word.

    word: iterable of 0 (q) and 1 (p).  Returns {(a, b): coeff} for q^a p^b.
    """
    poly = {(0, 0): 1 + 0j}
    for letter in word:
        nxt: dict = {}
        for (a, b), c in poly.items():
            if letter == 1:
                _add(nxt, (a, b + 1), c)
            else:
                _add(nxt, (a + 1, b), c)
                if b:
                    _add(nxt, (a, b - 1), -1j * HBAR * b * c)
        poly = nxt
    return poly


def standard_to_weyl(poly: dict) -> dict:
    out: dict = {}
    for (a, b), c in poly.items():
        for k in range(min(a, b) + 1):
            _add(out, (a - k, b - k), c * comb(a, k) * comb(b, k) * factorial(k) * (0.5j * HBAR) ** k)
    return out


@lru_cache(maxsize=None)
def word_to_weyl(word: tuple) -> tuple:
    w = standard_to_weyl(word_to_standard(word))
    return tuple(sorted((k, v) for k, v in w.items() if abs(v) > COEFF_TOL))


@lru_cache(maxsize=None)
def weyl_angle_weights(a: int, b: int) -> tuple:
    """Weights w_t with W(q^a p^b) = sum_t w_t x_{theta_t}^(a+b).

    Returns ((angle_index, weight), ...).  Pure q or pure p powers are read
    directly at theta = 0 or pi/2; mixed monomials use the first a+b+1 angles
    of the alphabet and solve the binomial expansion exactly.
    """
    k = a + b
    if k == 0:
        return ((None, 1.0),)
    if b == 0:
        return ((Q, 1.0),)
    if a == 0:
        return ((P, 1.0),)
    if k + 1 > len(ANGLES):
        raise ValueError(f"degree {k} exceeds the homodyne angle alphabet")
    idx = list(range(k + 1))
    th = np.array([ANGLES[i] for i in idx])
    # x_theta^k = sum_j C(k, j) cos^(k-j) sin^j W(q^(k-j) p^j)
    V = np.array([[comb(k, j) * np.cos(t) ** (k - j) * np.sin(t) ** j for j in range(k + 1)] for t in th])
    Vinv = np.linalg.inv(V)
    row = Vinv[b]
    return tuple((i, float(w)) for i, w in zip(idx, row) if abs(w) > COEFF_TOL)


def letters_of_pair(k: int, l: int):
    """Split a quadrature pair into per-mode letters: index 2j is q_j, 2j+1 is p_j."""
    return [(k // 2, k % 2), (l // 2, l % 2)]


@lru_cache(maxsize=None)
def key_to_weyl(key: tuple) -> tuple:
    """Expand a moment key into sum_c c * prod_mode W(q^a p^b).

    A key is a sorted tuple of index tuples; a pair (k, l) stands for
    (r_k r_l + r_l r_k)/2 and a singleton (k,) for r_k.  The factors are
    averaged over all their orderings.  Returns ((monomial, coeff), ...) with
    monomial = ((mode, a, b), ...) sorted by mode; the empty monomial is the
    identity.
    """
    factors = []
    for pair in key:
        if len(pair) == 1:
            factors.append([(1.0, [(pair[0] // 2, pair[0] % 2)])])
        else:
            k, l = pair
            a, b = letters_of_pair(k, l)
            factors.append([(0.5, [a, b]), (0.5, [b, a])])
    orders = list(set(permutations(range(len(factors)))))
    total: dict = {}
    for order in orders:
        # expand the pair symmetrization inside this ordering
        words = [(1.0, [])]
        for f in order:
            words = [(c * c2, w + w2) for c, w in words for c2, w2 in factors[f]]
        for c, w in words:
            per_mode: dict = {}
            for mode, letter in w:
                per_mode.setdefault(mode, []).append(letter)
            mono_terms = [((), c / len(orders))]
            for mode in sorted(per_mode):
                wt = word_to_weyl(tuple(per_mode[mode]))
                mono_terms = [
                    (mono + ((mode, a, b),) if a + b else mono, cm * cw)
                    for mono, cm in mono_terms
                    for (a, b), cw in wt
                ]
            for mono, cm in mono_terms:
                _add(total, mono, cm)
    out = []
    for mono, c in sorted(total.items()):
        if abs(c.imag) > 1e-9:
            raise AssertionError(f"non-Hermitian remainder {c} for key {key}")
        if abs(c.real) > COEFF_TOL:
            out.append((mono, float(c.real)))
    return tuple(out)


def _merge_terms(terms: dict) -> dict:
    merged = {}
    for s, lst in terms.items():
        acc: dict = {}
        for cc, p in lst:
            _add(acc, p, cc)
        kept = tuple((v, p) for p, v in sorted(acc.items()) if abs(v) > COEFF_TOL)
        if kept:
            merged[s] = kept
    return dict(sorted(merged.items()))


@lru_cache(maxsize=None)
def mono_homodyne_terms(mono: tuple) -> dict:
    """Homodyne estimator of one Weyl monomial ((mode, a, b), ...).

    Returns {partial setting: [(coeff, ((mode, power), ...)), ...]} where a
    partial setting is ((mode, angle_index), ...) over the involved modes.
    """
    combos = [((), (), 1.0)]
    for mode, a, b in mono:
        combos = [
            (s + ((mode, ai),), p + ((mode, a + b),), c * w)
            for s, p, c in combos
            for ai, w in weyl_angle_weights(a, b)
        ]
    terms: dict = {}
    for s, p, c in combos:
        if abs(c) > COEFF_TOL:
            terms.setdefault(s, []).append((c, p))
    return _merge_terms(terms)


def poly_homodyne_terms(poly) -> tuple:
    """(constant, terms) for a Weyl polynomial given as ((mono, coeff), ...)."""
    const = 0.0
    terms: dict = {}
    for mono, c in poly:
        if not mono:
            const += c
            continue
        for s, lst in mono_homodyne_terms(tuple(mono)).items():
            terms.setdefault(s, []).extend((c * cc, p) for cc, p in lst)
    return const, _merge_terms(terms)


@lru_cache(maxsize=None)
def key_homodyne_terms(key: tuple) -> tuple:
    """Homodyne estimator of a key.

    The key's expectation equals constant + sum over partial settings of
    E[sum coeff * prod outcome_mode^power] under that setting.
    """
    return poly_homodyne_terms(key_to_weyl(key))


def evaluate_terms(terms, outcomes: np.ndarray) -> np.ndarray:
    """Per-trial value sum coeff * prod x_mode^power; outcomes has shape (c, m)."""
    y = np.zeros(outcomes.shape[0])
    for coeff, powers in terms:
        t = np.full(outcomes.shape[0], coeff)
        for mode, pw in powers:
            t = t * outcomes[:, mode] ** pw
        y += t
    return y
