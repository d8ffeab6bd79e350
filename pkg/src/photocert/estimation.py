"""Moment enumeration, homodyne scheduling, accumulation and recombination.

A fidelity bound is a linear form ``constant + sum_k w_k Gamma_k`` over moment
labels.  Two label kinds exist:

* a moment key, a sorted tuple of index tuples: (k, l) with k <= l for
  (r_k r_l + r_l r_k)/2 and (k,) for r_k, with the factors averaged over all
  their orderings (the factors met in practice commute, so this is exact);
* a Weyl label ``("W", ((mode, a, b), ...))`` for prod_mode W(q^a p^b), used for
  post-selected system observables.

Every label is estimated from its own disjoint batch of trials per required
homodyne setting; the per-trial values of all settings serving a label add up
to an unbiased estimator of the label's expectation.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations, product
from math import comb, factorial, prod
from typing import Mapping, Sequence

import numpy as np

from . import fock as fk
from .gaussian import GaussianState, moment_gaussian, weyl_moment
from .symplectic import NetworkSpec, SPARSITY_TOL, projector
from .weyl import ANGLES, COEFF_TOL, P, Q, R45, evaluate_terms, key_to_weyl, mono_homodyne_terms, key_homodyne_terms

RECORD_COLUMNS = ("setting_id", "trial_index", "mode", "angle_radians", "outcome")


class MissingMoment(KeyError):
    pass


def canonical_key(factors) -> tuple:
    return tuple(sorted(tuple(sorted(int(i) for i in f)) for f in factors))


def is_weyl_label(label) -> bool:
    return len(label) == 2 and label[0] == "W"


def label_order(label) -> int:
    return 0 if is_weyl_label(label) else len(label)


def label_terms(label):
    """(constant, {partial setting: terms}) for either label kind."""
    if is_weyl_label(label):
        return 0.0, mono_homodyne_terms(label[1])
    return key_homodyne_terms(label)


@dataclass(frozen=True)
class LinearForm:
    """constant + sum_label weight * <label>."""

    constant: float
    weights: Mapping

    @property
    def labels(self) -> tuple:
        return tuple(self.weights)

    def evaluate(self, values: Mapping) -> float:
        missing = [k for k in self.weights if k not in values]
        if missing:
            raise MissingMoment(f"{len(missing)} labels missing, e.g. {missing[0]}")
        return float(self.constant + sum(w * values[k] for k, w in self.weights.items()))

    @property
    def l1(self) -> float:
        return float(sum(abs(w) for w in self.weights.values()))

    def scaled(self, factor: float) -> "LinearForm":
        return LinearForm(self.constant * factor, {k: w * factor for k, w in self.weights.items()})


# ---------------------------------------------------------------- Gaussian form


def gaussian_form(network: NetworkSpec) -> LinearForm:
    """F0 = 1 + m/2 + x^T M (2 gamma - x) - Tr[M Gamma] with M = O D^-2 O^T."""
    t = network.transform
    Dm2 = np.diag(np.diag(t.D) ** -2.0)
    M = t.O @ Dm2 @ t.O.T
    M[np.abs(M) <= SPARSITY_TOL] = 0.0
    m2 = 2 * network.m
    x = t.x
    weights = {}
    for k in range(m2):
        for l in range(k, m2):
            if M[k, l]:
                weights[(k, l),] = -M[k, l] if k == l else -2.0 * M[k, l]
    Mx = M @ x
    for k in range(m2):
        weights[((k,),)] = 2.0 * Mx[k]
    return LinearForm(float(1 + network.m / 2 - x @ Mx), weights)


def relevant_moments_gaussian(network: NetworkSpec) -> tuple:
    """Canonical second-moment keys with nonzero weight, then all 2m first moments."""
    if any(network.nvec):
        raise ValueError("Gaussian enumeration requires nvec = 0")
    w = gaussian_form(network).weights
    return tuple(k for k in w if len(k[0]) == 2) + tuple(((k,),) for k in range(2 * network.m))


def second_moment_bound(network: NetworkSpec) -> int:
    return 2 * network.m * network.kappa


# ---------------------------------------------------------------- linear-optical form


def _pair_terms(P: np.ndarray) -> list:
    m2 = P.shape[0]
    out = []
    for k in range(m2):
        for l in range(k, m2):
            if abs(P[k, l]) > SPARSITY_TOL:
                out.append(((k, l), P[k, l] if k == l else 2.0 * P[k, l]))
    return out


def _witness_factors(network: NetworkSpec, shift: float):
    """Factors of (r^2 - c0) prod_f (A_f - c_f), each as (constant, pair terms)."""
    m2 = 2 * network.m
    c0 = (network.m + 2 * network.n) / 2 + shift
    factors = [(-c0, [((k, k), 1.0) for k in range(m2)])]
    for j, nj in enumerate(network.nvec):
        if nj:
            terms = _pair_terms(projector(network, j).matrix)
            for t in range(nj):
                factors.append((-(0.5 + t), terms))
    return factors


def _expand(factors) -> dict:
    """Multiply out commuting factors; subsets visited in lexicographic order."""
    poly = {(): 1.0}
    for const, terms in factors:
        nxt: dict = {}
        for key, c in poly.items():
            if const:
                nxt[key] = nxt.get(key, 0.0) + c * const
            for pair, w in terms:
                k2 = canonical_key(key + (pair,))
                nxt[k2] = nxt.get(k2, 0.0) + c * w
        poly = nxt
    return poly


def lo_form(network: NetworkSpec, form: str = "literal") -> LinearForm:
    """Linear form of the photon-pattern fidelity bound.

    literal:   1 - <N>,  N = (n - n_t) prod_j C(n_j, n_tj) on the undone state
    corrected: <prod_j C(n_j, n_tj)> - <N>, which stays a valid lower bound when
               the preparation has fewer photons than the target in some mode.
    """
    if form not in ("literal", "corrected"):
        raise ValueError("form must be 'literal' or 'corrected'")
    if not network.transform.is_passive:
        raise ValueError("photon-pattern bound needs a passive network")
    if network.n == 0:
        return gaussian_form(network)
    pref = 1.0 / prod(factorial(v) for v in network.nvec)
    poly = _expand(_witness_factors(network, 0.0 if form == "literal" else 1.0))
    const = poly.pop((), 0.0)
    weights = {k: -pref * c for k, c in poly.items() if abs(pref * c) > COEFF_TOL}
    constant = 1.0 - pref * const if form == "literal" else -pref * const
    return LinearForm(float(constant), weights)


def relevant_moments_lo(network: NetworkSpec, form: str = "literal") -> tuple:
    if network.n == 0:
        return relevant_moments_gaussian(network)
    return lo_form(network, form).labels


def lemma_count_lo(m: int, n: int, d: int) -> int:
    """(1 + 2m)(4 d^2 + 1)^n relevant-element count."""
    return (1 + 2 * m) * (4 * d * d + 1) ** n


def expansion_term_count(network: NetworkSpec) -> int:
    """Number of uncanonicalized nonzero terms in the multiplied-out witness."""
    count = 1 + 2 * network.m
    for const, terms in _witness_factors(network, 0.0)[1:]:
        count *= 1 + len(terms)
    return count


# ---------------------------------------------------------------- settings


@dataclass(frozen=True)
class SettingPlan:
    """Homodyne settings as per-mode indices into the angle alphabet."""

    m: int
    settings: tuple

    def __len__(self):
        return len(self.settings)

    def covering(self, partial) -> int | None:
        for i, s in enumerate(self.settings):
            if all(s[mode] == a for mode, a in partial):
                return i
        return None

    def angles(self, i: int) -> tuple:
        return tuple(ANGLES[a] for a in self.settings[i])

    def served(self, labels) -> dict:
        """Setting index -> labels that use it."""
        out: dict = {}
        for lab in labels:
            for partial in label_terms(lab)[1]:
                i = self.covering(partial)
                if i is not None:
                    out.setdefault(i, []).append(lab)
        return out

    def uncovered(self, labels) -> list:
        return [(lab, partial) for lab in labels for partial in label_terms(lab)[1] if self.covering(partial) is None]

    def to_dict(self) -> dict:
        return {"m": self.m, "settings": [list(s) for s in self.settings], "angles": [list(self.angles(i)) for i in range(len(self))]}


def _dedupe(settings) -> tuple:
    seen, out = set(), []
    for s in settings:
        s = tuple(s)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return tuple(out)


def settings_gaussian(m: int) -> SettingPlan:
    """All-q, all-p, one p with the rest q (m of them), and all rotated by pi/4."""
    if m < 1:
        raise ValueError("m >= 1")
    s = [(Q,) * m, (P,) * m]
    for j in range(m):
        s.append(tuple(P if i == j else Q for i in range(m)))
    s.append((R45,) * m)
    # kept verbatim: for m = 1 the single-p setting repeats the all-p one
    return SettingPlan(m, tuple(s))


def settings_lo(m: int, n: int) -> SettingPlan:
    """Two families over n-mode subsets T (T at q rest p, and T at p rest q),
    each with every subset of T switched to the pi/4 rotated quadrature."""
    if not 1 <= n < m:
        raise ValueError("need 1 <= n < m")
    out = []
    for T in combinations(range(m), n):
        for inside, outside in ((Q, P), (P, Q)):
            base = [inside if j in T else outside for j in range(m)]
            for mask in product((False, True), repeat=n):
                s = list(base)
                for j, rot in zip(T, mask):
                    if rot:
                        s[j] = R45
                out.append(s)
    return SettingPlan(m, _dedupe(out))


def complete_plan(plan: SettingPlan, labels) -> SettingPlan:
    """Append settings for every partial assignment the plan leaves uncovered.

    Compatible partial assignments are merged greedily; free modes read q.
    """
    pending: list[dict] = []
    for _, partial in plan.uncovered(labels):
        want = dict(partial)
        for p in pending:
            if all(p.get(mode, a) == a for mode, a in want.items()):
                p.update(want)
                break
        else:
            pending.append(want)
    extra = [tuple(p.get(j, Q) for j in range(plan.m)) for p in pending]
    return SettingPlan(plan.m, _dedupe(plan.settings + tuple(extra)))


def default_plan(network: NetworkSpec, labels) -> SettingPlan:
    m = network.m
    base = settings_lo(m, network.n) if 1 <= network.n < m else settings_gaussian(m)
    return complete_plan(base, labels)


# ---------------------------------------------------------------- schedule and records


@dataclass(frozen=True)
class Request:
    """One batch: `count` copies measured at a plan setting for one label."""

    request_id: int
    setting_index: int
    label: tuple
    partial: tuple
    count: int


@dataclass(frozen=True)
class Schedule:
    plan: SettingPlan
    requests: tuple

    @property
    def total_copies(self) -> int:
        return sum(r.count for r in self.requests)

    def prover_view(self) -> list:
        """What the prover sees: request ids, angles and counts, never labels."""
        return [(r.request_id, self.plan.settings[r.setting_index], r.count) for r in self.requests]


def build_schedule(plan: SettingPlan, labels, counts) -> Schedule:
    reqs = []
    for lab in labels:
        c = counts[lab] if isinstance(counts, Mapping) else int(counts)
        if c < 1:
            raise ValueError("every label needs at least one copy per setting")
        for partial in label_terms(lab)[1]:
            i = plan.covering(partial)
            if i is None:
                raise ValueError(f"label {lab} needs a setting with {partial} that the plan lacks")
            reqs.append(Request(len(reqs), i, lab, partial, int(c)))
    return Schedule(plan, tuple(reqs))


@dataclass
class Records:
    """Outcome tables keyed by request id; rows are trials, columns modes."""

    angles: dict = field(default_factory=dict)
    outcomes: dict = field(default_factory=dict)

    def add(self, request_id: int, setting: Sequence[int], data: np.ndarray):
        self.angles[request_id] = tuple(setting)
        self.outcomes[request_id] = np.asarray(data, dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(RECORD_COLUMNS) + "\n")
        for rid in sorted(self.outcomes):
            data = self.outcomes[rid]
            T, M = data.shape
            ang = np.array([ANGLES[a] for a in self.angles[rid]])
            rows = np.column_stack([
                np.full(T * M, rid), np.repeat(np.arange(T), M), np.tile(np.arange(M), T),
                np.tile(ang, T), data.ravel(),
            ])
            np.savetxt(buf, rows, fmt=["%d", "%d", "%d", "%.17g", "%.17g"], delimiter=",")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Records":
        buf = io.StringIO(text)
        header = next(csv.reader([buf.readline()]))
        if tuple(h.strip() for h in header) != RECORD_COLUMNS:
            raise ValueError(f"record header must be {RECORD_COLUMNS}")
        arr = np.loadtxt(buf, delimiter=",", ndmin=2)
        out = cls()
        if arr.size == 0:
            return out
        for rid in np.unique(arr[:, 0]).astype(int):
            rs = arr[arr[:, 0] == rid]
            T, M = int(rs[:, 1].max()) + 1, int(rs[:, 2].max()) + 1
            if len(rs) != T * M:
                raise ValueError(f"request {rid} has an incomplete outcome table")
            data = np.empty((T, M))
            data[rs[:, 1].astype(int), rs[:, 2].astype(int)] = rs[:, 4]
            ang = [0] * M
            for j in range(M):
                th = rs[rs[:, 2] == j, 3][0]
                ang[j] = int(np.argmin([abs(th - a) for a in ANGLES]))
            out.add(int(rid), ang, data)
        return out


# ---------------------------------------------------------------- store


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    count: int
    variance: float  # sum over serving settings of the per-trial variance
    derived: bool
    exact: bool = False

    @property
    def stderr(self) -> float:
        return 0.0 if self.exact else float(np.sqrt(self.variance / max(self.count, 1)))


class MomentEstimateStore(dict):
    """label -> MomentEstimate."""

    def means(self) -> dict:
        return {k: v.mean for k, v in self.items()}

    def to_json(self) -> str:
        return json.dumps(
            [{"label": _label_json(k), "mean": v.mean, "count": v.count, "variance": v.variance,
              "derived": v.derived, "exact": v.exact} for k, v in self.items()],
            indent=1,
        )

    def perturbed(self, delta: Mapping) -> "MomentEstimateStore":
        out = MomentEstimateStore(self)
        for k, d in delta.items():
            e = out[k]
            out[k] = MomentEstimate(e.mean + d, e.count, e.variance, e.derived, e.exact)
        return out


def _label_json(label):
    if is_weyl_label(label):
        return ["W", [list(t) for t in label[1]]]
    return [list(p) for p in label]


def accumulate(records: Records, schedule: Schedule) -> MomentEstimateStore:
    """Per label: constant + sum over its batches of the per-trial estimator mean."""
    by_label: dict = {}
    for r in schedule.requests:
        by_label.setdefault(r.label, []).append(r)
    store = MomentEstimateStore()
    for lab, reqs in by_label.items():
        const, terms = label_terms(lab)
        mean, var_sum, se2, count = const, 0.0, 0.0, None
        for r in reqs:
            data = records.outcomes.get(r.request_id)
            if data is None or data.shape[0] == 0:
                raise MissingMoment(f"no samples for request {r.request_id} ({lab})")
            y = evaluate_terms(terms[r.partial], data)
            v = float(y.var(ddof=1)) if y.size > 1 else 0.0
            mean += float(y.mean())
            var_sum += v
            se2 += v / y.size
            count = y.size if count is None else min(count, y.size)
        # report the per-trial variance that reproduces the pooled standard error
        store[lab] = MomentEstimate(float(mean), int(count), float(se2 * count), len(reqs) > 1 or bool(const))
    return store


def exact_store(state, labels) -> MomentEstimateStore:
    """Exact label values from a Gaussian or Fock state."""
    labels = list(labels)
    store = MomentEstimateStore()
    keys = [l for l in labels if not is_weyl_label(l)]
    monos = [l[1] for l in labels if is_weyl_label(l)]
    if isinstance(state, GaussianState):
        vals = {k: moment_gaussian(state, k) for k in keys}
        vals.update({("W", mo): weyl_moment(state, mo) for mo in monos})
    else:
        vals = {}
        if keys:
            ev = fk.MomentEvaluator(state, max(label_order(k) for k in keys))
            vals.update(ev.evaluate(keys))
        if monos:
            vals.update({("W", mo): v for mo, v in fk.weyl_moment_fock(state, monos).items()})
    for lab in labels:
        store[lab] = MomentEstimate(float(vals[lab]), 0, 0.0, False, exact=True)
    return store


def _require(store: MomentEstimateStore, form: LinearForm):
    for k in form.weights:
        if k not in store:
            raise MissingMoment(f"store lacks {k}")
        if not store[k].exact and store[k].count < 1:
            raise MissingMoment(f"no samples for {k}")


# ---------------------------------------------------------------- recombination


def recombine_F0(store: MomentEstimateStore, network: NetworkSpec) -> float:
    f = gaussian_form(network)
    _require(store, f)
    return f.evaluate(store.means())


def recombine_Fn(store: MomentEstimateStore, network: NetworkSpec, form: str = "literal") -> float:
    f = lo_form(network, form)
    _require(store, f)
    return f.evaluate(store.means())


@dataclass(frozen=True)
class PostSelection:
    """Ancilla modes (of the joint network) projected onto normalizable |phi>."""

    ancilla_modes: tuple
    phi: tuple
    P: float
    cutoff: int = 12

    def ancilla_vectors(self) -> list:
        return [fk._ancilla_vector(ph, self.cutoff) for ph in self.phi]


def joint_form(network: NetworkSpec, form: str = "corrected") -> LinearForm:
    return gaussian_form(network) if network.n == 0 else lo_form(network, form)


def system_form(network: NetworkSpec, postsel: PostSelection, form: str = "corrected") -> LinearForm:
    """Post-selected bound as a form over system Weyl labels.

    literal:   1 - <N_S> with N_S = (P - 1 + <phi|N|phi>) / P, i.e. (1 - <N>_joint) / P
    corrected: (<prod C>_joint - <N>_joint) / P
    Each joint key is expanded into Weyl monomials; ancilla factors are replaced
    by their exact expectations in |phi>, the rest is relabeled to system modes.
    """
    if postsel.P <= fk.PROB_FLOOR:
        raise ValueError("post-selection probability must be positive")
    jf = joint_form(network, form)
    anc = {mode: vec for mode, vec in zip(postsel.ancilla_modes, postsel.ancilla_vectors())}
    sys_modes = [j for j in range(network.m) if j not in anc]
    relabel = {j: i for i, j in enumerate(sys_modes)}
    cache: dict = {}

    def anc_val(mode, a, b):
        if (mode, a, b) not in cache:
            cache[(mode, a, b)] = fk.single_mode_weyl_expectation(anc[mode], a, b)
        return cache[(mode, a, b)]

    const = jf.constant
    weights: dict = {}
    for key, w in jf.weights.items():
        for mono, c in key_to_weyl(key):
            factor = w * c
            sys_part = []
            for mode, a, b in mono:
                if mode in anc:
                    factor *= anc_val(mode, a, b)
                else:
                    sys_part.append((relabel[mode], a, b))
            if abs(factor) <= COEFF_TOL:
                continue
            if sys_part:
                lab = ("W", tuple(sys_part))
                weights[lab] = weights.get(lab, 0.0) + factor
            else:
                const += factor
    weights = {k: v for k, v in weights.items() if abs(v) > COEFF_TOL}
    # the joint fidelity of rho_S (x) |phi><phi| equals P F_S
    return LinearForm(const, weights).scaled(1.0 / postsel.P)


def recombine_FS(store: MomentEstimateStore, network: NetworkSpec, postsel: PostSelection, form: str = "corrected") -> float:
    f = system_form(network, postsel, form)
    _require(store, f)
    return f.evaluate(store.means())


# ---------------------------------------------------------------- stability envelopes


def gaussian_envelope(network: NetworkSpec, eps_second: float, eps_first: float) -> float:
    """2 s_max^2 (eps_second sqrt(kappa) m + eps_first ||x|| sqrt(2m))."""
    t = network.transform
    m = network.m
    return 2 * t.s_max**2 * (eps_second * np.sqrt(network.kappa) * m + eps_first * np.linalg.norm(t.x) * np.sqrt(2 * m))


def lo_envelope(network: NetworkSpec, eps: float, form: str = "literal") -> float:
    """eps (n + 5m/2)(1/2 + 2 d sqrt(2 n m))^n for one-photon-per-mode patterns.

    The corrected form shifts the r^2 constant by one, adding one to n + 5m/2.
    """
    if any(v > 1 for v in network.nvec):
        raise ValueError("envelope derived for patterns with at most one photon per mode")
    n, m, d = network.n, network.m, network.d
    lead = n + 2.5 * m + (1 if form == "corrected" else 0)
    return eps * lead * (0.5 + 2 * d * np.sqrt(2 * n * m)) ** n
