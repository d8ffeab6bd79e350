"""Sample-budget planning, the accept/reject rule and auxiliary analytic bounds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import ceil, comb, inf, isfinite, log, sqrt

import numpy as np

from . import estimation as es
from .symplectic import NetworkSpec

FIRST_MOMENT_PILOT = 100  # first-moment copies per quadrature when x = 0
MIN_PILOT = 100
SAFETY_FACTOR = 2.0
VARIANCE_FLOOR = 1e-6


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class TestConfig:
    """Threshold fidelity F_T < 1, failure probability alpha, estimation error epsilon."""

    __test__ = False  # not a pytest class

    F_T: float
    alpha: float
    epsilon: float

    def __post_init__(self):
        if not self.F_T < 1:
            raise PlanningError("F_T must be < 1")
        if not 0 < self.alpha <= 0.5:
            raise PlanningError("alpha must lie in (0, 1/2]")
        if not 0 < self.epsilon <= (1 - self.F_T) / 2 + 1e-15:
            raise PlanningError(f"epsilon must lie in (0, (1 - F_T)/2] = (0, {(1 - self.F_T) / 2:.6g}]; got {self.epsilon:.6g}")

    @property
    def log_term(self) -> float:
        return log(1 / (1 - self.alpha))


@dataclass(frozen=True)
class VarianceBounds:
    """Standard-deviation bounds; variances enter the planners squared."""

    sigma1: float
    sigma2: float
    sigma_le: float
    generalized: bool = False
    degenerate: tuple = ()

    def __post_init__(self):
        if min(self.sigma1, self.sigma2, self.sigma_le) < 0:
            raise PlanningError("variance bounds must be nonnegative")

    @classmethod
    def uniform(cls, sigma: float, generalized: bool = False) -> "VarianceBounds":
        return cls(sigma, sigma, sigma, generalized)


@dataclass(frozen=True)
class SamplePlan:
    kind: str
    m: int
    n: int
    C1: int
    C2: int
    C_le: int
    N_le: int
    total_copies: int
    settings_count: int
    epsilon: float
    alpha: float
    P: float = 1.0
    first_moment_pilot: int = 0
    asymptotic: float = 0.0
    lam: float = 1.0
    epsilon_cap: float = inf

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("class", self.kind),
            ("modes m", self.m),
            ("photons n", self.n),
            ("C1 per first moment", self.C1),
            ("C2 per second moment", self.C2),
            ("C_le per moment", self.C_le),
            ("relevant moments N", self.N_le),
            ("settings", self.settings_count),
            ("total copies", self.total_copies),
            ("post-selection P", self.P),
            (f"asymptotic envelope (lambda={self.lam:g})", f"{self.asymptotic:.6g}"),
        ]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


@dataclass(frozen=True)
class Verdict:
    estimate: float
    accept: bool
    config: TestConfig
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "accept": self.accept, "config": asdict(self.config), "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_chebyshev(sigma, epsilon, N, alpha_bar):
    if not 0.5 <= alpha_bar < 1:
        raise PlanningError("alpha_bar must lie in [1/2, 1)")
    if sigma <= 0 or epsilon <= 0 or N < 1:
        raise PlanningError("need sigma > 0, epsilon > 0 and N >= 1")


def chebyshev_count(sigma: float, epsilon: float, N: int, alpha_bar: float) -> int:
    """Smallest c with c >= sigma^2 (N + 1) / (epsilon^2 ln(1/alpha_bar))."""
    _check_chebyshev(sigma, epsilon, N, alpha_bar)
    return _ceil(sigma**2 * (N + 1) / (epsilon**2 * log(1 / alpha_bar)))


def chebyshev_epsilon(sigma: float, count: int, N: int, alpha_bar: float) -> float:
    """Error achieved by `count` copies per moment; inverse of chebyshev_count."""
    _check_chebyshev(sigma, 1.0, N, alpha_bar)
    if count < 1:
        raise PlanningError("count must be >= 1")
    return sqrt(sigma**2 * (N + 1) / (count * log(1 / alpha_bar)))


def product_epsilon(sigma: float, count: int, N: int, alpha_bar: float) -> float:
    """Error reached by `count` copies per moment using the product form of the
    union step: N independent estimates, each within e with probability at least
    1 - sigma^2/(c e^2), all hold jointly with probability (1 - sigma^2/(c e^2))^N."""
    _check_chebyshev(sigma, 1.0, N, alpha_bar)
    if count < 1:
        raise PlanningError("count must be >= 1")
    return sqrt(sigma**2 / (count * -np.expm1(np.log(alpha_bar) / N)))


def product_count(sigma: float, epsilon: float, N: int, alpha_bar: float) -> int:
    _check_chebyshev(sigma, epsilon, N, alpha_bar)
    return _ceil(sigma**2 / (epsilon**2 * -np.expm1(np.log(alpha_bar) / N)))


def _ceil(v: float) -> int:
    # guard against representation noise pushing an exact integer up by one
    r = round(v)
    return int(r) if abs(v - r) <= 1e-9 * max(1.0, abs(v)) else int(ceil(v))


def _gaussian_parts(network: NetworkSpec):
    t = network.transform
    return network.m, network.kappa, t.s_max, float(np.linalg.norm(t.x))


def plan_gaussian(config: TestConfig, network: NetworkSpec, bounds: VarianceBounds, P: float = 1.0, lam: float = 1.0) -> SamplePlan:
    if any(network.nvec):
        raise PlanningError("Gaussian planning requires nvec = 0")
    m, kappa, s, xn = _gaussian_parts(network)
    eps = P * config.epsilon
    L = config.log_term
    C1 = _ceil(64 * bounds.sigma1**2 * (2 * m + 1) * m * s**4 * xn**2 / (eps**2 * L))
    C2 = _ceil(32 * bounds.sigma2**2 * (2 * kappa * m + 1) * m**2 * s**4 * kappa / (eps**2 * L))
    pilot = FIRST_MOMENT_PILOT if xn == 0 else 0
    asym = lam * s**4 * (2 * bounds.sigma1**2 * xn**2 * m**3 + bounds.sigma2**2 * kappa**3 * m**4) / (eps**2 * L)
    return SamplePlan(
        "G" if P == 1 else "PS-G", m, 0, C1, C2, 0, 2 * m + 2 * kappa * m,
        2 * m * C1 + 2 * kappa * m * C2, m + 3, config.epsilon, config.alpha, P, pilot, asym, lam,
    )


def plan_lo(config: TestConfig, network: NetworkSpec, bounds: VarianceBounds, P: float = 1.0, lam: float = 1.0) -> SamplePlan:
    if network.n == 0:
        return plan_gaussian(config, network, bounds, P, lam)
    m, n, d = network.m, network.n, network.d
    N = es.lemma_count_lo(m, n, d)
    eps = P * config.epsilon
    L = config.log_term
    C = _ceil(bounds.sigma_le**2 * (N + 1) / (eps**2 * L) * (n + 2.5 * m) ** 2 * (0.5 + 2 * d * sqrt(2 * n * m)) ** (2 * n))
    settings = comb(m, n) * 2 ** (n + 1) if n < m else 0
    asym = bounds.sigma_le**2 * m**4 * (lam * d**6 * n * m) ** n / (eps**2 * L)
    return SamplePlan("LO" if P == 1 else "PS-LO", m, n, 0, 0, C, N, N * C, settings, config.epsilon, config.alpha, P, 0, asym, lam)


def plan_postselected(config: TestConfig, network: NetworkSpec, P: float, bounds: VarianceBounds, lam: float = 1.0) -> SamplePlan:
    """Same planners with epsilon -> P epsilon; `bounds` hold the generalized variances."""
    if not P > 0:
        raise PlanningError("post-selection probability must be positive")
    if P > 1:
        raise PlanningError("post-selection probability cannot exceed 1")
    return plan_lo(config, network, bounds, P, lam)


def decide(estimate: float, config: TestConfig, diagnostics: dict | None = None) -> Verdict:
    """Reject iff estimate < F_T + epsilon."""
    if not isfinite(estimate):
        raise ValueError("estimate must be finite")
    accept = not (estimate < config.F_T + config.epsilon)
    return Verdict(float(estimate), accept, config, dict(diagnostics or {}))


def fidelity_gap(n_mismatch: float, config: TestConfig) -> float:
    """Robustness gap Delta for photon mismatch n; n = inf gives 1 - F_T."""
    eps, FT = config.epsilon, config.F_T
    if n_mismatch == inf:
        return 1 - FT
    if n_mismatch < 0:
        raise ValueError("photon mismatch must be nonnegative")
    if n_mismatch == 0:
        return 2 * eps
    return max((2 * eps + (1 - FT) * (n_mismatch - 1)) / n_mismatch, 2 * eps)


def detector_variance_shift(eta: float) -> float:
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    return (1 - eta) / (4 * eta)


def systematic_error_budget(eta: float, s_max: float, m: int) -> tuple[float, float]:
    """(per-outcome variance shift, Gaussian fidelity-bound deviation)."""
    shift = detector_variance_shift(eta)
    return shift, s_max**2 * m * (1 - eta) / (2 * eta)


def eta_threshold(s_max: float, m: int, epsilon: float) -> float:
    """Smallest efficiency keeping the deviation within epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return s_max**2 * m / (2 * epsilon + s_max**2 * m)


def pochhammer_planning_bound(x: float) -> tuple[float, float]:
    """(1/(1 - exp(-1/x)), x + 1/(2 + 2x) + 1/2); both are 1 at x = 0."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    rhs = x + 1 / (2 + 2 * x) + 0.5
    if x == 0:
        return 1.0, rhs
    return float(-1 / np.expm1(-1 / x)), rhs


def trace_distance_bounds(F: float) -> tuple[float, float]:
    if not 0 <= F <= 1:
        raise ValueError("fidelity must lie in [0, 1]")
    return 1 - F**2, sqrt(1 - F**2)


# ---------------------------------------------------------------- pilot variances


def label_variances(records: es.Records, schedule: es.Schedule) -> dict:
    """Per label: summed per-trial variance over its batches (the estimator variance times c)."""
    out: dict = {}
    for r in schedule.requests:
        data = records.outcomes.get(r.request_id)
        if data is None or data.shape[0] < MIN_PILOT:
            raise PlanningError(f"pilot needs >= {MIN_PILOT} samples per observable; request {r.request_id} has "
                                f"{0 if data is None else data.shape[0]}")
        _, terms = es.label_terms(r.label)
        y = es.evaluate_terms(terms[r.partial], data)
        out[r.label] = out.get(r.label, 0.0) + float(y.var(ddof=1))
    return out


def moment_class(label) -> int:
    """1 for first moments, 2 for second moments, 3 for higher orders."""
    if es.is_weyl_label(label):
        deg = sum(a + b for _, a, b in label[1])
        return 1 if deg == 1 else 2 if deg == 2 else 3
    return 1 if len(label) == 1 and len(label[0]) == 1 else 2 if len(label) == 1 else 3


def estimate_variance_bounds(records: es.Records, schedule: es.Schedule, safety: float = SAFETY_FACTOR,
                             generalized: bool = False) -> VarianceBounds:
    """Class-wise maximal empirical variance times `safety`, as standard deviations.

    Classes: first moments, second moments, and everything (sigma_le).  A class
    whose variance falls below the floor is flagged degenerate and floored.
    """
    var = label_variances(records, schedule)
    by_class = {1: [], 2: [], 3: []}
    for lab, v in var.items():
        by_class[moment_class(lab)].append(v)
    allv = [v for vs in by_class.values() for v in vs]
    degenerate = []

    def pick(name, vs):
        v = max(vs) if vs else 0.0
        if v < VARIANCE_FLOOR:
            degenerate.append(name)
            v = VARIANCE_FLOOR
        return sqrt(safety * v)

    s1 = pick("sigma1", by_class[1] or allv)
    s2 = pick("sigma2", by_class[2] or allv)
    sle = pick("sigma_le", allv)
    return VarianceBounds(s1, s2, sle, generalized, tuple(degenerate))


# ---------------------------------------------------------------- reduced budgets


def recalibrated_epsilon(form: es.LinearForm, count: int, alpha: float, sigma: float) -> float:
    """Error guaranteed with probability 1 - alpha by `count` copies per moment.

    Every weighted label lands within e = product_epsilon(sigma, c, N, 1 - alpha)
    of its mean with joint probability 1 - alpha, so the bound moves by at most
    e * sum |w|.
    """
    N = sum(1 for w in form.weights.values() if w)
    return form.l1 * product_epsilon(sigma, count, N, 1 - alpha)


def lemma_epsilon(network: NetworkSpec, count: int, alpha: float, bounds: VarianceBounds, P: float = 1.0) -> float:
    """Invert the lemma-level planners: the error a per-moment count `count` buys."""
    L = log(1 / (1 - alpha))
    if network.n == 0:
        m, kappa, s, xn = _gaussian_parts(network)
        e2 = 32 * bounds.sigma2**2 * (2 * kappa * m + 1) * m**2 * s**4 * kappa / (count * L)
        e1 = 64 * bounds.sigma1**2 * (2 * m + 1) * m * s**4 * xn**2 / (count * L)
        return sqrt(max(e1, e2)) / P
    m, n, d = network.m, network.n, network.d
    N = es.lemma_count_lo(m, n, d)
    e2 = bounds.sigma_le**2 * (N + 1) / (count * L) * (n + 2.5 * m) ** 2 * (0.5 + 2 * d * sqrt(2 * n * m)) ** (2 * n)
    return sqrt(e2) / P
