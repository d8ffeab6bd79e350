"""Experiment wiring: plan, prover records, accumulation, recombination, decision."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import certifier as ct
from . import estimation as es
from . import fock as fk
from . import gaussian as ga
from . import prover as pv
from .symplectic import NetworkSpec

SCHEMA_VERSION = 1


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    test: dict
    scenario: dict
    budget_mode: str = "reduced:10000"
    recalibration: str = "weights"
    form: str = "corrected"
    bounds: dict | None = None
    pilot: int = 1000
    postselection: dict | None = None
    trials: int = 100
    seed: int = 0
    lam: float = 1.0
    max_total_samples: int = pv.DEFAULT_MAX_SAMPLES

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        parse_budget_mode(self.budget_mode)
        if self.recalibration not in ("weights", "lemma"):
            raise ValueError("recalibration must be 'weights' or 'lemma'")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        if "network_file" in d:
            path = Path(d.pop("network_file"))
            if base is not None and not path.is_absolute():
                path = base / path
            d["network"] = json.loads(path.read_text())
        if "scenario_file" in d:
            path = Path(d.pop("scenario_file"))
            if base is not None and not path.is_absolute():
                path = base / path
            d["scenario"] = json.loads(path.read_text())
        d["network"] = NetworkSpec.from_dict(d["network"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["network"] = self.network.to_dict()
        return out


def parse_budget_mode(mode: str) -> int | None:
    """None for literal, the per-moment count for reduced:N."""
    if mode == "literal":
        return None
    if mode.startswith("reduced:"):
        c = int(mode.split(":", 1)[1])
        if c < 1:
            raise ValueError("reduced budget must be >= 1")
        return c
    raise ValueError(f"budget mode must be 'literal' or 'reduced:N', got {mode!r}")


def trial_seed(seed: int, trial: int, branch: int) -> np.random.SeedSequence:
    """experiment seed -> trial -> branch (0 pilot, 1 main); requests add their id."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(trial), int(branch)))


def build_scenario(cfg: ExperimentConfig) -> pv.ProverScenario:
    sc = dict(cfg.scenario)
    backend = sc.get("backend", "gaussian")
    eta = float(sc.get("eta", 1.0))
    net = cfg.network
    if backend == "gaussian":
        state = None
        if "mean" in sc:
            state = ga.GaussianState(sc["mean"], sc["cov"])
        channels = tuple((k, s) for k, s in sc.get("channels", []))
        if cfg.postselection is not None:
            raise ValueError("post-selected scenarios need the fock backend")
        return pv.ProverScenario("gaussian", net, state, channels, eta, max_total_samples=cfg.max_total_samples)
    if backend == "fock":
        cutoff = int(sc.get("cutoff", 8))
        target = target_state_fock(cfg, cutoff)
        recipe = sc.get("recipe", "honest")
        if recipe == "honest":
            state = target
        elif recipe == "mixture":
            if cfg.postselection is not None:
                raise ValueError("mixtures are built for unconditioned targets")
            state = pv.build_orthogonal_prep(
                target, net, sc.get("style", "fock"), float(sc["weight"]),
                excitation=sc.get("excitation"), seed=sc.get("perp_seed"), max_total=sc.get("max_total"),
            ).state
        elif recipe == "fock_basis":
            state = fk.fock_basis_state(sc["nvec"], cutoff)
        else:
            raise ValueError(f"unknown fock recipe {recipe!r}")
        return pv.ProverScenario("fock", net, state, eta=eta, max_total_samples=cfg.max_total_samples)
    if backend == "spoof":
        dist = sc.get("distribution", "normal")
        loc, scale = float(sc.get("loc", 0.0)), float(sc.get("scale", 0.5))

        def spoof(setting, count, rng):
            shape = (count, len(setting))
            if dist == "normal":
                return rng.normal(loc, scale, shape)
            if dist == "uniform":
                return rng.uniform(loc - scale, loc + scale, shape)
            if dist == "constant":
                return np.full(shape, loc)
            raise ValueError(f"unknown spoof distribution {dist!r}")

        return pv.ProverScenario("spoof", net, spoof=spoof, eta=eta, max_total_samples=cfg.max_total_samples)
    raise ValueError(f"unknown backend {backend!r}")


def target_state_fock(cfg: ExperimentConfig, cutoff: int) -> fk.FockState:
    """Target on the prepared modes: joint target, post-selected when configured."""
    net = cfg.network
    joint = fk.prepare_lo_target(net, cutoff) if net.n else fk.gaussian_state_fock(net, cutoff)
    if cfg.postselection is None:
        return joint
    ps = cfg.postselection
    return fk.post_select(joint, ps["ancilla_modes"], ps["phi"])[0]


def postselection_of(cfg: ExperimentConfig) -> es.PostSelection | None:
    if cfg.postselection is None:
        return None
    ps = cfg.postselection
    cutoff = int(ps.get("cutoff", cfg.scenario.get("cutoff", 8)))
    P = ps.get("P")
    if P is None:
        net = cfg.network
        joint = fk.prepare_lo_target(net, cutoff) if net.n else fk.gaussian_state_fock(net, cutoff)
        P = fk.post_select(joint, ps["ancilla_modes"], ps["phi"])[1]
    return es.PostSelection(tuple(ps["ancilla_modes"]), tuple(ps["phi"]), float(P), cutoff)


# ---------------------------------------------------------------- protocol


@dataclass
class Protocol:
    """Everything fixed before any data is requested."""

    cfg: ExperimentConfig
    form: es.LinearForm
    labels: tuple
    plan: es.SettingPlan
    postsel: es.PostSelection | None

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "Protocol":
        net = cfg.network
        postsel = postselection_of(cfg)
        if postsel is None:
            form = es.joint_form(net, cfg.form)
            labels = es.relevant_moments_gaussian(net) if net.n == 0 else form.labels
            plan = es.default_plan(net, labels)
        else:
            form = es.system_form(net, postsel, cfg.form)
            labels = form.labels
            m_sys = net.m - len(postsel.ancilla_modes)
            plan = es.complete_plan(es.settings_gaussian(m_sys), labels)
        return cls(cfg, form, tuple(labels), plan, postsel)

    @property
    def P(self) -> float:
        return 1.0 if self.postsel is None else self.postsel.P

    def fixed_bounds(self) -> ct.VarianceBounds | None:
        b = self.cfg.bounds
        if b is None:
            return None
        return ct.VarianceBounds(float(b["sigma1"]), float(b["sigma2"]), float(b["sigma_le"]), self.postsel is not None)

    def sample_plan(self, bounds: ct.VarianceBounds, epsilon: float) -> ct.SamplePlan:
        t = self.cfg.test
        config = ct.TestConfig(float(t["F_T"]), float(t["alpha"]), epsilon)
        if self.postsel is None:
            return ct.plan_lo(config, self.cfg.network, bounds, lam=self.cfg.lam)
        return ct.plan_postselected(config, self.cfg.network, self.P, bounds, lam=self.cfg.lam)

    def literal_counts(self, plan: ct.SamplePlan) -> dict:
        counts = {}
        for lab in self.labels:
            if plan.kind.endswith("G"):
                first = ct.moment_class(lab) == 1
                counts[lab] = (plan.C1 or plan.first_moment_pilot) if first else plan.C2
            else:
                counts[lab] = plan.C_le
        return counts

    def epsilon_for(self, count: int, bounds: ct.VarianceBounds) -> float:
        alpha = float(self.cfg.test["alpha"])
        if self.cfg.recalibration == "weights":
            # only labels that carry weight constrain the error
            by_class = {1: bounds.sigma1, 2: bounds.sigma2, 3: bounds.sigma_le}
            sigma = max(by_class[ct.moment_class(lab)] for lab, w in self.form.weights.items() if w)
            return ct.recalibrated_epsilon(self.form, count, alpha, sigma)
        return ct.lemma_epsilon(self.cfg.network, count, alpha, bounds, self.P)


@dataclass
class CertificationResult:
    verdict: ct.Verdict
    plan: ct.SamplePlan
    bounds: ct.VarianceBounds
    store: es.MomentEstimateStore
    records: es.Records
    schedule: es.Schedule

    def artifacts(self) -> dict:
        diag = {
            "schema_version": SCHEMA_VERSION,
            "moments": json.loads(self.store.to_json()),
        }
        return {
            "verdict.json": self.verdict.to_json() + "\n",
            "plan.json": self.plan.to_json() + "\n",
            "moments.json": json.dumps(diag, indent=1, sort_keys=True) + "\n",
            "records.csv": self.records.to_csv(),
        }


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - tag and re-raise
        raise StageError(name, exc) from exc


def pilot_bounds(proto: Protocol, scenario: pv.ProverScenario, seed) -> ct.VarianceBounds:
    sch = es.build_schedule(proto.plan, proto.labels, proto.cfg.pilot)
    rec = pv.respond(scenario, sch.prover_view(), seed)
    return ct.estimate_variance_bounds(rec, sch, generalized=proto.postsel is not None)


def certify(cfg: ExperimentConfig, trial: int = 0, proto: Protocol | None = None,
            scenario: pv.ProverScenario | None = None) -> CertificationResult:
    """One protocol instance; a pure function of (cfg, trial)."""
    proto = proto or _stage("plan", Protocol.build, cfg)
    scenario = scenario or _stage("scenario", build_scenario, cfg)
    bounds = proto.fixed_bounds() or _stage("pilot", pilot_bounds, proto, scenario, trial_seed(cfg.seed, trial, 0))
    reduced = parse_budget_mode(cfg.budget_mode)
    FT, alpha = float(cfg.test["F_T"]), float(cfg.test["alpha"])
    cap = (1 - FT) / 2
    if reduced is None:
        eps = float(cfg.test["epsilon"])
        splan = dataclasses.replace(_stage("plan", proto.sample_plan, bounds, eps), epsilon_cap=cap)
        counts = proto.literal_counts(splan)
    else:
        eps = _stage("plan", proto.epsilon_for, reduced, bounds)
        # plan at the largest admissible epsilon; the achieved one is recorded
        splan = _stage("plan", proto.sample_plan, bounds, min(eps, cap))
        splan = dataclasses.replace(splan, epsilon=eps, epsilon_cap=cap)
        counts = reduced
    schedule = _stage("schedule", es.build_schedule, proto.plan, proto.labels, counts)
    records = _stage("prover", pv.respond, scenario, schedule.prover_view(), trial_seed(cfg.seed, trial, 1))
    store = _stage("accumulate", es.accumulate, records, schedule)
    estimate = _stage("recombine", proto.form.evaluate, store.means())
    diagnostics = {
        "epsilon_source": "configured" if reduced is None else f"{cfg.recalibration}-recalibrated",
        "per_moment_count": reduced if reduced is not None else None,
        "copies": schedule.total_copies,
        "labels": len(proto.labels),
        "settings": len(proto.plan),
        "form": cfg.form,
        "P": proto.P,
        "sigma": [bounds.sigma1, bounds.sigma2, bounds.sigma_le],
        "trial": trial,
    }
    if splan.epsilon > splan.epsilon_cap:
        # the budget cannot resolve the threshold: never accept
        diagnostics["reason"] = "achievable epsilon exceeds (1 - F_T)/2"
        diagnostics["epsilon_achieved"] = splan.epsilon
        verdict = ct.Verdict(float(estimate), False, ct.TestConfig(FT, alpha, splan.epsilon_cap), diagnostics)
    else:
        verdict = ct.decide(estimate, ct.TestConfig(FT, alpha, splan.epsilon), diagnostics)
    return CertificationResult(verdict, splan, bounds, store, records, schedule)


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class RateReport:
    trials: int
    accepted: int
    estimates: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    alpha: float = 0.0

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.trials

    @property
    def reject_rate(self) -> float:
        return 1 - self.accept_rate

    def to_dict(self) -> dict:
        lo, hi = wilson_interval(self.accepted, self.trials)
        return {
            "schema_version": SCHEMA_VERSION,
            "trials": self.trials,
            "accepted": self.accepted,
            "accept_rate": self.accept_rate,
            "accept_wilson95": [lo, hi],
            "reject_rate": self.reject_rate,
            "reject_wilson95": [1 - hi, 1 - lo],
            "target_rate": 1 - self.alpha,
            "mean_estimate": float(np.mean(self.estimates)),
            "mean_epsilon": float(np.mean(self.epsilons)),
        }


def verify(cfg: ExperimentConfig, trials: int | None = None) -> RateReport:
    """Repeat certify with per-trial seeds and count acceptances."""
    n = cfg.trials if trials is None else trials
    proto = Protocol.build(cfg)
    scenario = build_scenario(cfg)
    rep = RateReport(n, 0, alpha=float(cfg.test["alpha"]))
    for t in range(n):
        res = certify(cfg, t, proto, scenario)
        rep.accepted += int(res.verdict.accept)
        rep.estimates.append(res.verdict.estimate)
        rep.epsilons.append(res.plan.epsilon)
    return rep


# ---------------------------------------------------------------- oracle and nullifier reports


def oracle_report(cfg: ExperimentConfig) -> dict:
    """Exact fidelity and the exact-moment bounds for the configured preparation."""
    net = cfg.network
    sc = build_scenario(cfg)
    out: dict = {"backend": sc.backend}
    proto = Protocol.build(cfg)
    if sc.backend == "gaussian":
        F = ga.gaussian_fidelity_oracle(net, sc.state)
        bound = proto.form.evaluate(es.exact_store(sc.state, proto.labels).means())
    elif sc.backend == "fock":
        cutoff = sc.state.cutoff
        F = fk.fidelity_oracle_fock(target_state_fock(cfg, cutoff), sc.state)
        bound = proto.form.evaluate(es.exact_store(sc.state, proto.labels).means())
    else:
        raise ValueError("spoofed outcomes have no underlying state")
    lo, hi = ct.trace_distance_bounds(min(1.0, max(0.0, F)))
    out.update({"fidelity": F, "bound": bound, "form": cfg.form, "trace_distance_bounds": [lo, hi]})
    return out


def nullifier_report(network: NetworkSpec, cutoff: int, postselection: dict | None = None) -> dict:
    """Annihilation and commutator norms of the m nullifiers."""
    degree = 2 * (network.n + 1)
    if cutoff < degree + network.n:
        raise ValueError(f"cutoff {cutoff} too small for nullifiers of degree {degree}")
    nulls = fk.all_nullifiers(network, cutoff)
    target = fk.prepare_lo_target(network, cutoff) if network.n else fk.gaussian_state_fock(network, cutoff)
    ann = [float(np.linalg.norm(N @ target.ket)) for N in nulls]
    idx = fk.safe_subspace(network.m, cutoff, 2 * degree)
    comm = [fk.commutator_norm(nulls[i], nulls[j], idx) for i in range(len(nulls)) for j in range(i + 1, len(nulls))]
    rep = {"m": network.m, "n": network.n, "cutoff": cutoff, "annihilation": ann,
           "max_annihilation": max(ann), "max_commutator": max(comm, default=0.0)}
    if postselection is not None:
        anc, phi = list(postselection["ancilla_modes"]), list(postselection["phi"])
        sys_t, P = fk.post_select(target, anc, phi)
        W = sum(nulls)
        joint = fk.tensor_with_ancillas(sys_t, anc, phi)
        # <phi| W |phi> applied to the post-selected target
        v = W @ joint.ket
        rep["postselected"] = {"P": P, "compressed_annihilation": float(np.linalg.norm(_compress(v, network.m, cutoff, anc, phi)))}
    return rep


def _compress(v: np.ndarray, m: int, cutoff: int, anc, phi) -> np.ndarray:
    L = cutoff + 1
    t = v.reshape((L,) * m)
    for mode, ph in sorted(zip(anc, phi), key=lambda z: -z[0]):
        t = np.tensordot(t, fk._ancilla_vector(ph, cutoff).conj(), axes=([mode], [0]))
    return t.ravel()


def write_artifacts(out_dir, files: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        (out / name).write_text(files[name])
