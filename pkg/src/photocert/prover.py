"""Simulated prover: answers a measurement schedule from a configured preparation.

The prover only ever receives (request id, per-mode angles, count) triples; it
never learns which moment a batch serves or what threshold is tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import estimation as es
from . import fock as fk
from . import gaussian as ga
from .certifier import detector_variance_shift
from .symplectic import NetworkSpec, passive_to_unitary

DEFAULT_MAX_SAMPLES = 50_000_000


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ProverScenario:
    """backend: gaussian | fock | spoof.

    gaussian: `state` is a GaussianState, or None for the target with the
    noise channels in `channels` applied in order.
    fock: `state` is a FockState (for example from build_orthogonal_prep).
    spoof: `spoof(setting, count, rng)` returns arbitrary outcome tables.
    """

    backend: str
    network: NetworkSpec
    state: object = None
    channels: tuple = ()
    eta: float = 1.0
    spoof: Callable | None = None
    max_total_samples: int = DEFAULT_MAX_SAMPLES

    def __post_init__(self):
        if self.backend not in ("gaussian", "fock", "spoof"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0 < self.eta <= 1:
            raise ValueError("detector efficiency must lie in (0, 1]")
        if self.backend == "spoof" and self.spoof is None:
            raise ValueError("spoof backend needs an outcome generator")
        if self.backend == "fock" and not isinstance(self.state, fk.FockState):
            raise ValueError("fock backend needs an explicit FockState")
        if self.backend == "gaussian":
            st = self.state if self.state is not None else ga.prepare_gaussian_target(self.network)
            for kind, strength in self.channels:
                st = ga.noise_channel(st, kind, strength)
            object.__setattr__(self, "state", st)
        # post-selected scenarios prepare only the system modes, hence <=
        if self.backend != "spoof" and self.state.m > self.network.m:
            raise ValueError("preparation has more modes than the network")

    @property
    def m(self) -> int:
        return self.state.m if self.state is not None else self.network.m


def _request_seed(seed, request_id: int) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (request_id,))
    return np.random.SeedSequence(seed, spawn_key=(request_id,))


def respond(scenario: ProverScenario, requests: Sequence, seed) -> es.Records:
    """Outcome tables for [(request_id, setting, count), ...].

    Each request draws from its own seed derived from (seed, request_id), so
    adding requests never changes earlier tables.  With eta < 1 every outcome
    receives independent Gaussian noise of variance (1 - eta)/(4 eta).
    """
    total = sum(int(c) for _, _, c in requests)
    if total > scenario.max_total_samples:
        raise BudgetExceeded(f"{total} copies requested; guard is {scenario.max_total_samples}")
    shift = detector_variance_shift(scenario.eta)
    rec = es.Records()
    for rid, setting, count in requests:
        if len(setting) != scenario.m:
            raise ValueError(f"setting for request {rid} has {len(setting)} angles, prover has {scenario.m} modes")
        ss = _request_seed(seed, int(rid))
        s_draw, s_noise = ss.spawn(2)
        if scenario.backend == "gaussian":
            data = ga.sample_homodyne_gaussian(scenario.state, setting, count, s_draw)
        elif scenario.backend == "fock":
            data = fk.sample_homodyne_fock(scenario.state, setting, count, s_draw)
        else:
            data = np.asarray(scenario.spoof(tuple(setting), int(count), np.random.default_rng(s_draw)), dtype=float)
            if data.shape != (count, scenario.m):
                raise ValueError("spoofed outcomes must have shape (count, m)")
        if shift:
            data = data + np.sqrt(shift) * np.random.default_rng(s_noise).standard_normal(data.shape)
        rec.add(int(rid), setting, data)
    return rec


# ---------------------------------------------------------------- orthogonal mixtures


@dataclass(frozen=True)
class OrthogonalPrep:
    state: fk.FockState
    perp: fk.FockState
    weight: float
    n_perp: float
    info: dict = field(default_factory=dict)


def _orthogonalize(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    v = v - (t.conj() @ v) * t
    nrm = np.linalg.norm(v)
    if nrm < 1e-10:
        raise ValueError("candidate lies in the span of the target")
    return v / nrm


def _mismatch_of(perp: fk.FockState, network: NetworkSpec) -> float:
    if network.n == 0:
        labels = es.relevant_moments_gaussian(network)
        return 1.0 - es.recombine_F0(es.exact_store(perp, labels), network)
    return fk.witness_direct(perp, network).N


def build_orthogonal_prep(target: fk.FockState, network: NetworkSpec, style: str, weight: float,
                          excitation: Sequence[int] | None = None, seed=None, max_total: int | None = None) -> OrthogonalPrep:
    """rho_p = weight rho_t + (1 - weight) rho_perp with rho_perp orthogonal to the target.

    style:
      photon_added  a_0^dag |t>, orthogonalized against |t>
      fock          the network applied to the basis state `excitation`
      random        random pure state orthogonal to |t>, support up to max_total photons
    Returns the mixture and n_perp, the witness expectation on rho_perp.
    """
    if not 0 <= weight <= 1:
        raise ValueError("weight must lie in [0, 1]")
    t = target.ket
    L = target.cutoff
    if style == "photon_added":
        ops = fk.fock_operators(target.m, L)
        if np.abs(t[ops.occupations[:, 0] == L]).max(initial=0) > 1e-12:
            raise ValueError("photon-added state leaves the cutoff")
        v = ops.adag[0] @ t
        perp = _orthogonalize(v, t)
    elif style == "fock":
        if excitation is None:
            raise ValueError("fock style needs an excitation pattern")
        base = fk.fock_basis_state(excitation, L)
        if network.n == 0:
            image = fk.apply_gaussian_unitary(base, network.transform)
        else:
            image = fk.apply_passive(base, passive_to_unitary(network.transform.O))
        perp = _orthogonalize(image.ket, t)
    elif style == "random":
        mt = L if max_total is None else max_total
        v = fk.random_pure_state(target.m, L, mt, seed).ket
        perp = _orthogonalize(v, t)
    else:
        raise ValueError(f"unknown style {style!r}")
    perp_state = fk.FockState.from_ket(target.m, L, perp)
    if weight == 1:
        mix = target
    elif weight == 0:
        mix = perp_state
    else:
        mix = fk.mixture([target, perp_state], [weight, 1 - weight])
    F = fk.fidelity_oracle_fock(target, mix)
    if abs(F - weight) > 1e-9:
        raise ArithmeticError(f"mixture fidelity {F} differs from the requested weight {weight}")
    return OrthogonalPrep(mix, perp_state, weight, float(_mismatch_of(perp_state, network)), {"style": style})
