"""Exact Gaussian backend: first and second moments, channels, sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .symplectic import NetworkSpec, SymplecticTransform, omega, symplectic_inverse
from .weyl import ANGLES, key_to_weyl

VACUUM_VAR = 0.25


class ClassMismatch(ValueError):
    """The network does not belong to the class an operation requires."""


class IllConditioned(ArithmeticError):
    pass


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        n2 = mean.shape[0]
        if n2 % 2 or cov.shape != (n2, n2):
            raise ValueError("mean must have length 2m and cov shape (2m, 2m)")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("non-finite moments")
        if np.max(np.abs(cov - cov.T)) > 1e-10:
            raise ValueError("covariance not symmetric")
        eig = np.linalg.eigvalsh(cov + 0.25j * omega(n2 // 2))
        if eig.min() < -1e-9:
            raise ValueError(f"uncertainty relation violated: min eigenvalue {eig.min():.3e}")

    @property
    def m(self) -> int:
        return self.mean.shape[0] // 2

    @property
    def second_moments(self) -> np.ndarray:
        """Gamma_kl = <(r_k r_l + r_l r_k)/2>."""
        return self.cov + np.outer(self.mean, self.mean)

    def transformed(self, S: np.ndarray, x: np.ndarray | None = None) -> "GaussianState":
        mean = S @ self.mean + (0 if x is None else x)
        return GaussianState(mean, S @ self.cov @ S.T)

    def pullback(self, t: SymplecticTransform) -> "GaussianState":
        """Moments of the back-transformed state, r -> S^{-1}(r - x)."""
        Sinv = symplectic_inverse(t.S)
        return GaussianState(Sinv @ (self.mean - t.x), Sinv @ self.cov @ Sinv.T)

    def reduced(self, modes) -> "GaussianState":
        idx = np.ravel([[2 * j, 2 * j + 1] for j in modes])
        return GaussianState(self.mean[idx], self.cov[np.ix_(idx, idx)])


def vacuum(m: int) -> GaussianState:
    return GaussianState(np.zeros(2 * m), VACUUM_VAR * np.eye(2 * m))


def thermal(m: int, nbar) -> GaussianState:
    nb = np.broadcast_to(np.asarray(nbar, dtype=float), (m,))
    return GaussianState(np.zeros(2 * m), np.diag(np.repeat(VACUUM_VAR + nb / 2, 2)))


def coherent(alpha) -> GaussianState:
    alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
    mean = np.ravel(np.column_stack([alpha.real, alpha.imag]))
    return GaussianState(mean, VACUUM_VAR * np.eye(mean.size))


def prepare_gaussian_target(network: NetworkSpec) -> GaussianState:
    if any(network.nvec):
        raise ClassMismatch("Gaussian target requires nvec = 0")
    t = network.transform
    return vacuum(network.m).transformed(t.S, t.x)


def mean_total_photons(state: GaussianState, network: NetworkSpec) -> float:
    """<n> of the back-transformed preparation; 1 minus this is F^(0)."""
    back = state.pullback(network.transform)
    return float(np.trace(back.cov) + back.mean @ back.mean - state.m / 2)


def gaussian_overlap(a: GaussianState, b: GaussianState) -> float:
    """Tr[rho_a rho_b] for Gaussian states in the vacuum-variance-1/4 convention.

    Evaluates det(2 (Va + Vb))^(-1/2) exp(-d^T (Va + Vb)^(-1) d / 2) with d the
    mean difference; the normalization is pinned by cross-checks against the
    Fock oracle.
    """
    V = a.cov + b.cov
    d = a.mean - b.mean
    sign, logdet = np.linalg.slogdet(2 * V)
    if sign <= 0 or not np.isfinite(logdet) or np.linalg.cond(V) > 1e12:
        raise IllConditioned("covariance sum is singular or ill-conditioned")
    return float(np.exp(-0.5 * logdet - 0.5 * d @ np.linalg.solve(V, d)))


def gaussian_fidelity_oracle(network: NetworkSpec, prep: GaussianState) -> float:
    if any(network.nvec):
        raise ClassMismatch("Gaussian oracle requires nvec = 0")
    return gaussian_overlap(vacuum(network.m), prep.pullback(network.transform))


def noise_channel(state: GaussianState, kind: str, strength) -> GaussianState:
    m = state.m
    if kind == "loss":
        eta = float(strength)
        if not 0 <= eta <= 1:
            raise ValueError("loss transmissivity must lie in [0, 1]")
        return GaussianState(np.sqrt(eta) * state.mean, eta * state.cov + (1 - eta) * VACUUM_VAR * np.eye(2 * m))
    if kind == "thermal":
        nb = float(strength)
        if nb < 0:
            raise ValueError("thermal occupation must be nonnegative")
        return GaussianState(state.mean, state.cov + nb / 2 * np.eye(2 * m))
    if kind == "displacement_drift":
        drift = np.asarray(strength, dtype=float)
        if drift.ndim == 0:
            v = np.zeros(2 * m)
            v[0::2] = drift
            drift = v
        if drift.shape != (2 * m,) or not np.all(np.isfinite(drift)):
            raise ValueError("drift must be a scalar or a finite vector of length 2m")
        return GaussianState(state.mean + drift, state.cov)
    raise ValueError(f"unknown channel kind {kind!r}")


def quadrature_rows(m: int, angles) -> np.ndarray:
    """Rows mapping r to the measured x_theta_j = cos q_j + sin p_j."""
    R = np.zeros((m, 2 * m))
    for j, a in enumerate(angles):
        th = ANGLES[a] if isinstance(a, (int, np.integer)) else float(a)
        R[j, 2 * j], R[j, 2 * j + 1] = np.cos(th), np.sin(th)
    return R


def sample_homodyne_gaussian(state: GaussianState, setting, count: int, seed) -> np.ndarray:
    """Joint outcomes (count x m) for one quadrature angle per mode.

    setting entries are indices into the homodyne angle alphabet (ints) or
    explicit angles in radians (floats).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(setting) != state.m:
        raise ValueError("setting must give one angle per mode")
    R = quadrature_rows(state.m, setting)
    mu, C = R @ state.mean, R @ state.cov @ R.T
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise ValueError("restricted covariance is not positive definite") from exc
    rng = np.random.default_rng(seed)
    return mu + rng.standard_normal((count, state.m)) @ L.T


# Exact symmetric-ordered moments.  The Wigner function of a Gaussian state is a
# classical normal density, so Weyl-ordered expectations are classical moments.


def _classical_moment(mean: np.ndarray, cov: np.ndarray, idx: list) -> float:
    """E[prod_i X_idx[i]] for X ~ N(mean, cov), by recursion on the first factor."""
    if not idx:
        return 1.0
    first, rest = idx[0], idx[1:]
    total = mean[first] * _classical_moment(mean, cov, rest)
    for i, other in enumerate(rest):
        if cov[first, other]:
            total += cov[first, other] * _classical_moment(mean, cov, rest[:i] + rest[i + 1 :])
    return total


def weyl_moment(state: GaussianState, mono) -> float:
    """<prod_mode W(q^a p^b)> for a monomial ((mode, a, b), ...)."""
    idx = []
    for mode, a, b in mono:
        idx += [2 * mode] * a + [2 * mode + 1] * b
    return _classical_moment(state.mean, state.cov, idx)


def moment_gaussian(state: GaussianState, key) -> float:
    """Exact key moment of a Gaussian state through its Weyl expansion."""
    return float(sum(c * weyl_moment(state, mono) for mono, c in key_to_weyl(tuple(key))))
