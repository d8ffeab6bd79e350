"""Phase-space linear algebra for m-mode bosonic networks.

Quadratures are interleaved as r = (q_0, p_0, q_1, p_1, ...) with
[q_j, p_j] = i/2, so the vacuum covariance is I/4 and n_j = q_j^2 + p_j^2 - 1/2.
Mode and quadrature indices are 0-based throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SPARSITY_TOL = 1e-12
SYMPLECTIC_TOL = 1e-10


class SymplecticError(ValueError):
    """Raised when a matrix violates the symplectic or pairing structure."""


def omega(m: int) -> np.ndarray:
    """Canonical symplectic form built from [[0, 1], [-1, 0]] blocks."""
    return np.kron(np.eye(m), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def symplectic_defect(S: np.ndarray) -> float:
    m = S.shape[0] // 2
    W = omega(m)
    return float(np.max(np.abs(S.T @ W @ S - W)))


def symplectic_inverse(S: np.ndarray) -> np.ndarray:
    """S^{-1} = Omega^T S^T Omega, valid for any symplectic S."""
    W = omega(S.shape[0] // 2)
    return W.T @ S.T @ W


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SymplecticTransform:
    """Decomposed Gaussian unitary: r -> S r + x with S = O D Oprime."""

    O: np.ndarray
    D: np.ndarray
    Oprime: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        O, D, Op, x = (_frozen(a) for a in (self.O, self.D, self.Oprime, self.x))
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Oprime", Op)
        object.__setattr__(self, "x", x)
        n2 = O.shape[0]
        if n2 % 2 or any(a.shape != (n2, n2) for a in (O, D, Op)) or x.shape != (n2,):
            raise SymplecticError("inconsistent shapes for a 2m-dimensional transform")
        for name, Q in (("O", O), ("Oprime", Op)):
            err = float(np.max(np.abs(Q.T @ Q - np.eye(n2))))
            if err > SYMPLECTIC_TOL:
                raise SymplecticError(f"{name} not orthogonal: defect {err:.3e}")
            err = symplectic_defect(Q)
            if err > SYMPLECTIC_TOL:
                raise SymplecticError(f"{name} not symplectic: ||Q^T W Q - W|| = {err:.3e}")
        if np.max(np.abs(D - np.diag(np.diag(D)))) > 0:
            raise SymplecticError("D must be diagonal")
        s = np.diag(D)[0::2]
        if np.any(s < 1 - SYMPLECTIC_TOL) or np.max(np.abs(np.diag(D)[1::2] * s - 1)) > SYMPLECTIC_TOL:
            raise SymplecticError("D entries must be reciprocal pairs (s, 1/s) with s >= 1")
        if not np.all(np.isfinite(x)):
            raise SymplecticError("displacement must be finite")

    @property
    def m(self) -> int:
        return self.O.shape[0] // 2

    @property
    def S(self) -> np.ndarray:
        return self.O @ self.D @ self.Oprime

    @property
    def squeezing(self) -> np.ndarray:
        return np.diag(self.D)[0::2].copy()

    @property
    def s_max(self) -> float:
        return float(np.max(self.squeezing))

    @property
    def is_passive(self) -> bool:
        return bool(np.allclose(self.D, np.eye(2 * self.m)) and not np.any(self.x))

    def inverse_matrix(self) -> np.ndarray:
        return symplectic_inverse(self.S)

    def pullback(self, r: np.ndarray) -> np.ndarray:
        """Back-transform r -> S^{-1}(r - x)."""
        return self.inverse_matrix() @ (np.asarray(r, dtype=float) - self.x)

    @classmethod
    def identity(cls, m: int) -> "SymplecticTransform":
        I = np.eye(2 * m)
        return cls(I, I, I, np.zeros(2 * m))

    @classmethod
    def build(cls, m: int, O=None, squeezing=None, Oprime=None, x=None) -> "SymplecticTransform":
        I = np.eye(2 * m)
        s = np.ones(m) if squeezing is None else np.asarray(squeezing, dtype=float)
        D = np.diag(np.ravel(np.column_stack([s, 1.0 / s])))
        return cls(
            I if O is None else O,
            D,
            I if Oprime is None else Oprime,
            np.zeros(2 * m) if x is None else x,
        )


def compose_symplectic(parts: SymplecticTransform) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Return S = O D Oprime and the affine back-transform r -> S^{-1}(r - x)."""
    S = parts.S
    err = symplectic_defect(S)
    if err > SYMPLECTIC_TOL:
        raise SymplecticError(f"composed matrix not symplectic: ||S^T W S - W|| = {err:.3e}")
    Sinv = symplectic_inverse(S)
    x = parts.x.copy()
    return S, lambda r: Sinv @ (np.asarray(r, dtype=float) - x)


# Passive networks and their m x m unitaries.
#
# A passive unitary U acts as U^dag a U = u a with a = q + i p.  Writing
# u = X + iY gives q -> Xq - Yp and p -> Yq + Xp.


def unitary_to_passive(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=complex)
    m = u.shape[0]
    O = np.zeros((2 * m, 2 * m))
    O[0::2, 0::2] = u.real
    O[0::2, 1::2] = -u.imag
    O[1::2, 0::2] = u.imag
    O[1::2, 1::2] = u.real
    return O


def passive_to_unitary(O: np.ndarray) -> np.ndarray:
    u = O[0::2, 0::2] + 1j * O[1::2, 0::2]
    err = float(np.max(np.abs(unitary_to_passive(u) - O)))
    if err > SYMPLECTIC_TOL:
        raise SymplecticError(f"matrix is not a passive (orthogonal-symplectic) transform: defect {err:.3e}")
    return u


def beam_splitter(m: int, j: int, k: int, theta: float, phi: float = 0.0) -> np.ndarray:
    u = np.eye(m, dtype=complex)
    c, s = np.cos(theta), np.sin(theta)
    u[j, j], u[j, k] = c, -np.exp(-1j * phi) * s
    u[k, j], u[k, k] = np.exp(1j * phi) * s, c
    return unitary_to_passive(u)


def phase_shift(m: int, j: int, phi: float) -> np.ndarray:
    u = np.eye(m, dtype=complex)
    u[j, j] = np.exp(1j * phi)
    return unitary_to_passive(u)


def _clean(O: np.ndarray) -> np.ndarray:
    O = O.copy()
    O[np.abs(O) <= SPARSITY_TOL] = 0.0
    return O


def random_passive(m: int, depth: int, seed: int) -> SymplecticTransform:
    """Brick-wall circuit of random beam splitters and phases.

    Layer t couples pairs (k, k+1) with k = t mod 2, t mod 2 + 2, ...; each
    layer ends with independent phase shifts on every mode.
    """
    if m < 1 or depth < 0:
        raise ValueError("need m >= 1 and depth >= 0")
    rng = np.random.default_rng(seed)
    O = np.eye(2 * m)
    for t in range(depth):
        for k in range(t % 2, m - 1, 2):
            theta = rng.uniform(0.1, np.pi / 2 - 0.1)
            O = beam_splitter(m, k, k + 1, theta, rng.uniform(0, 2 * np.pi)) @ O
        for j in range(m):
            O = phase_shift(m, j, rng.uniform(0, 2 * np.pi)) @ O
    return SymplecticTransform.build(m, O=_clean(O))


def haar_passive(m: int, seed: int) -> SymplecticTransform:
    """Dense Haar-random passive network."""
    rng = np.random.default_rng(seed)
    z = (rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    u = q * (np.diag(r) / np.abs(np.diag(r)))
    return SymplecticTransform.build(m, O=unitary_to_passive(u))


def mode_coupling(O: np.ndarray) -> np.ndarray:
    """Boolean m x m matrix: output mode j couples to input mode k."""
    m = O.shape[0] // 2
    blocks = np.abs(O).reshape(m, 2, m, 2).max(axis=(1, 3))
    return blocks > SPARSITY_TOL


def mode_range(O: np.ndarray) -> int:
    """Maximal number of modes coupled to any single mode.

    Both paired rows (outputs) and paired columns (inputs) are scanned; for the
    networks generated here the two counts agree, and taking the maximum keeps
    the projector and second-moment counting bounds valid in general.
    """
    c = mode_coupling(O)
    return int(max(c.sum(axis=1).max(), c.sum(axis=0).max()))


def kappa_of(d: int, m: int) -> int:
    return 2 * min(d * d, m)


@dataclass(frozen=True)
class NetworkSpec:
    """Classical description of a target: transform plus photon pattern."""

    transform: SymplecticTransform
    nvec: tuple[int, ...]

    def __post_init__(self):
        nvec = tuple(int(v) for v in self.nvec)
        object.__setattr__(self, "nvec", nvec)
        if len(nvec) != self.transform.m or any(v < 0 for v in nvec):
            raise ValueError("nvec must hold m nonnegative integers")
        if any(nvec) and not self.transform.is_passive:
            raise ValueError("photon-carrying targets require a passive network (D = I, x = 0)")

    @property
    def m(self) -> int:
        return self.transform.m

    @property
    def n(self) -> int:
        return sum(self.nvec)

    @property
    def d(self) -> int:
        return mode_range(self.transform.O)

    @property
    def kappa(self) -> int:
        return kappa_of(self.d, self.m)

    @property
    def target_class(self) -> str:
        return "G" if self.n == 0 else "LO"

    def to_dict(self) -> dict:
        t = self.transform
        return {
            "m": self.m,
            "nvec": list(self.nvec),
            "O": t.O.tolist(),
            "D": np.diag(t.D).tolist(),
            "Oprime": t.Oprime.tolist(),
            "x": t.x.tolist(),
            "d": self.d,
            "kappa": self.kappa,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        m = int(data["m"])
        I = np.eye(2 * m)
        D = np.asarray(data.get("D", np.ones(2 * m)), dtype=float)
        t = SymplecticTransform(
            np.asarray(data.get("O", I), dtype=float),
            np.diag(D) if D.ndim == 1 else D,
            np.asarray(data.get("Oprime", I), dtype=float),
            np.asarray(data.get("x", np.zeros(2 * m)), dtype=float),
        )
        # d and kappa are always recomputed from O, never read back.
        return cls(t, tuple(data.get("nvec", [0] * m)))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def lo(cls, O: np.ndarray, nvec: Sequence[int]) -> "NetworkSpec":
        m = O.shape[0] // 2
        return cls(SymplecticTransform.build(m, O=O), tuple(nvec))


@dataclass(frozen=True)
class ModeProjector:
    j: int
    matrix: np.ndarray


def projector(network: NetworkSpec, j: int) -> ModeProjector:
    """Rank-2 projector onto the span of columns 2j, 2j+1 of O."""
    m = network.m
    if not 0 <= j < m:
        raise IndexError(f"mode index {j} outside [0, {m})")
    o = network.transform.O[:, 2 * j : 2 * j + 2]
    P = o @ o.T
    P[np.abs(P) <= SPARSITY_TOL] = 0.0
    P.setflags(write=False)
    return ModeProjector(j, P)
