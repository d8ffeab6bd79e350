"""Truncated Fock-space backend.

States are stored as weighted ensembles of kets over the box of per-mode
occupations 0..cutoff (mode 0 is the most significant tensor axis).  A density
matrix is never formed unless asked for, which keeps three-mode states with
cutoff above ten cheap.  Every passive operation here conserves the total
photon number, so states supported on total photons <= cutoff are handled
without truncation error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations, product
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .symplectic import NetworkSpec, SymplecticTransform, passive_to_unitary, symplectic_inverse
from .weyl import ANGLES

NORM_TOL = 1e-10
PROB_FLOOR = 1e-12


class TruncationWarning(UserWarning):
    pass


class NotAState(ArithmeticError):
    """The orthogonal remainder of a preparation is not positive semidefinite."""


class GridMassDeficit(ArithmeticError):
    pass


# ---------------------------------------------------------------- operators


@lru_cache(maxsize=None)
def _single_a(cutoff: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, cutoff + 1, dtype=float)), 1, format="csr")


class FockOperators:
    """Sparse ladder and quadrature operators for m modes at a cutoff."""

    def __init__(self, m: int, cutoff: int):
        self.m, self.cutoff = m, cutoff
        self.L = cutoff + 1
        self.dim = self.L**m
        self.occupations = np.array(list(product(range(self.L), repeat=m)), dtype=int).reshape(self.dim, m)
        self.total = self.occupations.sum(axis=1)
        a1 = _single_a(cutoff)
        self.a = []
        for j in range(m):
            left = sp.identity(self.L**j, format="csr")
            right = sp.identity(self.L ** (m - j - 1), format="csr")
            self.a.append(sp.kron(sp.kron(left, a1), right, format="csr"))
        self.adag = [a.T.tocsr() for a in self.a]
        self.r = []
        for j in range(m):
            self.r.append(((self.a[j] + self.adag[j]) * 0.5).tocsr())
            self.r.append(((self.a[j] - self.adag[j]) * (-0.5j)).tocsr())

    def n(self, j: int) -> sp.csr_matrix:
        return sp.diags(self.occupations[:, j].astype(float), format="csr")

    def pair(self, k: int, l: int) -> sp.csr_matrix:
        return ((self.r[k] @ self.r[l] + self.r[l] @ self.r[k]) * 0.5).tocsr()

    def factor(self, f: tuple) -> sp.csr_matrix:
        return self.r[f[0]] if len(f) == 1 else self.pair(*f)


@lru_cache(maxsize=32)
def fock_operators(m: int, cutoff: int) -> FockOperators:
    return FockOperators(m, cutoff)


def quadrature_operator(m: int, cutoff: int, mode: int, kind) -> sp.csr_matrix:
    """q, p or the rotated quadrature cos(theta) q + sin(theta) p of one mode."""
    ops = fock_operators(m, cutoff)
    if kind == "q":
        return ops.r[2 * mode]
    if kind == "p":
        return ops.r[2 * mode + 1]
    th = float(kind)
    return (np.cos(th) * ops.r[2 * mode] + np.sin(th) * ops.r[2 * mode + 1]).tocsr()


# ---------------------------------------------------------------- states


@dataclass(frozen=True)
class FockState:
    m: int
    cutoff: int
    kets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        kets = np.atleast_2d(np.asarray(self.kets, dtype=complex))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if kets.shape != (w.size, (self.cutoff + 1) ** self.m):
            raise ValueError("ket array does not match (m, cutoff)")
        if np.any(w < -1e-15):
            raise ValueError("negative ensemble weight")
        norms = np.einsum("ki,ki->k", kets.conj(), kets).real
        if np.max(np.abs(norms - 1)) > NORM_TOL or abs(w.sum() - 1) > NORM_TOL:
            raise ValueError("state not normalized")
        kets.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "kets", kets)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return (self.cutoff + 1) ** self.m

    @property
    def is_pure(self) -> bool:
        return self.kets.shape[0] == 1

    @property
    def ket(self) -> np.ndarray:
        if not self.is_pure:
            raise ValueError("mixed state has no single ket")
        return self.kets[0]

    def density(self) -> np.ndarray:
        return (self.kets.T * self.weights) @ self.kets.conj()

    def tensor(self) -> np.ndarray:
        return self.ket.reshape((self.cutoff + 1,) * self.m)

    def populations(self) -> np.ndarray:
        return self.weights @ np.abs(self.kets) ** 2

    def max_total_photons(self, tol: float = 1e-14) -> int:
        ops = fock_operators(self.m, self.cutoff)
        pop = self.populations()
        return int(ops.total[pop > tol].max()) if np.any(pop > tol) else 0

    def leakage(self) -> float:
        """Population on basis states with some mode at the top level."""
        ops = fock_operators(self.m, self.cutoff)
        return float(self.populations()[np.any(ops.occupations == self.cutoff, axis=1)].sum())

    def with_cutoff(self, cutoff: int) -> "FockState":
        """Embed into (or truncate to) a different per-mode cutoff."""
        L0, L1 = self.cutoff + 1, cutoff + 1
        k = min(L0, L1)
        out = np.zeros((self.kets.shape[0],) + (L1,) * self.m, dtype=complex)
        src = self.kets.reshape((-1,) + (L0,) * self.m)
        sl = (slice(None),) + (slice(0, k),) * self.m
        out[sl] = src[sl]
        flat = out.reshape(self.kets.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        if cutoff < self.cutoff and np.max(np.abs(norms - 1)) > NORM_TOL:
            raise ValueError("truncation would discard population")
        return FockState(self.m, cutoff, flat / norms[:, None], self.weights)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "cutoff": self.cutoff,
            "weights": self.weights.tolist(),
            "kets_real": self.kets.real.tolist(),
            "kets_imag": self.kets.imag.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FockState":
        kets = np.asarray(d["kets_real"]) + 1j * np.asarray(d["kets_imag"])
        return cls(int(d["m"]), int(d["cutoff"]), kets, np.asarray(d["weights"]))

    @classmethod
    def from_ket(cls, m: int, cutoff: int, ket, normalize: bool = False) -> "FockState":
        ket = np.asarray(ket, dtype=complex).reshape(1, -1)
        if normalize:
            ket = ket / np.linalg.norm(ket)
        return cls(m, cutoff, ket, np.ones(1))

    @classmethod
    def from_density(cls, m: int, cutoff: int, rho: np.ndarray, tol: float = 1e-13) -> "FockState":
        rho = 0.5 * (rho + rho.conj().T)
        vals, vecs = np.linalg.eigh(rho)
        if vals.min() < -1e-9:
            raise NotAState(f"density matrix has eigenvalue {vals.min():.3e}")
        keep = vals > tol
        w = vals[keep] / vals[keep].sum()
        return cls(m, cutoff, vecs[:, keep].T, w)


def basis_index(nvec: Sequence[int], cutoff: int) -> int:
    idx = 0
    for k in nvec:
        if not 0 <= k <= cutoff:
            raise ValueError("occupation outside the cutoff")
        idx = idx * (cutoff + 1) + int(k)
    return idx


def fock_basis_state(nvec: Sequence[int], cutoff: int) -> FockState:
    m = len(nvec)
    ket = np.zeros((cutoff + 1) ** m, dtype=complex)
    ket[basis_index(nvec, cutoff)] = 1
    return FockState.from_ket(m, cutoff, ket)


def mixture(states: Sequence[FockState], probs: Sequence[float]) -> FockState:
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1) > NORM_TOL:
        raise ValueError("mixture probabilities must be a distribution")
    m, cutoff = states[0].m, states[0].cutoff
    if any(s.m != m or s.cutoff != cutoff for s in states):
        raise ValueError("mixture components must share (m, cutoff)")
    kets = np.vstack([s.kets for s, p in zip(states, probs) if p > 0])
    w = np.concatenate([p * s.weights for s, p in zip(states, probs) if p > 0])
    return FockState(m, cutoff, kets, w / w.sum())


def thermal_state(m: int, nbar, cutoff: int) -> FockState:
    """Product thermal state, renormalized inside the cutoff."""
    nb = np.broadcast_to(np.asarray(nbar, dtype=float), (m,))
    ops = fock_operators(m, cutoff)
    p = np.ones(ops.dim)
    for j in range(m):
        k = ops.occupations[:, j]
        p *= (nb[j] / (1 + nb[j])) ** k / (1 + nb[j]) if nb[j] > 0 else (k == 0)
    keep = p > 1e-300
    kets = np.eye(ops.dim, dtype=complex)[keep]
    return FockState(m, cutoff, kets, p[keep] / p[keep].sum())


def random_pure_state(m: int, cutoff: int, max_total: int, seed, support=None) -> FockState:
    """Haar-like random ket on basis states with total photons <= max_total."""
    rng = np.random.default_rng(seed)
    ops = fock_operators(m, cutoff)
    mask = ops.total <= max_total if support is None else support
    ket = np.zeros(ops.dim, dtype=complex)
    ket[mask] = rng.normal(size=mask.sum()) + 1j * rng.normal(size=mask.sum())
    return FockState.from_ket(m, cutoff, ket, normalize=True)


# ---------------------------------------------------------------- unitaries


def _apply_single_mode(kets: np.ndarray, m: int, L: int, mode: int, U: np.ndarray) -> np.ndarray:
    t = kets.reshape((kets.shape[0],) + (L,) * m)
    t = np.moveaxis(np.tensordot(U, t, axes=([1], [mode + 1])), 0, mode + 1)
    return t.reshape(kets.shape[0], -1)


@lru_cache(maxsize=256)
def _big_ladder(size: int):
    a = np.diag(np.sqrt(np.arange(1, size)), 1).astype(complex)
    return a, a.conj().T


def displacement_matrix(alpha: complex, cutoff: int, work: int = 200) -> np.ndarray:
    """D(alpha) with D^dag a D = a + alpha, built in a larger space and truncated."""
    a, ad = _big_ladder(max(work, 4 * cutoff))
    D = scipy.linalg.expm(alpha * ad - np.conj(alpha) * a)
    return D[: cutoff + 1, : cutoff + 1]


def squeeze_matrix(s: float, cutoff: int, work: int = 200) -> np.ndarray:
    """Squeezer whose Heisenberg action is q -> s q, p -> p / s."""
    a, ad = _big_ladder(max(work, 4 * cutoff))
    r = np.log(s)
    Sq = scipy.linalg.expm(0.5 * r * (ad @ ad - a @ a))
    return Sq[: cutoff + 1, : cutoff + 1]


def _passive_generator(u: np.ndarray, m: int, cutoff: int) -> sp.csr_matrix:
    h = 1j * scipy.linalg.logm(u)
    h = 0.5 * (h + h.conj().T)
    ops = fock_operators(m, cutoff)
    G = sp.csr_matrix((ops.dim, ops.dim), dtype=complex)
    for j in range(m):
        for k in range(m):
            if abs(h[j, k]) > 1e-14:
                G = G + h[j, k] * (ops.adag[j] @ ops.a[k])
    return G.tocsr()


def apply_passive(state: FockState, u: np.ndarray) -> FockState:
    """Apply the passive unitary with U^dag a U = u a to every ket."""
    u = np.asarray(u, dtype=complex)
    if np.allclose(u, np.eye(state.m)):
        return state
    G = _passive_generator(u, state.m, state.cutoff)
    kets = expm_multiply(-1j * G, state.kets.T).T
    return FockState(state.m, state.cutoff, kets / np.linalg.norm(kets, axis=1)[:, None], state.weights)


def apply_gaussian_unitary(state: FockState, t: SymplecticTransform) -> FockState:
    """Apply U with U^dag r U = S r + x: Oprime first, then D, then O, then D(x)."""
    out = apply_passive(state, passive_to_unitary(t.Oprime))
    kets = out.kets
    L = state.cutoff + 1
    for j, s in enumerate(t.squeezing):
        if abs(s - 1) > 1e-15:
            kets = _apply_single_mode(kets, state.m, L, j, squeeze_matrix(s, state.cutoff))
    out = FockState(state.m, state.cutoff, kets / np.linalg.norm(kets, axis=1)[:, None], state.weights)
    out = apply_passive(out, passive_to_unitary(t.O))
    kets = out.kets
    for j in range(state.m):
        alpha = t.x[2 * j] + 1j * t.x[2 * j + 1]
        if alpha:
            kets = _apply_single_mode(kets, state.m, L, j, displacement_matrix(alpha, state.cutoff))
    return FockState(state.m, state.cutoff, kets / np.linalg.norm(kets, axis=1)[:, None], state.weights)


def gaussian_state_fock(network: NetworkSpec, cutoff: int) -> FockState:
    """Truncated Fock image of a Gaussian target (renormalized)."""
    vac = fock_basis_state([0] * network.m, cutoff)
    out = apply_gaussian_unitary(vac, network.transform)
    if out.leakage() > 1e-8:
        warnings.warn(f"top-level population {out.leakage():.2e} exceeds 1e-8", TruncationWarning)
    return out


def prepare_lo_target(network: NetworkSpec, cutoff: int) -> FockState:
    """U|nvec> via the mapped creation polynomial prod_j (sum_k u_kj a_k^dag)^n_j / sqrt(n_j!)."""
    if not network.transform.is_passive:
        raise ValueError("linear-optical targets need a passive network")
    if cutoff < network.n:
        raise ValueError(f"cutoff {cutoff} below total photon number {network.n}")
    u = passive_to_unitary(network.transform.O)
    ops = fock_operators(network.m, cutoff)
    psi = np.zeros(ops.dim, dtype=complex)
    psi[0] = 1.0
    for j, nj in enumerate(network.nvec):
        if nj == 0:
            continue
        bj = sum(u[k, j] * ops.adag[k] for k in range(network.m) if abs(u[k, j]) > 1e-15)
        for _ in range(nj):
            psi = bj @ psi
        psi = psi / math.sqrt(math.factorial(nj))
    return FockState.from_ket(network.m, cutoff, psi)


# ---------------------------------------------------------------- oracles


def fidelity_oracle_fock(target: FockState, prep: FockState) -> float:
    if not target.is_pure:
        raise ValueError("target must be pure")
    if (target.m, target.cutoff) != (prep.m, prep.cutoff):
        raise ValueError("cutoff or mode-count mismatch between target and preparation")
    amp = prep.kets.conj() @ target.ket
    return float(prep.weights @ np.abs(amp) ** 2)


def expectation(state: FockState, A) -> complex:
    Av = (A @ state.kets.T).T
    return complex(np.einsum("k,ki,ki->", state.weights, state.kets.conj(), Av))


def trace_distance(a: FockState, b: FockState) -> float:
    return float(0.5 * np.abs(np.linalg.eigvalsh(a.density() - b.density())).sum())


def back_transform(state: FockState, network: NetworkSpec) -> FockState:
    """rho -> U^dag rho U for a passive target network."""
    return apply_passive(state, passive_to_unitary(network.transform.O).conj().T)


def _binom_weights(occ: np.ndarray, nvec) -> np.ndarray:
    """prod_j C(k_j, n_j) = prod_j p_{n_j-1}(k_j) / n_j! on basis occupations."""
    w = np.ones(occ.shape[0])
    for j, nj in enumerate(nvec):
        if nj:
            w *= np.array([math.comb(int(k), nj) for k in occ[:, j]], dtype=float)
    return w


@dataclass(frozen=True)
class WitnessValues:
    """Expectations of the witness pieces on the back-transformed state.

    N = (n - n_target) prod_j C(n_j, n_target_j) and T = <prod_j C(...)>.
    The literal bound is 1 - N; the corrected bound is T - N.
    """

    N: float
    T: float

    @property
    def literal(self) -> float:
        return 1.0 - self.N

    @property
    def corrected(self) -> float:
        return self.T - self.N


def witness_direct(prep: FockState, network: NetworkSpec) -> WitnessValues:
    """Direct operator path: undo the network and read photon statistics."""
    if prep.max_total_photons() > prep.cutoff:
        raise ValueError("preparation support exceeds the cutoff for an exact passive back-transform")
    back = back_transform(prep, network)
    ops = fock_operators(prep.m, prep.cutoff)
    pop = back.populations()
    b = _binom_weights(ops.occupations, network.nvec)
    return WitnessValues(float(pop @ ((ops.total - network.n) * b)), float(pop @ b))


# ---------------------------------------------------------------- moments


class MomentEvaluator:
    """Exact key moments of a Fock state.

    Keys are sorted tuples of index tuples: (k, l) for (r_k r_l + r_l r_k)/2 and
    (k,) for r_k; factors are averaged over all their orderings.  The state is
    embedded at a padded cutoff so no intermediate vector is truncated.
    """

    def __init__(self, state: FockState, max_order: int):
        pad = 2 * max(1, max_order - 1)
        self.state = state.with_cutoff(state.cutoff + pad)
        self.ops = fock_operators(state.m, self.state.cutoff)
        self.max_order = max_order
        self._mats: dict = {}

    def _mat(self, f):
        if f not in self._mats:
            self._mats[f] = self.ops.factor(f)
        return self._mats[f]

    def evaluate(self, keys) -> dict:
        keys = [tuple(k) for k in keys]
        if any(len(k) > self.max_order for k in keys):
            raise ValueError("key order exceeds the evaluator's padding")
        out = {k: 0.0 for k in keys}
        for w, psi in zip(self.state.weights, self.state.kets):
            memo: dict = {(): psi}

            def chain(fs):
                if fs not in memo:
                    memo[fs] = self._mat(fs[0]) @ chain(fs[1:])
                return memo[fs]

            for key in keys:
                if not key:
                    out[key] += w
                    continue
                orders = set(permutations(key))
                acc = 0.0
                for o in orders:
                    bra = chain(o[:1])
                    ket = chain(o[1:]) if len(o) > 1 else psi
                    acc += np.vdot(bra, ket)
                out[key] += w * (acc / len(orders)).real
        return out


def moment_tensor_exact(state: FockState, key) -> float:
    key = tuple(tuple(p) for p in key)
    m2 = 2 * state.m
    if any(not 0 <= i < m2 for p in key for i in p):
        raise IndexError("quadrature index out of range")
    canon = tuple(sorted(tuple(sorted(p)) for p in key))
    return MomentEvaluator(state, max(1, len(canon))).evaluate([canon])[canon]


# ---------------------------------------------------------------- nullifiers


def pochhammer(n_op, t: int):
    """p_t(n) = n (n - 1) ... (n - t); p_{-1} = identity."""
    I = sp.identity(n_op.shape[0], format="csr", dtype=n_op.dtype)
    out = I
    for s in range(t + 1):
        out = out @ (n_op - s * I)
    return out.tocsr()


def back_transformed_quadratures(network: NetworkSpec, cutoff: int):
    """Operators r_tilde = S^{-1} (r - x) as sparse matrices."""
    ops = fock_operators(network.m, cutoff)
    t = network.transform
    Sinv = symplectic_inverse(t.S)
    I = sp.identity(ops.dim, format="csr")
    rt = []
    for k in range(2 * network.m):
        acc = sp.csr_matrix((ops.dim, ops.dim), dtype=complex)
        for l in range(2 * network.m):
            if abs(Sinv[k, l]) > 1e-12:
                acc = acc + Sinv[k, l] * (ops.r[l] - t.x[l] * I)
        rt.append(acc.tocsr())
    return rt


def _nullifier_parts(network: NetworkSpec, cutoff: int):
    rt = back_transformed_quadratures(network, cutoff)
    I = sp.identity(rt[0].shape[0], format="csr")
    nt = [(rt[2 * j] @ rt[2 * j] + rt[2 * j + 1] @ rt[2 * j + 1] - 0.5 * I).tocsr() for j in range(network.m)]
    prod_ = I
    for j, nj in enumerate(network.nvec):
        if nj:
            prod_ = prod_ @ pochhammer(nt[j], nj - 1)
    return nt, prod_.tocsr(), I


def nullifier_operator(network: NetworkSpec, j: int, cutoff: int) -> sp.csr_matrix:
    """N_j = (n~_j - n_j) prod_k p_{n_k - 1}(n~_k) built from back-transformed quadratures."""
    if cutoff < network.n + 2:
        raise ValueError("cutoff too small for the nullifier degree")
    nt, prod_, I = _nullifier_parts(network, cutoff)
    return ((nt[j] - network.nvec[j] * I) @ prod_).tocsr()


def all_nullifiers(network: NetworkSpec, cutoff: int) -> list:
    nt, prod_, I = _nullifier_parts(network, cutoff)
    return [((nt[j] - network.nvec[j] * I) @ prod_).tocsr() for j in range(network.m)]


def safe_subspace(m: int, cutoff: int, degree: int) -> np.ndarray:
    """Basis indices with total photons <= cutoff - degree."""
    ops = fock_operators(m, cutoff)
    return np.flatnonzero(ops.total <= cutoff - degree)


def commutator_norm(A, B, idx: np.ndarray) -> float:
    C = (A @ B - B @ A).tocsr()[idx][:, idx]
    return float(np.max(np.abs(C.toarray()))) if C.nnz else 0.0


def pochhammer_check(n_j: int, t: int, cutoff: int) -> float:
    """Max deviation of a^dag^n n a^n = p_n(n), a^dag^n a^n = p_{n-1}(n) and the
    recursion p_t(n) = p_{t-1}(n)(n - t) on levels <= cutoff - max(n_j, t) - 1."""
    if n_j + t + 1 > cutoff:
        raise ValueError("need n_j + t + 1 <= cutoff")
    a = _single_a(cutoff).astype(float)
    ad = a.T.tocsr()
    n_op = (ad @ a).tocsr()
    I = sp.identity(cutoff + 1, format="csr")
    an = I
    for _ in range(n_j):
        an = an @ a
    lhs_a = an.T @ n_op @ an
    lhs_b = an.T @ an
    devs = [lhs_a - pochhammer(n_op, n_j), lhs_b - pochhammer(n_op, n_j - 1)]
    devs.append(pochhammer(n_op, t) - pochhammer(n_op, t - 1) @ (n_op - t * I))
    keep = np.arange(cutoff - max(n_j, t))
    return float(max(np.max(np.abs(d.toarray()[np.ix_(keep, keep)])) if d.nnz else 0.0 for d in devs))


# ---------------------------------------------------------------- post-selection


def _ancilla_vector(phi, cutoff: int) -> np.ndarray:
    if isinstance(phi, (int, np.integer)):
        v = np.zeros(cutoff + 1, dtype=complex)
        v[int(phi)] = 1
        return v
    v = np.asarray(phi, dtype=complex)
    if v.ndim != 1 or v.size > cutoff + 1:
        raise ValueError("ancilla state must be a Fock index or an amplitude vector within the cutoff")
    out = np.zeros(cutoff + 1, dtype=complex)
    out[: v.size] = v
    nrm = np.linalg.norm(out)
    if nrm < 1e-12:
        raise ValueError("ancilla state has zero norm")
    return out / nrm


def post_select(state: FockState, ancilla_modes: Sequence[int], phi: Sequence) -> tuple[FockState, float]:
    """Project the ancillas onto |phi>, returning the normalized system state and P."""
    anc = list(ancilla_modes)
    if not anc or len(anc) >= state.m or len(set(anc)) != len(anc):
        raise ValueError("ancilla set must be a nonempty proper subset of the modes")
    if len(phi) != len(anc):
        raise ValueError("one ancilla state per ancilla mode")
    L = state.cutoff + 1
    sys_modes = [j for j in range(state.m) if j not in anc]
    t = state.kets.reshape((-1,) + (L,) * state.m)
    for mode, ph in sorted(zip(anc, phi), key=lambda z: -z[0]):
        v = _ancilla_vector(ph, state.cutoff)
        t = np.tensordot(t, v.conj(), axes=([mode + 1], [0]))
    flat = t.reshape(t.shape[0], -1)
    norms2 = np.einsum("ki,ki->k", flat.conj(), flat).real
    P = float(state.weights @ norms2)
    if P <= PROB_FLOOR:
        raise ValueError(f"post-selection probability {P:.3e} is zero; only the non-trivial case P > 0 is defined")
    keep = norms2 > 1e-300
    w = state.weights[keep] * norms2[keep] / P
    kets = flat[keep] / np.sqrt(norms2[keep])[:, None]
    return FockState(len(sys_modes), state.cutoff, kets, w / w.sum()), P


def tensor_with_ancillas(system: FockState, ancilla_modes: Sequence[int], phi: Sequence) -> FockState:
    """Embed rho_S (x) |phi><phi|_A with ancillas at the given mode positions."""
    m = system.m + len(ancilla_modes)
    L = system.cutoff + 1
    t = system.kets.reshape((-1,) + (L,) * system.m)
    for mode, ph in sorted(zip(ancilla_modes, phi)):
        v = _ancilla_vector(ph, system.cutoff)
        t = np.moveaxis(np.multiply.outer(t, v), -1, mode + 1)
    return FockState(m, system.cutoff, t.reshape(t.shape[0], -1), system.weights)


# ---------------------------------------------------------------- photon mismatch


@dataclass(frozen=True)
class PhotonMismatch:
    """n_perp with the fidelity it was derived from; value is None when F = 1."""

    value: float | None
    fidelity: float
    is_state: bool


def photon_mismatch(target: FockState, prep: FockState, network: NetworkSpec, strict: bool = True) -> PhotonMismatch:
    """Witness expectation on rho_perp = (rho_p - F rho_t) / (1 - F).

    By linearity this equals <N>_{rho_p} / (1 - F).  rho_perp fails to be
    positive when the preparation holds coherences with the target; strict mode
    raises NotAState in that case, otherwise the flag is reported.
    """
    F = fidelity_oracle_fock(target, prep)
    if 1 - F < 1e-12:
        return PhotonMismatch(None, F, True)
    rho_perp = (prep.density() - F * np.outer(target.ket, target.ket.conj())) / (1 - F)
    mineig = float(np.linalg.eigvalsh(0.5 * (rho_perp + rho_perp.conj().T)).min())
    is_state = mineig >= -1e-9
    if strict and not is_state:
        raise NotAState(f"rho_p - F rho_t has eigenvalue {mineig * (1 - F):.3e} < -1e-9")
    w = witness_direct(prep, network)
    return PhotonMismatch(w.N / (1 - F), F, is_state)


def photon_mismatch_postselected(target_joint: FockState, system_prep: FockState, network: NetworkSpec,
                                 ancilla_modes, phi, P: float) -> float:
    """Post-selected mismatch: the system witness evaluated on the system remainder.

    The system witness is N_S = (P - 1 + <phi|N|phi>) / P; on rho_S,perp it reads
    (P - 1 + <N>_{rho_perp (x) phi}) / P.
    """
    rho_s_t, _ = post_select(target_joint, ancilla_modes, phi)
    F = fidelity_oracle_fock(rho_s_t, system_prep)
    if 1 - F < 1e-12:
        raise ValueError("F_S = 1: the mismatch is not defined")
    joint = tensor_with_ancillas(system_prep, ancilla_modes, phi)
    joint_t = tensor_with_ancillas(rho_s_t, ancilla_modes, phi)
    N_p = witness_direct(joint, network).N
    N_t = witness_direct(joint_t, network).N
    return (P - 1 + (N_p - F * N_t) / (1 - F)) / P


# ---------------------------------------------------------------- sampling


def hermite_functions(nmax: int, x: np.ndarray) -> np.ndarray:
    """psi_n(x) for n = 0..nmax in the vacuum-variance-1/4 convention."""
    xi = np.sqrt(2.0) * x
    out = np.empty((nmax + 1,) + x.shape)
    out[0] = np.pi**-0.25 * np.exp(-0.5 * xi**2)
    if nmax >= 1:
        out[1] = np.sqrt(2.0) * xi * out[0]
    for n in range(1, nmax):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * xi * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out * 2**0.25


@lru_cache(maxsize=16)
def _cdf_tables(cutoff: int, points: int):
    half = 8 * 0.5 * np.sqrt(2 * cutoff + 1)  # 8 natural widths of the widest level
    grid = np.linspace(-half, half, points)
    psi = hermite_functions(cutoff, grid)
    prod_ = psi[:, None, :] * psi[None, :, :]
    dx = grid[1] - grid[0]
    K = np.concatenate([np.zeros((cutoff + 1, cutoff + 1, 1)), np.cumsum(0.5 * dx * (prod_[..., 1:] + prod_[..., :-1]), axis=-1)], axis=-1)
    return grid, np.ascontiguousarray(np.moveaxis(K, -1, 0)), psi


def _tables_checked(cutoff: int):
    points = 4096
    while True:
        grid, K, psi = _cdf_tables(cutoff, points)
        deficit = float(np.max(np.abs(K[-1] - np.eye(cutoff + 1))))
        if deficit <= 1e-6:
            return grid, K
        if points >= 1 << 16:
            raise GridMassDeficit(f"grid mass deficit {deficit:.2e} after refinement to {points} points")
        points *= 2


def _sample_mode(coeffs: np.ndarray, grid, K, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw for the leading axis of per-sample coefficient arrays."""
    S, L = coeffs.shape[0], coeffs.shape[1]
    c = coeffs.reshape(S, L, -1)
    M = np.einsum("snr,skr->snk", c, c.conj()).real  # imaginary part cancels against symmetric K
    norm = np.einsum("snk,nk->s", M, K[-1])
    target = u * norm
    lo = np.zeros(S, dtype=int)
    hi = np.full(S, K.shape[0] - 1)
    Mf = M.reshape(S, -1)
    Kf = K.reshape(K.shape[0], -1)
    while np.any(hi - lo > 1):
        mid = (lo + hi) // 2
        val = np.einsum("sx,sx->s", Mf, Kf[mid])
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    c_lo = np.einsum("sx,sx->s", Mf, Kf[lo])
    c_hi = np.einsum("sx,sx->s", Mf, Kf[hi])
    frac = np.clip((target - c_lo) / np.where(c_hi > c_lo, c_hi - c_lo, 1.0), 0, 1)
    return grid[lo] + frac * (grid[hi] - grid[lo])


def sample_homodyne_fock(state: FockState, setting, count: int, seed, chunk: int = 1 << 14) -> np.ndarray:
    """Joint rotated-quadrature outcomes by sequential conditional sampling.

    setting: per-mode angle indices into the homodyne alphabet or floats (radians).
    """
    if state.m > 4:
        raise ValueError("desk-scale guard: m <= 4")
    if len(setting) != state.m:
        raise ValueError("one angle per mode")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    m, L = state.m, state.cutoff + 1
    grid, K = _tables_checked(state.cutoff)
    thetas = [ANGLES[a] if isinstance(a, (int, np.integer)) else float(a) for a in setting]
    phases = [np.exp(-1j * th * np.arange(L)) for th in thetas]
    comp = rng.choice(len(state.weights), size=count, p=state.weights)
    u = rng.random((count, m))
    out = np.empty((count, m))
    base = state.kets.reshape((-1,) + (L,) * m)
    chunk = max(64, min(chunk, (1 << 23) // L**m))
    for start in range(0, count, chunk):
        sl = slice(start, min(count, start + chunk))
        coeffs = base[comp[sl]]
        for j in range(m):
            coeffs = coeffs * phases[j].reshape((1, L) + (1,) * (m - j - 1))
            x = _sample_mode(coeffs, grid, K, u[sl, j])
            out[sl, j] = x
            if j < m - 1:
                psi = hermite_functions(state.cutoff, x)  # (L, S)
                coeffs = np.einsum("ns,sn...->s...", psi, coeffs)
                nrm = np.sqrt(np.sum(np.abs(coeffs.reshape(coeffs.shape[0], -1)) ** 2, axis=1))
                coeffs = coeffs / nrm.reshape((-1,) + (1,) * (coeffs.ndim - 1))
    return out


def weyl_moment_fock(state: FockState, monos) -> dict:
    """Exact <prod_mode W(q^a p^b)> for Weyl monomials ((mode, a, b), ...).

    Each W is expanded into rotated-quadrature powers, so the same angle
    weights that drive the homodyne estimator drive this exact evaluation.
    """
    from .weyl import weyl_angle_weights

    monos = [tuple(m) for m in monos]
    deg = max((a + b for mono in monos for _, a, b in mono), default=0)
    padded = state.with_cutoff(state.cutoff + deg)
    ops = fock_operators(state.m, padded.cutoff)
    rot: dict = {}

    def xmat(mode, ai):
        if (mode, ai) not in rot:
            th = ANGLES[ai]
            rot[(mode, ai)] = (np.cos(th) * ops.r[2 * mode] + np.sin(th) * ops.r[2 * mode + 1]).tocsr()
        return rot[(mode, ai)]

    out = {}
    for mono in monos:
        combos = [([], 1.0)]
        for mode, a, b in mono:
            combos = [(lst + [(mode, ai, a + b)], c * w) for lst, c in combos for ai, w in weyl_angle_weights(a, b)]
        val = 0.0
        for lst, c in combos:
            v = padded.kets.T
            for mode, ai, k in lst:
                for _ in range(k):
                    v = xmat(mode, ai) @ v
            val += c * float(np.einsum("k,ik,ik->", padded.weights, padded.kets.T.conj(), v).real)
        out[mono] = val
    return out


def single_mode_weyl_expectation(phi: np.ndarray, a: int, b: int) -> float:
    """<phi| W(q^a p^b) |phi> for a normalizable single-mode amplitude vector."""
    st = FockState.from_ket(1, len(phi) - 1, np.asarray(phi, dtype=complex), normalize=True)
    return weyl_moment_fock(st, [((0, a, b),)])[((0, a, b),)]
