import numpy as np
import pytest
from hypothesis import given, strategies as st

from photocert import fock as fk
from photocert import gaussian as gs
from photocert.symplectic import NetworkSpec, SymplecticTransform, beam_splitter, haar_passive, passive_to_unitary

from conftest import fixture_networks


def test_basis_state_and_roundtrip():
    s = fk.fock_basis_state([1, 2], 3)
    assert s.populations()[fk.basis_index([1, 2], 3)] == 1
    back = fk.FockState.from_dict(s.to_dict())
    assert np.array_equal(back.kets, s.kets)
    assert s.with_cutoff(5).with_cutoff(3).kets.tolist() == s.kets.tolist()


def test_truncation_refuses_to_drop_population():
    with pytest.raises(ValueError):
        fk.fock_basis_state([3], 4).with_cutoff(2)


def test_mixture_validation():
    a, b = fk.fock_basis_state([0], 2), fk.fock_basis_state([1], 2)
    mix = fk.mixture([a, b], [0.25, 0.75])
    assert np.allclose(mix.populations()[:2], [0.25, 0.75])
    with pytest.raises(ValueError):
        fk.mixture([a, b], [0.5, 0.6])


def test_thermal_populations():
    nb = 0.5
    p = fk.thermal_state(1, nb, 30).populations()
    assert np.allclose(p[:3], [(nb / (1 + nb)) ** k / (1 + nb) for k in range(3)], atol=1e-6)


def test_hong_ou_mandel_dip(bs50):
    psi = fk.prepare_lo_target(NetworkSpec.lo(bs50, (1, 1)), 3)
    assert abs(psi.ket[fk.basis_index([1, 1], 3)]) < 1e-12
    assert psi.populations()[fk.basis_index([2, 0], 3)] == pytest.approx(0.5)


@pytest.mark.parametrize("nvec", [(1, 0, 0), (1, 1, 0), (2, 0, 1)])
def test_lo_target_two_routes(nvec):
    # creation polynomial vs the generator route applied to the input basis state
    O = haar_passive(3, 4).O
    net = NetworkSpec.lo(O, nvec)
    cut = sum(nvec)
    poly = fk.prepare_lo_target(net, cut)
    gen = fk.apply_passive(fk.fock_basis_state(nvec, cut), passive_to_unitary(O))
    assert abs(np.vdot(poly.ket, gen.ket)) == pytest.approx(1.0, abs=1e-10)


def test_gaussian_unitary_matches_covariance():
    net = fixture_networks()["squeezed2"]
    state = fk.gaussian_state_fock(net, 20)
    g = gs.prepare_gaussian_target(net)
    for key in [((0,),), ((1,),), ((0, 0),), ((0, 3),), ((1, 2),)]:
        assert fk.moment_tensor_exact(state, key) == pytest.approx(gs.moment_gaussian(g, key), abs=1e-8)


def test_witness_on_target_is_tight():
    for name in ("bs10", "bs11", "brick110", "fock2"):
        net = fixture_networks()[name]
        w = fk.witness_direct(fk.prepare_lo_target(net, net.n), net)
        assert w.N == pytest.approx(0, abs=1e-10) and w.T == pytest.approx(1)


def test_literal_bound_exceeds_fidelity_on_vacuum():
    # target |1>, preparation |0>: the literal bound reads 1 although F = 0
    net = NetworkSpec.lo(np.eye(2), (1,))
    w = fk.witness_direct(fk.fock_basis_state([0], 2), net)
    assert w.literal == 1.0
    assert w.corrected == 0.0


@given(st.integers(0, 2**31 - 1), st.sampled_from(["bs10", "bs11", "brick110", "fock2"]))
def test_corrected_bound_below_fidelity(seed, name):
    net = fixture_networks()[name]
    cut = net.n + 1
    tgt = fk.prepare_lo_target(net, cut)
    prep = fk.random_pure_state(net.m, cut, cut, seed)
    prep = fk.mixture([prep, tgt], [0.5, 0.5])
    w = fk.witness_direct(prep, net)
    assert w.corrected <= fk.fidelity_oracle_fock(tgt, prep) + 1e-10


def test_witness_needs_support_within_cutoff():
    net = NetworkSpec.lo(beam_splitter(2, 0, 1, 0.4), (1, 0))
    with pytest.raises(ValueError):
        fk.witness_direct(fk.fock_basis_state([2, 1], 2), net)


def test_photon_mismatch_for_mixture_and_coherence():
    net = NetworkSpec.lo(np.eye(2), (0,))
    tgt = fk.fock_basis_state([0], 3)
    mix = fk.mixture([tgt, fk.fock_basis_state([2], 3)], [0.6, 0.4])
    pm = fk.photon_mismatch(tgt, mix, net)
    assert pm.value == pytest.approx(2.0) and pm.fidelity == pytest.approx(0.6)
    sup = fk.FockState.from_ket(1, 3, [1, 1, 0, 0], normalize=True)
    with pytest.raises(fk.NotAState):
        fk.photon_mismatch(tgt, sup, net)
    assert not fk.photon_mismatch(tgt, sup, net, strict=False).is_state


def test_heralded_single_photon(heralded_network):
    joint = fk.prepare_lo_target(heralded_network, 2)
    sys_state, P = fk.post_select(joint, [1], [0])
    assert P == pytest.approx(0.5)
    assert sys_state.populations()[1] == pytest.approx(1.0)
    back = fk.tensor_with_ancillas(sys_state, [1], [0])
    assert back.m == 2 and back.populations()[fk.basis_index([1, 0], 2)] == pytest.approx(1.0)


def test_post_selection_needs_nonzero_probability(heralded_network):
    joint = fk.prepare_lo_target(heralded_network, 2)
    with pytest.raises(ValueError, match="zero"):
        fk.post_select(joint, [1], [2])


def test_postselected_mismatch_for_photon_loss(heralded_network):
    # system target |1>, system preparation mixes in vacuum
    joint = fk.prepare_lo_target(heralded_network, 2)
    prep = fk.mixture([fk.fock_basis_state([1], 2), fk.fock_basis_state([0], 2)], [0.7, 0.3])
    val = fk.photon_mismatch_postselected(joint, prep, heralded_network, [1], [0], 0.5)
    # rho_perp = |0><0|; joint |0,0> has N = (0 - 1) * 0 = 0, so (P - 1 + 0) / P = -1
    assert val == pytest.approx(-1.0)


def test_pochhammer_identities():
    assert fk.pochhammer_check(3, 4, 14) < 1e-9


@pytest.mark.parametrize("name", ["vacuum2", "bs10", "bs11", "fock2", "fock3_bs"])
def test_nullifiers_annihilate_target(name):
    net = fixture_networks()[name]
    cut = net.n + 6
    tgt = fk.prepare_lo_target(net, cut) if net.n else fk.gaussian_state_fock(net, cut)
    for N in fk.all_nullifiers(net, cut):
        assert np.max(np.abs(N @ tgt.ket)) < 1e-10


def test_nullifiers_commute_on_safe_subspace():
    net = fixture_networks()["bs11"]
    cut = 10
    Ns = fk.all_nullifiers(net, cut)
    idx = fk.safe_subspace(net.m, cut, 2 * 2 * (net.n + 1))
    assert fk.commutator_norm(Ns[0], Ns[1], idx) < 1e-9


def test_hermite_functions_orthonormal():
    x = np.linspace(-8, 8, 4001)
    H = fk.hermite_functions(6, x)
    G = np.trapezoid(H[:, None] * H[None], x, axis=-1) if hasattr(np, "trapezoid") else np.trapz(H[:, None] * H[None], x, axis=-1)
    assert np.allclose(G, np.eye(7), atol=1e-8)


def test_homodyne_sampling_single_photon():
    s = fk.fock_basis_state([1], 6)
    x = fk.sample_homodyne_fock(s, (0,), 100_000, 1)
    # <x^2> = 3/4 and <x^4> = 15/16 for |1> with q = (a + a^dag)/2
    assert np.mean(x**2) == pytest.approx(0.75, abs=0.02)
    assert np.mean(x**4) == pytest.approx(15 / 16, abs=0.03)


def test_joint_sampling_against_gaussian_sampler():
    net = NetworkSpec(SymplecticTransform.build(2, O=beam_splitter(2, 0, 1, 0.6), squeezing=[1.2, 1.0]), (0, 0))
    f = fk.sample_homodyne_fock(fk.gaussian_state_fock(net, 14), (0, 0), 100_000, 3)
    g = gs.prepare_gaussian_target(net)
    R = gs.quadrature_rows(2, (0, 0))
    assert np.allclose(np.cov(f.T), R @ g.cov @ R.T, atol=0.01)


def test_weyl_moments_of_coherent_state():
    alpha = 0.4 + 0.3j
    net = NetworkSpec(SymplecticTransform.build(1, x=[alpha.real, alpha.imag]), (0,))
    st_f = fk.gaussian_state_fock(net, 16)
    g = gs.prepare_gaussian_target(net)
    monos = [((0, 2, 0),), ((0, 1, 1),), ((0, 2, 2),), ((0, 0, 3),)]
    vals = fk.weyl_moment_fock(st_f, monos)
    for mono in monos:
        assert vals[mono] == pytest.approx(gs.weyl_moment(g, mono), abs=1e-8)


def test_single_mode_weyl_of_photon():
    # <q^2> = 3/4 on |1>; the symmetrized qp vanishes on any Fock state
    phi = np.array([0, 1, 0, 0], dtype=complex)
    assert fk.single_mode_weyl_expectation(phi, 2, 0) == pytest.approx(0.75)
    assert fk.single_mode_weyl_expectation(phi, 1, 1) == pytest.approx(0.0, abs=1e-12)
