import numpy as np
import pytest
from hypothesis import given, strategies as st

from photocert import estimation as es
from photocert import fock as fk
from photocert import gaussian as gs
from photocert.prover import ProverScenario, respond
from photocert.symplectic import NetworkSpec, SymplecticTransform, beam_splitter

from conftest import fixture_networks, squeezed_network


def test_canonical_key_sorts_both_levels():
    assert es.canonical_key([(3, 1), (0,)]) == ((0,), (1, 3))
    assert es.label_order(((0, 1), (2, 3))) == 2
    assert es.is_weyl_label(("W", ((0, 1, 1),)))


def test_gaussian_form_for_squeezer():
    net = NetworkSpec(SymplecticTransform.build(1, squeezing=[2.0]), (0,))
    f = es.gaussian_form(net)
    assert f.weights[((0, 0),)] == pytest.approx(-0.25)
    assert f.weights[((1, 1),)] == pytest.approx(-4.0)
    assert f.constant == pytest.approx(1.5)


def test_squeezed_preparation_against_vacuum_target():
    # 1 + 1/2 - (1 + 1/16)
    net = NetworkSpec(SymplecticTransform.identity(1), (0,))
    prep = gs.vacuum(1).transformed(np.diag([2.0, 0.5]))
    store = es.exact_store(prep, es.relevant_moments_gaussian(net))
    assert es.recombine_F0(store, net) == pytest.approx(0.4375)
    assert es.recombine_F0(store, net) <= gs.gaussian_fidelity_oracle(net, prep)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1), st.floats(0, 0.5))
def test_gaussian_form_two_routes(m, seed, nb):
    # recombined moments vs the closed-form mean photon number of the pulled-back state
    net = squeezed_network(m, seed)
    prep = gs.noise_channel(gs.prepare_gaussian_target(net), "thermal", nb)
    store = es.exact_store(prep, es.relevant_moments_gaussian(net))
    assert es.recombine_F0(store, net) == pytest.approx(1 - gs.mean_total_photons(prep, net), abs=1e-9)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_relevant_gaussian_moments_within_bound(m, seed):
    net = squeezed_network(m, seed)
    labels = es.relevant_moments_gaussian(net)
    assert len(labels) - 2 * m <= es.second_moment_bound(net)


@pytest.mark.parametrize("name", ["bs10", "bs11", "brick110", "fock2", "fock3_bs"])
@pytest.mark.parametrize("form", ["literal", "corrected"])
def test_lo_form_two_routes(name, form):
    # moment recombination vs direct photon statistics of the undone network
    net = fixture_networks()[name]
    cut = net.n + 1
    prep = fk.mixture([fk.prepare_lo_target(net, cut), fk.random_pure_state(net.m, cut, cut, 7)], [0.6, 0.4])
    store = es.exact_store(prep, es.relevant_moments_lo(net, form))
    w = fk.witness_direct(prep, net)
    expect = w.literal if form == "literal" else w.corrected
    assert es.recombine_Fn(store, net, form) == pytest.approx(expect, abs=1e-8)


def test_identity_lo_counts():
    net = NetworkSpec.lo(np.eye(6), (1, 0, 0))
    assert len(es.relevant_moments_lo(net)) == 17
    assert es.expansion_term_count(net) == 21
    assert es.lemma_count_lo(3, 1, 1) == 35


@pytest.mark.parametrize("m,n,size", [(2, 1, 6), (3, 1, 12), (3, 2, 18), (4, 1, 16), (4, 2, 42), (5, 2, 80), (6, 2, 120)])
def test_lo_plan_sizes(m, n, size):
    from math import comb

    plan = es.settings_lo(m, n)
    assert len(plan) == size
    assert size <= comb(m, n) * 2 ** (n + 1)


def test_gaussian_plan_keeps_m_plus_three():
    assert len(es.settings_gaussian(1)) == 4
    assert len(es.settings_gaussian(5)) == 8


def test_gaussian_plan_covers_gaussian_labels():
    net = squeezed_network(3, 2)
    assert es.settings_gaussian(3).uncovered(es.relevant_moments_gaussian(net)) == []


def test_completion_fills_the_single_gap():
    net = NetworkSpec.lo(np.eye(6), (1, 0, 0))
    labels = es.relevant_moments_lo(net)
    base = es.settings_lo(3, 1)
    gaps = base.uncovered(labels)
    assert len(gaps) == 1
    full = es.complete_plan(base, labels)
    assert len(full) == 13 and full.uncovered(labels) == []


def test_schedule_hides_labels(heralded_network):
    labels = es.relevant_moments_lo(heralded_network)
    plan = es.default_plan(heralded_network, labels)
    sched = es.build_schedule(plan, labels, 3)
    view = sched.prover_view()
    assert all(len(v) == 3 for v in view)
    assert sched.total_copies == 3 * len(sched.requests)
    assert len({r.request_id for r in sched.requests}) == len(sched.requests)


def test_schedule_rejects_zero_counts(heralded_network):
    labels = es.relevant_moments_lo(heralded_network)
    with pytest.raises(ValueError):
        es.build_schedule(es.default_plan(heralded_network, labels), labels, 0)


def test_records_csv_roundtrip():
    rec = es.Records()
    rng = np.random.default_rng(0)
    rec.add(0, (0, 1), rng.normal(size=(5, 2)))
    rec.add(3, (2, 0), rng.normal(size=(4, 2)))
    back = es.Records.from_csv(rec.to_csv())
    assert back.angles == rec.angles
    for k in rec.outcomes:
        assert np.array_equal(back.outcomes[k], rec.outcomes[k])


def test_records_reject_wrong_header():
    with pytest.raises(ValueError):
        es.Records.from_csv("a,b,c\n1,2,3\n")


def test_records_reject_incomplete_table():
    rec = es.Records()
    rec.add(0, (0, 0), np.ones((2, 2)))
    text = "\n".join(rec.to_csv().splitlines()[:-1]) + "\n"
    with pytest.raises(ValueError, match="incomplete"):
        es.Records.from_csv(text)


def test_sampled_estimates_agree_with_exact():
    net = fixture_networks()["squeezed2"]
    labels = es.relevant_moments_gaussian(net)
    plan = es.default_plan(net, labels)
    sched = es.build_schedule(plan, labels, 20_000)
    sc = ProverScenario("gaussian", net)
    store = es.accumulate(respond(sc, sched.prover_view(), 1), sched)
    exact = es.exact_store(gs.prepare_gaussian_target(net), labels)
    for lab in labels:
        assert abs(store[lab].mean - exact[lab].mean) < 5 * store[lab].stderr + 1e-12


def test_missing_moment_raises(heralded_network):
    with pytest.raises(es.MissingMoment):
        es.recombine_Fn(es.MomentEstimateStore(), heralded_network)


def test_heralded_photon_post_selected_bound(heralded_network):
    ps = es.PostSelection((1,), (0,), 0.5)
    sys_state = fk.fock_basis_state([1], 4)
    corrected = es.system_form(heralded_network, ps, "corrected")
    literal = es.system_form(heralded_network, ps, "literal")
    store = es.exact_store(sys_state, corrected.labels + literal.labels)
    assert corrected.evaluate(store.means()) == pytest.approx(1.0, abs=1e-9)
    # the affine form double-counts the failed post-selection branch
    assert literal.evaluate(store.means()) == pytest.approx(2.0, abs=1e-9)


def test_gaussian_envelope_dominates_form():
    for seed in range(10):
        net = squeezed_network(3, seed)
        f = es.gaussian_form(net)
        assert f.l1 <= es.gaussian_envelope(net, 1.0, 1.0)


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.05))
def test_perturbation_stays_inside_envelope(seed, eps):
    net = squeezed_network(2, seed)
    labels = es.relevant_moments_gaussian(net)
    store = es.exact_store(gs.prepare_gaussian_target(net), labels)
    rng = np.random.default_rng(seed)
    delta = {lab: eps * rng.uniform(-1, 1) for lab in labels}
    shift = es.recombine_F0(store.perturbed(delta), net) - es.recombine_F0(store, net)
    assert abs(shift) <= es.gaussian_envelope(net, eps, eps) + 1e-12


@pytest.mark.parametrize("form", ["literal", "corrected"])
def test_lo_envelope_dominates_form(form):
    for name in ("bs10", "bs11", "brick110"):
        net = fixture_networks()[name]
        assert es.lo_envelope(net, 1.0, form) >= es.lo_form(net, form).l1


def test_lo_envelope_frozen_value():
    net = NetworkSpec.lo(beam_splitter(2, 0, 1, np.pi / 4), (1, 0))
    # eps (1 + 5)(1/2 + 2 d sqrt(4))^1 with d = 2
    assert es.lo_envelope(net, 0.1) == pytest.approx(0.1 * 6 * (0.5 + 2 * 2 * 2))
    assert es.lo_envelope(net, 0.1, "corrected") == pytest.approx(0.1 * 7 * 8.5)
    with pytest.raises(ValueError):
        es.lo_envelope(fixture_networks()["fock2"], 0.1)
