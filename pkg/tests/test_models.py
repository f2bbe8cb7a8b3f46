import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import linalg as sparse_linalg

from knr_anneal.fock import coherent_state, expectation
from knr_anneal.models import (
    KnrParams, QubitParams, build_model, effective_plaquette_fields, effective_two_spin_coupling, fixed_resonator,
    metapotential, metapotential_gradient, metapotential_peaks,
)


def test_param_validation():
    with pytest.raises(ValueError):
        KnrParams(K=0)
    with pytest.raises(ValueError):
        KnrParams(delta0=1.0)
    with pytest.raises(ValueError):
        KnrParams(tau=-1)
    with pytest.raises(ValueError):
        KnrParams(Ep=float("nan"))
    with pytest.warns(UserWarning):
        KnrParams(Ep=1.0, E0=1.0)
    with pytest.raises(ValueError):
        build_model("two_spin", KnrParams(Ep=2, delta0=0.1, J12=0.2))
    with pytest.raises(ValueError):
        build_model("no_such_model", KnrParams())


@pytest.mark.parametrize("kind", ["single_spin", "two_spin", "plaquette_pinned",
                                  "qubit_two_spin", "qubit_lhz3"])
def test_hamiltonian_is_hermitian_along_schedule(kind):
    if kind.startswith("qubit"):
        m = build_model(kind, QubitParams(U=0.3, J=0.2, C=0.4))
    else:
        p = KnrParams(Ep=2, E0=0.05, delta0=0.25, J12=0.1, C=0.05)
        m = build_model(kind, p, 8)
    for s in (0.0, 0.37, 1.0):
        h = m.hamiltonian(s * m.tau).to_sparse().toarray()
        np.testing.assert_allclose(h, h.conj().T, atol=1e-12)


def test_matrix_free_apply_matches_sparse():
    m = build_model("two_spin", KnrParams(Ep=2, delta0=0.25, J12=0.1), 9)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(81, 2)) + 1j * rng.normal(size=(81, 2))
    for t in (0.0, 0.4 * m.tau, m.tau):
        np.testing.assert_allclose(m.apply(t, x), m.hamiltonian(t).to_sparse() @ x,
                                   atol=1e-12)
        skip = m.apply(t, x, skip_frame=True) + m.frame_diagonal[:, None] * x
        np.testing.assert_allclose(skip, m.apply(t, x), atol=1e-12)


def test_schedule_rejects_times_outside_anneal():
    m = build_model("single_spin", KnrParams(tau=10))
    with pytest.raises(ValueError):
        m.hamiltonian(10.5)


def test_initial_band_is_vacuum_below_single_photon():
    # -K n(n-1) pushes n >= 2 far down; the relevant pair is |0> and |1> split by delta0
    m = build_model("single_spin", KnrParams(E0=0.2))
    w, v = np.linalg.eigh(m.dense(0.0).matrix)
    assert abs(v[0, -2]) == pytest.approx(1.0)
    assert abs(v[1, -1]) == pytest.approx(1.0)
    assert w[-1] - w[-2] == pytest.approx(0.2)


@given(st.floats(0.5, 6.0))
@settings(max_examples=15, deadline=None)
def test_coherent_states_are_exact_eigenstates_of_kerr_cat(ep):
    p = KnrParams(Ep=ep)
    dim = 40
    m = build_model("single_spin", p, dim)
    h = m.dense(m.tau)
    for sign in (1, -1):
        psi = coherent_state(h.space, [sign * p.alpha0], tail_tol=1e-6)
        e = expectation(psi, h).real
        resid = h.matrix @ psi.data - e * psi.data
        assert np.linalg.norm(resid[: dim - 8]) < 1e-6
        assert e == pytest.approx(ep**2, rel=1e-6)


def test_fixed_resonator_keeps_coherent_state():
    p = KnrParams(Ep=2)
    h = fixed_resonator(p, 30)
    psi = coherent_state(h.space, [p.alpha0])
    resid = h.matrix @ psi.data - p.Ep**2 * psi.data
    assert np.linalg.norm(resid[:22]) < 1e-8


def test_effective_coupling_matches_projection():
    p = KnrParams(Ep=2, delta0=0.25, J12=0.1)
    m = build_model("two_spin", p, 16)
    coup = m.static.to_sparse()
    a0 = p.alpha0
    same = coherent_state(m.space, [a0, a0])
    opp = coherent_state(m.space, [a0, -a0])
    kerr_only = build_model("two_spin", KnrParams(Ep=2, delta0=0.25), 16).static.to_sparse()
    e_same = np.vdot(same.data, (coup - kerr_only) @ same.data).real
    e_opp = np.vdot(opp.data, (coup - kerr_only) @ opp.data).real
    assert e_same == pytest.approx(effective_two_spin_coupling(p), rel=1e-7)
    assert e_opp == pytest.approx(-effective_two_spin_coupling(p), rel=1e-7)


def test_qubit_initial_state_is_ground_of_transverse_field():
    m = build_model("qubit_lhz3", QubitParams(U=0.5, J=0.1, C=0.3))
    w, v = np.linalg.eigh(m.dense(0.0).matrix)
    psi = m.initial_state().data
    assert abs(np.vdot(v[:, 0], psi)) ** 2 == pytest.approx(1.0)
    assert m.fixed_modes == ((3, -1.0),)


@given(st.floats(0.5, 8.0), st.floats(0.1, 3.0))
@settings(max_examples=40)
def test_metapotential_peaks_without_drive(ep, k):
    p = KnrParams(K=k, Ep=ep, delta0=0.05)
    peaks = metapotential_peaks(p)
    a0 = math.sqrt(ep / k)
    assert peaks[0][0] == pytest.approx(-a0, abs=1e-10)
    assert peaks[1][0] == pytest.approx(a0, abs=1e-10)
    assert peaks[0][2] == pytest.approx(peaks[1][2], abs=1e-10)


def test_metapotential_drive_tilts_peaks():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = KnrParams(Ep=4, E0=1.0)
    (xl, _, el), (xr, _, er) = metapotential_peaks(p)
    assert er > el
    for x in (xl, xr):
        np.testing.assert_allclose(metapotential_gradient(x, 0.0, p), 0, atol=1e-10)
    # peak values are local maxima along both axes
    h = 1e-4
    for x, e in ((xl, el), (xr, er)):
        assert metapotential(x + h, 0, p) < e and metapotential(x, h, p) < e


def test_metapotential_gradient_matches_finite_difference():
    p = KnrParams(Ep=3, E0=0.3, delta0=0.1)
    x, y, h = 0.7, -0.4, 1e-6
    g = metapotential_gradient(x, y, p, s=0.6)
    fx = (metapotential(x + h, y, p, s=0.6) - metapotential(x - h, y, p, s=0.6)) / (2 * h)
    fy = (metapotential(x, y + h, p, s=0.6) - metapotential(x, y - h, p, s=0.6)) / (2 * h)
    np.testing.assert_allclose(g, [fx, fy], rtol=1e-7)


def test_two_spin_final_levels_form_two_pairs():
    # top pair and the next pair sit 4 J12 alpha0^2 apart; tunneling splits each pair slightly
    for sign in (1, -1):
        p = KnrParams(Ep=2, delta0=0.25, J12=sign * 0.1)
        m = build_model("two_spin", p, 16)
        w = np.linalg.eigvalsh(m.dense(m.tau).matrix)[-4:]
        assert w[2] - w[1] == pytest.approx(4 * 0.1 * p.alpha0**2, rel=1e-3)
        assert w[3] - w[2] < 1e-3 and w[1] - w[0] < 1e-3


def _coherent_product_energies(model, n_spins, extra=()):
    a0 = model.params.alpha0
    out = {}
    for s in itertools.product((1, -1), repeat=n_spins):
        psi = coherent_state(model.space, [x * a0 for x in s] + list(extra)).data
        out[s] = np.vdot(psi, model.apply(model.tau, psi[:, None])[:, 0]).real
    return out


def test_plaquette_coherent_energies_follow_effective_spin_model():
    p = KnrParams(Ep=2, E0=0.095, delta0=0.45, C=0.05)
    h, c4 = effective_plaquette_fields(p)
    full = _coherent_product_energies(build_model("plaquette", p, 15), 4)
    pinned = _coherent_product_energies(build_model("plaquette_pinned", p, 15), 3)
    ref = full[(1, 1, 1, 1)] - (3 * h - c4)
    for s, e in full.items():
        assert e - ref == pytest.approx(h * sum(s[:3]) - c4 * math.prod(s), abs=1e-6)
    # the pinned model is the s4 = +1 slice up to the fixed resonator's constant energy
    shift = full[(1, 1, 1, 1)] - pinned[(1, 1, 1)]
    for s, e in pinned.items():
        assert e + shift == pytest.approx(full[s + (1,)], abs=1e-6)


def test_both_constraint_signs_select_the_frustrated_triples():
    # -C (resonators) and +C (qubits) as printed; the vacuum starts at the bottom of the
    # resonators' 2^3 top band, so the target is the lowest triple of that band
    from knr_anneal.analysis import readout_for, scenario_for
    from knr_anneal.fock import QuantumState

    knr = build_model("plaquette_pinned", KnrParams(Ep=2, E0=0.095, delta0=0.45, C=0.05), 15)
    qub = build_model("qubit_lhz3", QubitParams(U=0.3, J=0.2, C=0.4))
    w, v = sparse_linalg.eigsh(knr.hamiltonian(knr.tau).to_sparse(), k=8, which="LA")
    knr_levels = v[:, np.argsort(w)]
    w, v = np.linalg.eigh(qub.hamiltonian(qub.tau).to_sparse().toarray())
    for m, levels in ((knr, knr_levels), (qub, v)):
        idx = scenario_for(m).indices()
        ro = readout_for(m)
        share = [ro.populations(QuantumState.pure(m.space, levels[:, j]))[idx].sum()
                 for j in range(4)]
        assert min(share[:3]) > 0.99
        assert share[3] < 0.01
