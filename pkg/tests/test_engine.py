import numpy as np
import pytest
import scipy.linalg

from conftest import driven_trio, random_complex
from mesocavity import engine
from mesocavity.engine import (
    SPIN_TRACE,
    TruncationAbort,
    evolve,
    fock_occupation_check,
    init_state,
    load_checkpoint,
    renormalize_reduced,
    save_checkpoint,
    step,
    to_density_matrix,
    trace,
)
from mesocavity.exact import evolve_exact, exact_photon_moments, exact_spin_observables, product_state
from mesocavity.model import CavitySpec, DriveSchedule, EnsembleSpec, SpinSpec, homogeneous, mhz
from mesocavity.superop import EXCITED, GROUND_STATE, assemble_pair, embed_pair, vectorize
from mesocavity.trotter import PropagatorCache, trotter_sequence


def run_steps(spec, n_steps, dt, state=None, **kw):
    cache = PropagatorCache(spec)
    state = state or init_state(spec, **kw)
    reports = []
    for _ in range(n_steps):
        state, rep = step(state, cache, dt)
        reports.append(rep)
    return state, reports


def test_initial_product_state(trio):
    mixed = np.diag([0.3, 0.7]).astype(complex)
    state = init_state(trio, spin_states=[EXCITED, mixed, GROUND_STATE])
    assert [iso.dim for iso in state.left_stack] == [1, 1]
    assert state.coeff.shape == (1, 4, 1, 16)
    assert trace(state) == pytest.approx(1.0)
    expected = product_state(trio, [EXCITED, mixed, GROUND_STATE]).density_matrix()
    assert np.max(np.abs(to_density_matrix(state) - expected)) <= 1e-15
    with pytest.raises(ValueError):
        init_state(trio, spin_states=[EXCITED])
    with pytest.raises(ValueError):
        init_state(trio, factorization="qr")


def test_eckart_young(rng):
    m = random_complex(rng, 12, 30)
    for keep in (1, 4, 11):
        t = renormalize_reduced(m, keep)
        resid = m - t.isometry @ t.coeff
        s = np.linalg.svd(m, compute_uv=False)
        assert np.linalg.norm(resid) ** 2 / np.linalg.norm(m) ** 2 == pytest.approx(t.discarded_weight, rel=1e-10)
        assert t.discarded_weight == pytest.approx(np.sum(s[keep:] ** 2) / np.sum(s**2), rel=1e-10)
        assert np.allclose(t.isometry.conj().T @ t.isometry, np.eye(keep), atol=1e-13)


def test_rank_threshold_ignores_numerical_zeros(rng):
    m = random_complex(rng, 10, 3) @ random_complex(rng, 3, 20)
    for fac in ("svd", "gram"):
        t = renormalize_reduced(m, 50, factorization=fac)
        assert t.isometry.shape[1] == 3
        assert t.discarded_weight == 0.0
        assert np.max(np.abs(t.isometry @ t.coeff - m)) <= 1e-10 * np.abs(m).max()
    with pytest.raises(ValueError):
        renormalize_reduced(m, 5, factorization="lu")


def test_gram_matches_svd_subspace(rng):
    m = random_complex(rng, 40, 9) @ np.diag(2.0 ** -np.arange(9)) @ random_complex(rng, 9, 15)
    a = renormalize_reduced(m, 5)
    b = renormalize_reduced(m, 5, factorization="gram")
    pa, pb = a.isometry @ a.isometry.conj().T, b.isometry @ b.isometry.conj().T
    assert np.max(np.abs(pa - pb)) <= 1e-8
    assert a.discarded_weight == pytest.approx(b.discarded_weight, rel=1e-8)


def test_weight_tolerance_drops_small_tail():
    s = np.array([1.0, 0.1, 1e-3, 1e-5, 1e-7])
    m = np.diag(s).astype(complex)
    t = renormalize_reduced(m, 10, weight_tol=1e-8)
    assert t.isometry.shape[1] == 3
    assert t.discarded_weight <= 1e-8
    assert t.discarded_weight == pytest.approx((1e-10 + 1e-14) / np.sum(s**2))


def trotter_reference(spec, n_steps, dt):
    n, nc = spec.n_spins, spec.fock_dim
    u = np.eye((2**n * nc) ** 2, dtype=complex)
    for k, prop in trotter_sequence(spec, dt, True):
        gen = embed_pair(assemble_pair(spec, k), k, n, nc).toarray()
        u = scipy.linalg.expm(gen * prop.step) @ u
    v = product_state(spec).superket
    for _ in range(n_steps):
        v = u @ v
    return v


@pytest.mark.parametrize("n_spins", [2, 3])
def test_untruncated_sweeps_reproduce_splitting(n_spins):
    base = driven_trio(fock_dim=3)
    spec = EnsembleSpec(base.spins[:n_spins], base.cavity, base.drive)
    state, reports = run_steps(spec, 5, 40e-9, d_max=10_000)
    assert all(r.discarded_weight == 0.0 for r in reports)
    rho = to_density_matrix(state)
    ref = trotter_reference(spec, 5, 40e-9)
    assert np.max(np.abs(vectorize(rho) - ref)) <= 1e-12


def test_full_rank_is_4_to_the_block_size():
    spec = driven_trio(fock_dim=3)
    state, _ = run_steps(spec, 20, 40e-9, d_max=10_000)
    # left block of two spins: rank is capped by 4**2 and by the rest (4 * 9)
    assert state.left_stack[0].dim <= 4
    assert state.left_stack[1].dim <= 16


def test_engine_matches_oracle(trio):
    # Trotter error in J is ~2.5e-5 at dt = 5 ns and falls as dt**2
    dt = 0.625e-9
    records, _ = evolve(trio, 1e-6, dt, d_max=10_000, record_every=160)
    exact = evolve_exact(trio, None, 1e-6, 100e-9, method="expm")
    for rec, ref in zip(records, exact):
        assert rec.time == pytest.approx(ref.time)
        exc, jz, j = exact_spin_observables(ref)
        assert abs(rec.photon_number - exact_photon_moments(ref)[1]) <= 1e-6
        assert abs(rec.jz - jz) <= 1e-6
        assert abs(rec.collective_J - j) <= 1e-6


def test_isometries_are_orthonormal_and_traces_consistent(trio):
    state, _ = run_steps(trio, 10, 20e-9, d_max=6)
    tau = np.ones(1, dtype=complex)
    for iso in state.left_stack:
        u = iso.matrix
        assert np.allclose(u.conj().T @ u, np.eye(iso.dim), atol=1e-12)
        tau = u.T @ np.kron(tau, SPIN_TRACE)
        assert np.allclose(iso.trace, tau, atol=1e-12)
    assert trace(state) == pytest.approx(1.0, abs=1e-14)


def test_truncation_report_and_trace_drift(trio):
    _, reports = run_steps(trio, 30, 20e-9, d_max=3, abort_weight=1.0)
    w = max(r.discarded_weight for r in reports)
    assert w > 0
    assert all(r.max_rank <= 3 for r in reports)
    assert all(len(r.events) == 4 for r in reports)
    assert max(abs(r.trace_error) for r in reports) > 0


def test_identical_spins_stay_symmetric_to_splitting_order():
    spec = homogeneous(4, mhz(0.8), CavitySpec(0.0, mhz(0.3), 3), decay=mhz(0.02),
                       drive=DriveSchedule(mhz(0.3), 0.0, 1.0))
    errs = []
    for dt in (20e-9, 10e-9):
        state, _ = run_steps(spec, int(round(200e-9 / dt)), dt, d_max=10_000)
        rho = to_density_matrix(state).reshape([2] * 4 + [3] + [2] * 4 + [3])
        swapped = rho.transpose(1, 0, 3, 2, 4, 6, 5, 8, 7, 9)
        errs.append(np.max(np.abs(rho - swapped)))
    # spin 0 takes the full step, so exchange symmetry is broken at O(dt**2) only
    assert errs[1] < 0.3 * errs[0]


def test_spin_order_only_changes_trotter_error(trio):
    a, _ = evolve(trio, 0.5e-6, 1.25e-9, d_max=10_000, record_every=400)
    b, _ = evolve(trio.permuted([2, 0, 1]), 0.5e-6, 1.25e-9, d_max=10_000, record_every=400)
    assert abs(a[-1].photon_number - b[-1].photon_number) <= 1e-6
    assert abs(a[-1].jz - b[-1].jz) <= 1e-6


def test_event_renormalization_agrees_at_full_rank(trio):
    a, _ = evolve(trio, 0.2e-6, 20e-9, d_max=10_000)
    b, _ = evolve(trio, 0.2e-6, 20e-9, d_max=10_000, renormalize="event")
    assert abs(a[-1].photon_number - b[-1].photon_number) <= 1e-12
    with pytest.raises(ValueError):
        evolve(trio, 0.2e-6, 20e-9, renormalize="never")


def test_gram_engine_matches_svd(trio):
    a, _ = evolve(trio, 0.4e-6, 20e-9, d_max=8)
    b, _ = evolve(trio, 0.4e-6, 20e-9, d_max=8, factorization="gram")
    for x, y in zip(a, b):
        # the Gram path cannot resolve singular values below GRAM_RTOL * s_max
        assert abs(x.photon_number - y.photon_number) <= 1e-6 * max(1.0, x.photon_number)


def test_pulse_end_inside_step_matches_oracle():
    spec = driven_trio(fock_dim=3, pulse_end=0.33e-6)
    records, _ = evolve(spec, 0.6e-6, 1.25e-9, d_max=10_000, record_every=480)
    ref = evolve_exact(spec, None, 0.6e-6, 0.6e-6, method="expm")[-1]
    assert abs(records[-1].photon_number - exact_photon_moments(ref)[1]) <= 1e-6


def test_abort_on_excess_truncation():
    spins = tuple(SpinSpec(mhz(f), mhz(2.0), mhz(0.05)) for f in (-1.0, 0.2, 1.3))
    spec = EnsembleSpec(spins, CavitySpec(0.0, mhz(0.5), 5), DriveSchedule(mhz(3.0), 0.0, 1.0))
    with pytest.raises(TruncationAbort, match="d_max=1"):
        evolve(spec, 2e-6, 20e-9, d_max=1)


def test_checkpoint_resumes_bit_exactly(trio, tmp_path):
    full, _ = evolve(trio, 0.4e-6, 20e-9, d_max=8, factorization="gram", weight_tol=1e-13)
    _, mid = evolve(trio, 0.2e-6, 20e-9, d_max=8, factorization="gram", weight_tol=1e-13)
    path = tmp_path / "state.npz"
    save_checkpoint(mid, path, {"note": "half way"})
    state, meta = load_checkpoint(path)
    assert meta == {"note": "half way"}
    assert (state.factorization, state.weight_tol, state.d_max) == ("gram", 1e-13, 8)
    rest, _ = evolve(trio, 0.4e-6, 20e-9, state=state)
    assert rest[-1] == full[-1]
    assert [r.photon_number for r in rest] == [r.photon_number for r in full[11:]]


def test_checkpoint_version_is_checked(trio, tmp_path, monkeypatch):
    path = tmp_path / "state.npz"
    save_checkpoint(init_state(trio), path)
    monkeypatch.setattr(engine, "CHECKPOINT_VERSION", 99)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_fock_occupation_check(trio):
    state = init_state(trio)
    assert fock_occupation_check(state) == 0.0
    rho = np.diag([0.5, 0.3, 0.2])
    assert fock_occupation_check(rho, 0.1) == (0.2, False)


def test_sweep_layout_guards(trio):
    state = init_state(trio)
    state.free_site = 0
    with pytest.raises(ValueError):
        engine.left_sweep(state, PropagatorCache(trio), 1e-9)
