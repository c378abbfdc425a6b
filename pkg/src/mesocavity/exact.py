"""Brute-force master-equation oracle on the full joint Liouville space.

Only practical for small ensembles (the superket has ``(2**N * n_c)**2``
entries).  Three steppers are provided: fixed-step classic Runge-Kutta on the
sparse Liouvillian (``rk4``), the same Runge-Kutta scheme applied matrix-free
to the density matrix (``rk4-dm``, for Liouville spaces too large to assemble),
and exact stepping with a dense ``expm(L dt)`` for very small systems.  The
rectangular drive is handled by switching generators exactly at the end of
the pulse.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .model import EnsembleSpec
from .observables import ObservableRecord, cavity_moments_from_dm, gn_from_moments
from .superop import (
    DEFAULT_MAX_DIM,
    EXCITED,
    SIGMA_MINUS,
    SIGMA_PLUS,
    DimensionCapError,
    assemble_full,
    devectorize,
    embed,
    fock_dm,
    hamiltonian,
    jump_operators,
    partial_trace_cavity,
    trace_superket,
    vectorize,
    GROUND_STATE,
)


class DegenerateSteadyState(RuntimeError):
    """Liouvillian null space has more than one dimension; ``states`` holds a basis."""

    def __init__(self, msg, states):
        super().__init__(msg)
        self.states = states


@dataclass(frozen=True)
class ExactState:
    superket: np.ndarray
    time: float
    n_spins: int
    fock_dim: int

    def density_matrix(self) -> np.ndarray:
        return devectorize(self.superket)

    def trace(self) -> complex:
        return complex(trace_superket(2**self.n_spins * self.fock_dim) @ self.superket)

    def reduced_cavity(self) -> np.ndarray:
        return partial_trace_cavity(self.density_matrix(), self.n_spins, self.fock_dim)


def product_state(spec: EnsembleSpec, spin_states=None, cavity_state=None, time: float = 0.0) -> ExactState:
    """Joint-basis superket of a product state (default: ground spins, cavity vacuum)."""
    n, nc = spec.n_spins, spec.fock_dim
    rho = fock_dm(nc, 0) if cavity_state is None else np.asarray(cavity_state, dtype=complex)
    spin_states = [GROUND_STATE] * n if spin_states is None else spin_states
    for r in reversed(list(spin_states)):
        rho = np.kron(r, rho)
    return ExactState(vectorize(rho), time, n, nc)


def _switch_times(spec: EnsembleSpec):
    if spec.drive.amplitude and spec.drive.pulse_end > 0:
        return [spec.drive.pulse_end]
    return []


METHODS = ("rk4", "rk4-dm", "expm")


class _Generators:
    def __init__(self, spec, method, max_dim):
        self.spec = spec
        self.method = method
        self.max_dim = max_dim
        self._lv = {}
        self._prop = {}
        self._ham = {}

    def prepare(self):
        if self.method != "rk4-dm":
            self.liouvillian(False)
            return
        d = self.spec.hilbert_dim()
        if d * d > self.max_dim:
            raise DimensionCapError(f"Liouville dimension {d * d} exceeds cap {self.max_dim}")
        jumps = [(np.sqrt(rate) * op).tocsr() for rate, op in jump_operators(self.spec)]
        loss = sum((j.conj().T @ j for j in jumps), sp.csr_matrix((d, d), dtype=complex))
        self._loss = loss.tocsr()
        self._spin_rates = [(k, s.decay) for k, s in enumerate(self.spec.spins) if s.decay]
        m = np.sqrt(np.arange(1, self.spec.fock_dim, dtype=float))
        self._cavity_weight = self.spec.cavity.decay * np.outer(m, m)

    def effective_hamiltonian(self, drive_on):
        drive_on = bool(drive_on and self.spec.drive.amplitude)
        if drive_on not in self._ham:
            h = hamiltonian(self.spec, drive_on=drive_on) - 0.5j * self._loss
            self._ham[drive_on] = h.tocsr()
        return self._ham[drive_on]

    def rhs_dm(self, rho, drive_on):
        # rho is Hermitian and C-contiguous, so sparse @ dense needs no copies.
        out = -1j * (self.effective_hamiltonian(drive_on) @ rho)
        out += out.conj().T
        # Jump terms L rho L^dag by index slicing: sigma-_k moves |e><e| on site k
        # to |g><g|, a shifts both Fock indices down by one.
        n, nc = self.spec.n_spins, self.spec.fock_dim
        ds = 2**n
        for k, rate in self._spin_rates:
            a, b = 2**k, 2 ** (n - 1 - k) * nc
            r6, o6 = rho.reshape(a, 2, b, a, 2, b), out.reshape(a, 2, b, a, 2, b)
            o6[:, 0, :, :, 0, :] += rate * r6[:, 1, :, :, 1, :]
        if self.spec.cavity.decay and nc > 1:
            r4, o4 = rho.reshape(ds, nc, ds, nc), out.reshape(ds, nc, ds, nc)
            o4[:, :-1, :, :-1] += self._cavity_weight[None, :, None, :] * r4[:, 1:, :, 1:]
        return out

    def liouvillian(self, drive_on):
        drive_on = bool(drive_on and self.spec.drive.amplitude)
        if drive_on not in self._lv:
            self._lv[drive_on] = assemble_full(self.spec, drive_on=drive_on, max_dim=self.max_dim)
        return self._lv[drive_on]

    def advance(self, v, h, drive_on, substeps):
        if self.method == "rk4-dm":
            d = self.spec.hilbert_dim()
            rho = v.reshape(d, d)
            dh = h / substeps
            for _ in range(substeps):
                k1 = self.rhs_dm(rho, drive_on)
                k2 = self.rhs_dm(rho + 0.5 * dh * k1, drive_on)
                k3 = self.rhs_dm(rho + 0.5 * dh * k2, drive_on)
                k4 = self.rhs_dm(rho + dh * k3, drive_on)
                rho = rho + (dh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            return rho.reshape(-1)
        lv = self.liouvillian(drive_on)
        if self.method == "expm":
            key = (bool(drive_on and self.spec.drive.amplitude), h)
            if key not in self._prop:
                self._prop[key] = scipy.linalg.expm(lv.toarray() * h)
            return self._prop[key] @ v
        dh = h / substeps
        for _ in range(substeps):
            k1 = lv @ v
            k2 = lv @ (v + 0.5 * dh * k1)
            k3 = lv @ (v + 0.5 * dh * k2)
            k4 = lv @ (v + dh * k3)
            v = v + (dh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return v


def iter_exact(spec: EnsembleSpec, rho0: ExactState | None, t_end: float, dt: float, *,
               method: str = "rk4", substeps: int = 1, max_dim: int = DEFAULT_MAX_DIM) -> Iterator[ExactState]:
    """Yield the state at every multiple of ``dt`` from ``rho0.time`` up to ``t_end``.

    A grid interval containing the end of the drive pulse is split there.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rho0 = product_state(spec) if rho0 is None else rho0
    gens = _Generators(spec, method, max_dim)
    gens.prepare()
    v = np.asarray(rho0.superket, dtype=complex).copy()
    t0 = rho0.time
    n_steps = int(round((t_end - t0) / dt))
    switches = _switch_times(spec)
    yield ExactState(v.copy(), t0, spec.n_spins, spec.fock_dim)
    for i in range(1, n_steps + 1):
        a, b = t0 + (i - 1) * dt, t0 + i * dt
        pieces = [a] + [s for s in switches if a + 1e-9 * dt < s < b - 1e-9 * dt] + [b]
        for lo, hi in zip(pieces[:-1], pieces[1:]):
            drive_on = spec.drive.is_on(lo + 1e-9 * dt) if spec.drive.amplitude else False
            h = hi - lo
            sub = substeps if len(pieces) == 2 else max(1, int(np.ceil(substeps * h / dt)))
            v = gens.advance(v, h, drive_on, sub)
        yield ExactState(v.copy(), b, spec.n_spins, spec.fock_dim)


def evolve_exact(spec: EnsembleSpec, rho0: ExactState | None, t_end: float, dt: float, **kw) -> list[ExactState]:
    """List of oracle states at every multiple of ``dt`` (see :func:`iter_exact`)."""
    return list(iter_exact(spec, rho0, t_end, dt, **kw))


def steady_state(spec: EnsembleSpec, *, drive_on: bool = True, rtol: float = 1e-9,
                 max_dim: int = 4096) -> ExactState:
    """Null vector of the (always-driven) Liouvillian, normalised to unit trace.

    Uses a dense SVD; raises :class:`DegenerateSteadyState` if several singular
    values vanish.
    """
    lv = assemble_full(spec, drive_on=drive_on, sparse=False, max_dim=max_dim)
    _, s, vh = np.linalg.svd(lv)
    scale = max(s[0], 1e-300)
    null = np.flatnonzero(s <= rtol * scale)
    if null.size == 0:
        null = np.array([s.size - 1])
    basis = [vh[i].conj() for i in null]
    t = trace_superket(spec.hilbert_dim())

    def normalized(v):
        tr = t @ v
        return v / tr if abs(tr) > 1e-12 else v

    if len(basis) > 1:
        states = [ExactState(normalized(v), np.inf, spec.n_spins, spec.fock_dim) for v in basis]
        raise DegenerateSteadyState(f"null space has dimension {len(basis)}", states)
    return ExactState(normalized(basis[0]), np.inf, spec.n_spins, spec.fock_dim)


# --- observables on full density matrices ---------------------------------

def exact_photon_moments(state: ExactState, orders=(1, 2, 3, 4)) -> dict[int, float]:
    rho_c = state.reduced_cavity()
    return cavity_moments_from_dm(rho_c / np.real(np.trace(rho_c)), orders)


def exact_spin_observables(state: ExactState) -> tuple[np.ndarray, float, float]:
    """Per-spin ``<s+ s->``, ``<sum sz/2>`` and ``J = sum_ij <s+_i s-_j>``."""
    n, nc = state.n_spins, state.fock_dim
    rho = state.density_matrix()
    tr = np.real(np.trace(rho))
    excited, collective = _spin_operators(n, nc)
    exc = np.array([np.real(np.sum(op.multiply(rho.T))) for op in excited]) / tr
    j = np.real(np.sum(collective.multiply(rho.T))) / tr
    return exc, float(np.sum(exc) - n / 2.0), float(j)


@functools.lru_cache(maxsize=8)
def _spin_operators(n: int, nc: int):
    excited = [embed(EXCITED, k, n, nc) for k in range(n)]
    zero = sp.csr_matrix((2**n * nc,) * 2, dtype=complex)
    sp_tot = sum((embed(SIGMA_PLUS, k, n, nc) for k in range(n)), zero)
    sm_tot = sum((embed(SIGMA_MINUS, k, n, nc) for k in range(n)), zero)
    return excited, (sp_tot @ sm_tot).tocsr()


def measure_exact(state: ExactState, spec: EnsembleSpec | None = None, *, resonant=None) -> ObservableRecord:
    """Oracle counterpart of :func:`mesocavity.observables.measure`."""
    moments = exact_photon_moments(state)
    exc, jz, j = exact_spin_observables(state)
    if resonant is None:
        if spec is not None and spec.n_spins:
            det = np.abs(spec.frequencies() - spec.cavity.frequency)
            resonant = det == det.min()
        else:
            resonant = np.ones(state.n_spins, dtype=bool)
    rho_c = state.reduced_cavity()
    return ObservableRecord(
        time=state.time,
        photon_number=moments[1],
        g2=gn_from_moments(moments, 2),
        g3=gn_from_moments(moments, 3),
        g4=gn_from_moments(moments, 4),
        spin_excitation_resonant=float(np.mean(exc[resonant])) if state.n_spins else math.nan,
        jz=jz,
        collective_J=j,
        trace_drift=float(1.0 - np.real(state.trace())),
        truncation_error=0.0,
        fock_top=float(np.real(rho_c[-1, -1])),
    )
