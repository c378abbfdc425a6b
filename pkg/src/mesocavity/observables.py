"""Expectation values from a renormalised sweep state.

Cavity observables contract the cavity axis directly.  Spin observables come
from one extra pass down the left isometry stack that uses the stored maps
only (no propagators, no new truncation).  Along the way four right
environments are carried, with no insertion, one sigma+, one sigma- and the
pair ``S+ S-`` restricted to the spins already passed; this yields the
collective ``J = sum_ij <s+_i s-_j>`` in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .engine import SPIN_TRACE, SweepState, TruncationReport
from .superop import EXCITED, SIGMA_MINUS, SIGMA_PLUS, destroy, lift_left, trace_superket

PHOTON_FLOOR = 1e-10

# Functionals f with f @ vec(rho) = Tr(O rho) for a single spin.
_EXC = SPIN_TRACE @ lift_left(EXCITED)
_SP = SPIN_TRACE @ lift_left(SIGMA_PLUS)
_SM = SPIN_TRACE @ lift_left(SIGMA_MINUS)


@dataclass(frozen=True)
class ObservableRecord:
    time: float
    photon_number: float
    g2: float
    g3: float
    g4: float
    spin_excitation_resonant: float
    jz: float
    collective_J: float
    trace_drift: float
    truncation_error: float
    fock_top: float = 0.0
    max_rank: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


def reduced_cavity_superket(state: SweepState) -> np.ndarray:
    """Cavity superket with every spin traced out (length ``n_c**2``)."""
    v = np.tensordot(state.left_trace, state.coeff, axes=([0], [0]))  # f, r, c
    v = np.tensordot(v, state.right_trace, axes=([1], [0]))  # f, c
    if state.free_site is None:
        return v[0]
    return SPIN_TRACE @ v


def reduced_cavity(state: SweepState) -> np.ndarray:
    nc = state.fock_dim
    return reduced_cavity_superket(state).reshape(nc, nc)


def cavity_expectation(state: SweepState, op) -> complex:
    """``<t| lift_left(op) |rho>`` restricted to the cavity axis."""
    op = np.asarray(op)
    nc = state.fock_dim
    if op.shape != (nc, nc):
        raise ValueError(f"cavity operator must be {nc}x{nc}, got {op.shape}")
    return complex(trace_superket(nc) @ (lift_left(op) @ reduced_cavity_superket(state)))


def normal_moment(state: SweepState, n: int) -> float:
    """``<a^dag^n a^n>``."""
    a = destroy(state.fock_dim)
    an = np.linalg.matrix_power(a, n)
    return float(np.real(cavity_expectation(state, an.conj().T @ an)))


def gn_from_moments(moments, n: int, floor: float = PHOTON_FLOOR) -> float:
    """``moments[n] / moments[1]**n``; NaN marks undefined statistics below ``floor``."""
    nbar = moments[1]
    if nbar < floor:
        return math.nan
    return moments[n] / nbar**n


def gn(state: SweepState, n: int, floor: float = PHOTON_FLOOR) -> float:
    """Equal-time normally ordered correlation ``g_n``; NaN when ``<a^dag a>`` < ``floor``."""
    if n < 1:
        raise ValueError("correlation order must be >= 1")
    return gn_from_moments({1: normal_moment(state, 1), n: normal_moment(state, n)}, n, floor)


def cavity_moments_from_dm(rho_c, orders=(1, 2, 3, 4)) -> dict[int, float]:
    """Normally ordered moments from a cavity density matrix."""
    nc = rho_c.shape[0]
    a = destroy(nc)
    out = {}
    for n in orders:
        an = np.linalg.matrix_power(a, n)
        out[n] = float(np.real(np.trace(an.conj().T @ an @ rho_c)))
    return out


@dataclass(frozen=True)
class SpinObservables:
    excitation: np.ndarray  # <s+_j s-_j> for every spin
    jz: float  # <sum_j sz_j / 2>
    collective_J: float  # sum_ij <s+_i s-_j>


def spin_sweep(state: SweepState) -> SpinObservables:
    """Spin observables of a step-boundary state; the state is left untouched."""
    n = state.n_spins
    if state.free_site != n - 1 or state.right_stack:
        raise ValueError("spin observables need a step-boundary state (last spin free)")
    # contract cavity and (empty) right block
    g = np.tensordot(state.coeff[:, :, 0, :], state.cavity_trace, axes=([2], [0])) * state.right_trace[0]
    tr_total = complex(state.left_trace @ (g @ SPIN_TRACE))
    exc = np.empty(n)
    x0, xp, xm, xpm = g @ SPIN_TRACE, g @ _SP, g @ _SM, g @ _EXC
    exc[n - 1] = np.real(state.left_trace @ xpm) / np.real(tr_total)
    for j in range(n - 2, -1, -1):
        iso = state.left_stack[j]
        u = iso.matrix.reshape(-1, 4, iso.dim)
        w0, wp, wm, wpm = (u @ x for x in (x0, xp, xm, xpm))  # (l_prev, s)
        tau = state.left_stack[j - 1].trace if j > 0 else np.ones(1, dtype=complex)
        exc[j] = np.real(tau @ (w0 @ _EXC)) / np.real(tr_total)
        x0, xp, xm, xpm = (
            w0 @ SPIN_TRACE,
            wp @ SPIN_TRACE + w0 @ _SP,
            wm @ SPIN_TRACE + w0 @ _SM,
            wpm @ SPIN_TRACE + wp @ _SM + wm @ _SP + w0 @ _EXC,
        )
    collective = float(np.real(xpm[0] / tr_total))
    jz = float(np.sum(exc) - n / 2.0)
    return SpinObservables(exc, jz, collective)


def measure(state: SweepState, spec=None, report: TruncationReport | None = None, *,
            resonant: np.ndarray | None = None, floor: float = PHOTON_FLOOR) -> ObservableRecord:
    """Full observable row for the current step-boundary state.

    ``resonant`` is a boolean mask of spins averaged for the resonant excitation;
    by default spins whose detuning from the cavity is the smallest in the ensemble.
    """
    rho_c = reduced_cavity(state)
    moments = cavity_moments_from_dm(rho_c)
    spins = spin_sweep(state)
    if resonant is None:
        if spec is not None:
            det = np.abs(spec.frequencies() - spec.cavity.frequency)
            resonant = det == det.min()
        else:
            resonant = np.ones(state.n_spins, dtype=bool)
    return ObservableRecord(
        time=state.time,
        photon_number=moments[1],
        g2=gn_from_moments(moments, 2, floor),
        g3=gn_from_moments(moments, 3, floor),
        g4=gn_from_moments(moments, 4, floor),
        spin_excitation_resonant=float(np.mean(spins.excitation[resonant])),
        jz=spins.jz,
        collective_J=spins.collective_J,
        trace_drift=0.0 if report is None else report.trace_error,
        truncation_error=0.0 if report is None else report.discarded_weight,
        fock_top=float(np.real(rho_c[-1, -1])),
        max_rank=1 if report is None else report.max_rank,
    )
