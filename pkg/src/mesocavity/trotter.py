"""Pair propagators and the symmetric second-order splitting.

One time step of length ``dt`` is approximated by

    V_N(dt/2) ... V_2(dt/2) V_1(dt) V_2(dt/2) ... V_N(dt/2),

with ``V_k(t) = expm(L_k t)`` the exponential of a pair Liouvillian
(:func:`mesocavity.superop.assemble_pair`).  Propagators are stored in the
product superket basis ``(s s')(c c')`` so the engine can apply them directly
to its coefficient tensor.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .model import EnsembleSpec
from .superop import assemble_pair, reorder_to_product_basis

# Below this fraction of nonzeros a CSR copy is used for application.
SPARSE_FILL = 0.15


class PropagatorError(RuntimeError):
    """Matrix exponential failed or produced non-finite entries."""


@dataclass(frozen=True)
class PairPropagator:
    matrix: np.ndarray
    step: float
    drive_on: bool
    key: tuple
    sparse: sp.csr_matrix | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Act on the rows of ``x`` (shape ``(dim, ...)``)."""
        if self.sparse is not None:
            return self.sparse @ x
        return self.matrix @ x

    def apply_right(self, x: np.ndarray) -> np.ndarray:
        """``x @ matrix.T``, i.e. act on the last axis of a 2-d array."""
        if self.sparse is not None:
            return (self.sparse @ x.T).T
        return x @ self.matrix.T


def _finalize(mat, step, drive_on, key):
    nnz = np.count_nonzero(mat)
    csr = sp.csr_matrix(mat) if nnz < SPARSE_FILL * mat.size else None
    return PairPropagator(mat, step, drive_on, key, csr)


def build_propagator(spec: EnsembleSpec, k: int, step: float, drive_on: bool) -> PairPropagator:
    """``expm(L_k * step)`` in product superket basis."""
    if step < 0:
        raise ValueError(f"propagator step must be >= 0, got {step}")
    gen = assemble_pair(spec, k, drive_on=drive_on)
    if step == 0:
        mat = np.eye(gen.shape[0], dtype=complex)
    else:
        mat = scipy.linalg.expm(gen * step)
        if not np.all(np.isfinite(mat)):
            raise PropagatorError(f"matrix exponential of pair {k} is not finite (step={step})")
    mat = reorder_to_product_basis(mat, 2, spec.fock_dim)
    mat = np.ascontiguousarray(mat)
    return _finalize(mat, step, drive_on, spec.spins[k].key)


class PropagatorCache:
    """Pair propagators of one ensemble keyed by exact spin parameters, step and drive state.

    Spins sharing ``(frequency, coupling, decay)`` bit for bit share one matrix.
    """

    def __init__(self, spec: EnsembleSpec):
        self.spec = spec
        self._store: dict[tuple, PairPropagator] = {}
        self._lock = threading.Lock()
        self.builds = 0

    def __len__(self):
        return len(self._store)

    def keys(self):
        return list(self._store)

    def get(self, k: int, step: float, drive_on: bool) -> PairPropagator:
        drive_on = bool(drive_on and self.spec.drive.amplitude)
        key = (self.spec.spins[k].key, float(step), drive_on)
        prop = self._store.get(key)
        if prop is None:
            prop = build_propagator(self.spec, k, step, drive_on)
            with self._lock:
                prop = self._store.setdefault(key, prop)
                self.builds += 1
        return prop

    def warm(self, dt: float, drive_states=(False, True)):
        """Build every propagator a regular step needs."""
        for drive_on in drive_states:
            trotter_sequence(self.spec, dt, drive_on, self)


def trotter_sequence(spec: EnsembleSpec, step: float, drive_on: bool,
                     cache: PropagatorCache | None = None) -> list[tuple[int, PairPropagator]]:
    """Palindromic list of ``(spin index, propagator)`` for one full step (0-based indices)."""
    if cache is None:
        cache = PropagatorCache(spec)
    n = spec.n_spins
    half = step / 2.0
    seq = [(k, cache.get(k, half, drive_on)) for k in range(n - 1, 0, -1)]
    seq.append((0, cache.get(0, step, drive_on)))
    seq += [(k, cache.get(k, half, drive_on)) for k in range(1, n)]
    return seq
