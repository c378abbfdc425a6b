"""Time-adaptive renormalised evolution in superoperator space.

The ensemble superket is held as a coefficient tensor ``coeff[l, f, r, c]`` over

* ``l``: renormalised basis of the left block (spins ``0 .. free-1``),
* ``f``: the one un-renormalised (free) spin, superket index ``(s s')``,
* ``r``: renormalised basis of the right block (spins ``free+1 .. N-1``),
* ``c``: the cavity superket ``(n n')``, never truncated.

Block bases are built recursively by isometries.  A left isometry maps
``(l_prev, s)`` to ``l``; a right isometry maps ``(s, r_prev)`` to ``r``.  Each
isometry carries the renormalised trace functional of its block so that
``Tr rho`` is a contraction of ``coeff`` with four vectors.

A full step is a left sweep (free site N-1 -> 0, applying ``V_k(dt/2)`` and
``V_0(dt)``) followed by a right sweep (0 -> N-1, applying ``V_k(dt/2)``).  At a
step boundary the layout is: spins ``0..N-2`` in the left block, spin ``N-1``
free, right block empty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .model import EnsembleSpec
from .superop import GROUND_STATE, fock_dm, trace_superket
from .trotter import PairPropagator, PropagatorCache

CHECKPOINT_VERSION = 1
RANK_RTOL = 1e-14
# Gram eigenvalues carry absolute noise ~eps * s_max**2, so singular values below
# ~sqrt(eps) * s_max are not resolved on that path.
GRAM_RTOL = 1e-7
FACTORIZATIONS = ("svd", "gram")
SPIN_TRACE = trace_superket(2)


class TruncationAbort(RuntimeError):
    """Discarded weight in one step exceeded the configured ceiling."""


class VanishingTraceError(RuntimeError):
    """Trace functional collapsed, normalisation impossible."""


@dataclass(frozen=True)
class Isometry:
    """Renormalisation map of a block that has just absorbed ``site``.

    ``matrix`` has orthonormal columns; rows are ``(l_prev, s)`` for the left side and
    ``(s, r_prev)`` for the right side.  ``trace`` is the block's trace functional in
    the new basis (contract without conjugation).
    """

    matrix: np.ndarray
    site: int
    side: str
    trace: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class TruncationEvent:
    site: int
    side: str
    kept: int
    discarded_weight: float
    trace_error: float
    singular_values: np.ndarray = field(repr=False)


@dataclass
class TruncationReport:
    events: list[TruncationEvent] = field(default_factory=list)
    trace_before_normalization: float = 1.0

    @property
    def discarded_weight(self) -> float:
        return float(sum(e.discarded_weight for e in self.events))

    @property
    def max_rank(self) -> int:
        return max((e.kept for e in self.events), default=1)

    @property
    def trace_error(self) -> float:
        return 1.0 - self.trace_before_normalization

    def merge(self, other: "TruncationReport") -> "TruncationReport":
        return TruncationReport(self.events + other.events,
                                self.trace_before_normalization * other.trace_before_normalization)


@dataclass
class SweepState:
    coeff: np.ndarray
    left_stack: list[Isometry]
    right_stack: list[Isometry]
    free_site: int | None
    time: float
    n_spins: int
    fock_dim: int
    d_max: int = 200
    abort_weight: float = 1e-6
    weight_tol: float = 0.0
    factorization: str = "svd"

    @property
    def left_trace(self) -> np.ndarray:
        return self.left_stack[-1].trace if self.left_stack else np.ones(1, dtype=complex)

    @property
    def right_trace(self) -> np.ndarray:
        return self.right_stack[-1].trace if self.right_stack else np.ones(1, dtype=complex)

    @property
    def cavity_trace(self) -> np.ndarray:
        return trace_superket(self.fock_dim)

    @property
    def bond_dims(self) -> tuple[int, int]:
        return self.coeff.shape[0], self.coeff.shape[2]

    def copy(self) -> "SweepState":
        return replace(self, coeff=self.coeff.copy(), left_stack=list(self.left_stack),
                       right_stack=list(self.right_stack))

    def check_layout(self):
        n_free = 0 if self.free_site is None else 1
        if len(self.left_stack) + len(self.right_stack) + n_free != self.n_spins:
            raise AssertionError("block bookkeeping does not account for every spin")


class Truncation(NamedTuple):
    isometry: np.ndarray
    coeff: np.ndarray
    discarded_weight: float
    singular_values: np.ndarray


def _left_singular(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and values of ``m``; wide inputs go through a QR of ``m^H``."""
    rows, cols = m.shape
    try:
        if cols > 2 * rows:
            r = scipy.linalg.qr(m.conj().T, mode="r", check_finite=False)[0][:rows]
            u, s, _ = scipy.linalg.svd(r.conj().T, check_finite=False)
        else:
            u, s, _ = scipy.linalg.svd(m, full_matrices=False, check_finite=False)
    except np.linalg.LinAlgError:
        u, s, _ = scipy.linalg.svd(m, full_matrices=False, check_finite=False, lapack_driver="gesvd")
    return u, s


def _gram_singular(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left singular pairs from the smaller Gram matrix of ``m`` (descending).

    For tall ``m`` the right vectors are mapped back through ``m`` and
    re-orthonormalised by QR, which keeps the span of every leading subset.
    """
    rows, cols = m.shape
    tall = rows > cols
    # Hermitian rank-k update on the Fortran view m.T fills the upper triangle of
    # conj(m^H m) (tall) or conj(m m^H) (wide).
    herk = scipy.linalg.blas.zherk if np.iscomplexobj(m) else scipy.linalg.blas.dsyrk
    g = herk(1.0, m.T, trans=0 if tall else 2).conj()
    w, v = scipy.linalg.eigh(g, lower=False, check_finite=False, driver="evr")
    w, v = w[::-1], v[:, ::-1]
    s = np.sqrt(np.clip(w, 0.0, None))
    if tall:
        v = scipy.linalg.qr(m @ v, mode="economic", check_finite=False)[0]
    return v, s


def renormalize_reduced(m: np.ndarray, d_max: int, rtol: float = RANK_RTOL,
                        weight_tol: float = 0.0, factorization: str = "svd") -> Truncation:
    """Truncate the row space of the bipartite coefficient matrix ``m``.

    Rows index the block being grown, columns everything else.  Keeps
    ``min(d_max, numerical rank)`` leading left singular vectors; singular values
    below ``rtol * s_max`` are numerical zeros and never count toward the rank.
    A positive ``weight_tol`` additionally drops the longest tail whose relative
    squared weight stays below it.  ``discarded_weight`` is the fraction of
    squared singular values cut by ``d_max`` and ``weight_tol``.

    ``factorization='gram'`` diagonalises ``m m^H`` instead of running an SVD;
    it is about twice as fast for wide matrices but cannot resolve singular values
    below ``GRAM_RTOL * s_max``, which are then treated as zeros.
    """
    if factorization == "gram":
        u, s = _gram_singular(m)
        rtol = max(rtol, GRAM_RTOL)
    elif factorization == "svd":
        u, s = _left_singular(m)
    else:
        raise ValueError(f"unknown factorization {factorization!r}")
    if s.size == 0 or s[0] == 0.0:
        raise VanishingTraceError("coefficient matrix vanished during renormalisation")
    rank = int(np.count_nonzero(s > rtol * s[0]))
    total = float(np.sum(s**2))
    kept = min(d_max, rank)
    if weight_tol > 0.0:
        tail = np.cumsum((s[:rank] ** 2)[::-1])[::-1] / total  # tail[k] = weight of s[k:rank]
        kept = min(kept, int(np.count_nonzero(tail > weight_tol)))
    kept = max(1, kept)
    discarded = float(np.sum(s[kept:rank] ** 2)) / total
    iso = np.ascontiguousarray(u[:, :kept])
    return Truncation(iso, iso.conj().T @ m, discarded, s)


def trace(state: SweepState) -> complex:
    """Trace functional of the represented density matrix."""
    c = state.coeff
    v = np.tensordot(c, state.cavity_trace, axes=([3], [0]))
    v = np.tensordot(v, state.right_trace, axes=([2], [0]))
    if state.free_site is not None:
        v = v @ SPIN_TRACE
    else:
        v = v[:, 0]
    return complex(state.left_trace @ v)


def renormalize_trace(state: SweepState) -> SweepState:
    """Rescale so that the trace functional is exactly one."""
    tr = trace(state)
    if not np.isfinite(tr) or abs(tr) < 1e-300:
        raise VanishingTraceError(f"trace functional is {tr}")
    state.coeff = state.coeff / tr
    return state


# --- construction ----------------------------------------------------------

def init_state(spec: EnsembleSpec, d_max: int = 200, *, spin_states=None, cavity_state=None,
               abort_weight: float = 1e-6, weight_tol: float = 0.0,
               factorization: str = "svd") -> SweepState:
    """Product initial state in step-boundary layout.

    By default every spin is in its ground state and the cavity in vacuum.
    ``spin_states`` (list of 2x2 density matrices) and ``cavity_state`` override.
    Spins ``0..N-2`` are absorbed one at a time into the left block.
    """
    n, nc = spec.n_spins, spec.fock_dim
    if n < 1:
        raise ValueError("the sweep engine needs at least one spin")
    if factorization not in FACTORIZATIONS:
        raise ValueError(f"unknown factorization {factorization!r}")
    if spin_states is None:
        spin_states = [GROUND_STATE] * n
    if len(spin_states) != n:
        raise ValueError(f"expected {n} spin states, got {len(spin_states)}")
    rho_c = fock_dm(nc, 0) if cavity_state is None else np.asarray(cavity_state, dtype=complex)
    local = [np.asarray(r, dtype=complex).reshape(-1) for r in spin_states]

    left: list[Isometry] = []
    block = np.ones((1, 1), dtype=complex)  # (l, rest) with rest trivial
    tau = np.ones(1, dtype=complex)
    for j in range(n - 1):
        m = np.kron(block, local[j][:, None])  # rows (l_prev, s)
        t = renormalize_reduced(m, d_max)
        tau = t.isometry.T @ np.kron(tau, SPIN_TRACE)
        left.append(Isometry(t.isometry, j, "left", tau))
        block = t.coeff
    dl = block.shape[0]
    coeff = np.einsum("l,f,c->lfc", block[:, 0], local[n - 1], rho_c.reshape(-1))
    coeff = coeff.reshape(dl, 4, 1, nc * nc)
    state = SweepState(coeff, left, [], n - 1, 0.0, n, nc, d_max, abort_weight, weight_tol, factorization)
    return renormalize_trace(state)


# --- elementary moves ------------------------------------------------------

def apply_pair(state: SweepState, prop: PairPropagator) -> SweepState:
    """Apply a pair propagator to (free spin, cavity); the swap is an axis transposition."""
    dl, df, dr, dc = state.coeff.shape
    x = state.coeff.transpose(0, 2, 1, 3).reshape(dl * dr, df * dc)
    x = prop.apply_right(x)
    state.coeff = x.reshape(dl, dr, df, dc).transpose(0, 2, 1, 3)
    return state


def _event(state, trunc, site, side, before):
    after = trace(state)
    return TruncationEvent(site, side, trunc.isometry.shape[1], trunc.discarded_weight,
                           float(np.real(1.0 - after / before)) if before else math.nan,
                           trunc.singular_values)


def absorb_right(state: SweepState) -> TruncationEvent:
    """Renormalise the free spin into the right block."""
    c = state.coeff
    dl, df, dr, dc = c.shape
    site = state.free_site
    before = trace(state)
    m = c.transpose(1, 2, 0, 3).reshape(df * dr, dl * dc)
    t = renormalize_reduced(m, state.d_max, weight_tol=state.weight_tol, factorization=state.factorization)
    tau = t.isometry.T @ np.kron(SPIN_TRACE, state.right_trace)
    state.right_stack.append(Isometry(t.isometry, site, "right", tau))
    d = t.isometry.shape[1]
    state.coeff = t.coeff.reshape(d, dl, 1, dc).transpose(1, 2, 0, 3)
    state.free_site = None
    return _event(state, t, site, "right", before)


def absorb_left(state: SweepState) -> TruncationEvent:
    """Renormalise the free spin into the left block."""
    c = state.coeff
    dl, df, dr, dc = c.shape
    site = state.free_site
    before = trace(state)
    t = renormalize_reduced(c.reshape(dl * df, dr * dc), state.d_max, weight_tol=state.weight_tol,
                            factorization=state.factorization)
    tau = t.isometry.T @ np.kron(state.left_trace, SPIN_TRACE)
    state.left_stack.append(Isometry(t.isometry, site, "left", tau))
    d = t.isometry.shape[1]
    state.coeff = t.coeff.reshape(d, 1, dr, dc)
    state.free_site = None
    return _event(state, t, site, "left", before)


def release_left(state: SweepState) -> SweepState:
    """Undo the last left renormalisation, freeing its spin (exact)."""
    iso = state.left_stack.pop()
    dl, _, dr, dc = state.coeff.shape
    x = iso.matrix @ state.coeff.reshape(dl, dr * dc)
    state.coeff = x.reshape(-1, 4, dr, dc)
    state.free_site = iso.site
    return state


def release_right(state: SweepState) -> SweepState:
    """Undo the last right renormalisation, freeing its spin (exact)."""
    iso = state.right_stack.pop()
    dl, _, dr, dc = state.coeff.shape
    x = np.tensordot(iso.matrix, state.coeff[:, 0], axes=([1], [1]))  # (s r_prev), l, c
    state.coeff = x.reshape(4, -1, dl, dc).transpose(2, 0, 1, 3)
    state.free_site = iso.site
    return state


# --- sweeps ----------------------------------------------------------------

def _check_abort(state, report):
    w = report.discarded_weight
    if w > state.abort_weight:
        raise TruncationAbort(
            f"discarded weight {w:.3e} exceeds ceiling {state.abort_weight:.1e} at t={state.time:.6e}s "
            f"(d_max={state.d_max}); correlations outgrow the truncated space")


def left_sweep(state: SweepState, cache: PropagatorCache, dt: float, drive_on: bool = False,
               report: TruncationReport | None = None, per_event: bool = False) -> SweepState:
    """Apply ``V_{N-1}(dt/2) ... V_1(dt/2) V_0(dt)`` moving the free site from N-1 to 0."""
    n = state.n_spins
    if state.free_site != n - 1 or state.right_stack:
        raise ValueError("left sweep must start with the last spin free and an empty right block")
    report = report if report is not None else TruncationReport()
    for j in range(n - 1, 0, -1):
        apply_pair(state, cache.get(j, dt / 2.0, drive_on))
        report.events.append(absorb_right(state))
        _check_abort(state, report)
        if per_event:
            renormalize_trace(state)
        release_left(state)
    apply_pair(state, cache.get(0, dt, drive_on))
    return state


def right_sweep(state: SweepState, cache: PropagatorCache, dt: float, drive_on: bool = False,
                report: TruncationReport | None = None, per_event: bool = False) -> SweepState:
    """Apply ``V_1(dt/2) ... V_{N-1}(dt/2)`` moving the free site from 0 to N-1."""
    n = state.n_spins
    if state.free_site != 0 or state.left_stack:
        raise ValueError("right sweep must start with the first spin free and an empty left block")
    report = report if report is not None else TruncationReport()
    for j in range(1, n):
        report.events.append(absorb_left(state))
        _check_abort(state, report)
        if per_event:
            renormalize_trace(state)
        release_right(state)
        apply_pair(state, cache.get(j, dt / 2.0, drive_on))
    return state


def _substeps(spec: EnsembleSpec, t: float, dt: float):
    """Split ``[t, t+dt]`` at the end of the drive pulse if it falls strictly inside."""
    drive = spec.drive
    if not drive.amplitude:
        return [(dt, False)]
    tp = drive.pulse_end
    eps = 1e-9 * dt
    if t >= tp - eps:
        return [(dt, False)]
    if t + dt <= tp + eps:
        return [(dt, True)]
    return [(tp - t, True), (t + dt - tp, False)]


def step(state: SweepState, cache: PropagatorCache, dt: float, *,
         renormalize: str = "step") -> tuple[SweepState, TruncationReport]:
    """One second-order step of length ``dt`` (split at the end of the drive pulse).

    ``renormalize='step'`` rescales the trace once per completed step;
    ``'event'`` additionally rescales after every truncation.
    """
    if renormalize not in ("step", "event"):
        raise ValueError(f"unknown renormalize mode {renormalize!r}")
    per_event = renormalize == "event"
    report = None
    t0 = state.time
    for h, drive_on in _substeps(cache.spec, t0, dt):
        sub = TruncationReport()
        left_sweep(state, cache, h, drive_on, sub, per_event)
        right_sweep(state, cache, h, drive_on, sub, per_event)
        sub.trace_before_normalization = float(np.real(trace(state)))
        renormalize_trace(state)
        report = sub if report is None else report.merge(sub)
    state.time = t0 + dt
    return state, report


# --- diagnostics -----------------------------------------------------------

def fock_occupation_check(state, ceiling: float | None = None):
    """Population of the highest cavity Fock level.

    Accepts a :class:`SweepState`, a reduced cavity density matrix, or anything with
    a ``reduced_cavity()`` method.  With ``ceiling`` given, returns ``(population, ok)``.
    """
    if isinstance(state, SweepState):
        from .observables import reduced_cavity
        rho_c = reduced_cavity(state)
    elif hasattr(state, "reduced_cavity"):
        rho_c = state.reduced_cavity()
    else:
        rho_c = np.asarray(state)
    pop = float(np.real(rho_c[-1, -1]))
    if ceiling is None:
        return pop
    return pop, pop <= ceiling


def block_tensor(stack: list[Isometry], side: str) -> np.ndarray:
    """Contract an isometry stack into a dense map from product site superkets to block basis."""
    out = np.ones((1, 1), dtype=complex)
    for iso in stack:
        dprev = out.shape[1]
        u = iso.matrix.reshape(dprev, 4, -1) if side == "left" else iso.matrix.reshape(4, dprev, -1)
        if side == "left":
            out = np.einsum("ap,psq->asq", out, u).reshape(-1, u.shape[2])
        else:
            out = np.einsum("ap,spq->saq", out, u).reshape(-1, u.shape[2])
    return out


def to_product_superket(state: SweepState) -> np.ndarray:
    """Dense superket in per-site product basis ``(s_0 s_0')...(s_{N-1} s_{N-1}')(c c')``.

    Only for small ensembles; the size is ``4**N * n_c**2``.
    """
    left = block_tensor(state.left_stack, "left")  # (sites..., l)
    right = block_tensor(state.right_stack, "right")
    c = state.coeff
    v = np.tensordot(left, c, axes=([1], [0]))  # L, f, r, c
    v = np.tensordot(v, right, axes=([2], [1]))  # L, f, c, R
    v = v.transpose(0, 1, 3, 2)
    if state.free_site is None:
        v = v[:, 0]
    return v.reshape(-1)


def to_density_matrix(state: SweepState) -> np.ndarray:
    """Full joint-basis density matrix (small ensembles only)."""
    from .superop import devectorize, product_to_joint
    vec = product_to_joint(to_product_superket(state), state.n_spins, state.fock_dim)
    return devectorize(vec)


# --- driver ----------------------------------------------------------------

def evolve(spec: EnsembleSpec, t_end: float, dt: float, *, d_max: int = 200, state: SweepState | None = None,
           cache: PropagatorCache | None = None, record_every: int = 1, abort_weight: float = 1e-6,
           weight_tol: float = 0.0, factorization: str = "svd", on_record=None,
           renormalize: str = "step"):
    """Evolve from ``state`` (default: ground/vacuum) to ``t_end`` recording observables.

    Returns ``(records, state)``; ``records`` is a list of
    :class:`mesocavity.observables.ObservableRecord`.
    """
    from .observables import measure

    if dt <= 0:
        raise ValueError("dt must be positive")
    cache = cache or PropagatorCache(spec)
    if state is None:
        state = init_state(spec, d_max, abort_weight=abort_weight, weight_tol=weight_tol,
                           factorization=factorization)
    records = []
    n_steps = int(round((t_end - state.time) / dt))
    start = int(round(state.time / dt))

    def record(report):
        rec = measure(state, spec, report)
        records.append(rec)
        if on_record is not None:
            on_record(rec, state)

    if start == 0:
        record(None)
    for i in range(start + 1, start + n_steps + 1):
        state, report = step(state, cache, dt, renormalize=renormalize)
        state.time = i * dt
        if i % record_every == 0:
            record(report)
    return records, state


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(state: SweepState, path, meta: dict | None = None):
    """Write a version-tagged ``.npz`` dump that resumes bit-exactly."""
    arrays = {"coeff": state.coeff}
    for name, stack in (("left", state.left_stack), ("right", state.right_stack)):
        for i, iso in enumerate(stack):
            arrays[f"{name}_{i}_matrix"] = iso.matrix
            arrays[f"{name}_{i}_trace"] = iso.trace
    header = {
        "version": CHECKPOINT_VERSION,
        "time": state.time.hex() if isinstance(state.time, float) else float(state.time).hex(),
        "n_spins": state.n_spins,
        "fock_dim": state.fock_dim,
        "d_max": state.d_max,
        "abort_weight": state.abort_weight,
        "weight_tol": state.weight_tol,
        "factorization": state.factorization,
        "free_site": state.free_site,
        "left_sites": [iso.site for iso in state.left_stack],
        "right_sites": [iso.site for iso in state.right_stack],
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[SweepState, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        stacks = {}
        for name in ("left", "right"):
            stacks[name] = [Isometry(data[f"{name}_{i}_matrix"], site, name, data[f"{name}_{i}_trace"])
                            for i, site in enumerate(header[f"{name}_sites"])]
        state = SweepState(data["coeff"], stacks["left"], stacks["right"], header["free_site"],
                           float.fromhex(header["time"]), header["n_spins"], header["fock_dim"],
                           header["d_max"], header["abort_weight"],
                           header.get("weight_tol", 0.0), header.get("factorization", "svd"))
    return state, header["meta"]
