"""Vectorisation algebra and Liouvillian assembly.

Density matrices are vectorised row-major, ``|rho> = sum_ij p_ij |ij>``, which is
``rho.reshape(-1)`` for a C-ordered array.  With this convention

    vec(A rho B) = (A kron B^T) vec(rho),

so left multiplication lifts to ``A kron I`` and right multiplication to
``I kron B^T``.

Hilbert-space ordering of the full system is ``spin_1 x ... x spin_N x cavity``.
Two superket orderings appear in the code:

* the *joint* basis, ``vec`` of the full density matrix, index
  ``(s_1..s_N, c, s_1'..s_N', c')``;
* the *product* basis used by the sweep engine, one superket index per site,
  ``(s_1 s_1')(s_2 s_2')...(s_N s_N')(c c')``.
"""

from __future__ import annotations

from functools import reduce

import numpy as np
import scipy.sparse as sp

from .model import EnsembleSpec

DEFAULT_MAX_DIM = 2**21


class DimensionCapError(RuntimeError):
    """Full Liouville space larger than the configured cap."""


# --- local operators -------------------------------------------------------

SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.T.copy()
SIGMA_Z = np.diag([-1.0, 1.0]).astype(complex)
EXCITED = np.diag([0.0, 1.0]).astype(complex)  # sigma+ sigma-
GROUND_STATE = np.diag([1.0, 0.0]).astype(complex)
EXCITED_STATE = EXCITED


def destroy(n: int) -> np.ndarray:
    """Truncated annihilation operator on ``n`` Fock levels."""
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def number(n: int) -> np.ndarray:
    return np.diag(np.arange(n, dtype=float)).astype(complex)


def fock_dm(n: int, k: int) -> np.ndarray:
    rho = np.zeros((n, n), dtype=complex)
    rho[k, k] = 1.0
    return rho


# --- vectorisation ---------------------------------------------------------

def vectorize(rho) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"vectorize expects a square matrix, got shape {rho.shape}")
    return rho.reshape(-1).astype(complex)


def devectorize(vec) -> np.ndarray:
    vec = np.asarray(vec).reshape(-1)
    d = int(round(np.sqrt(vec.size)))
    if d * d != vec.size:
        raise ValueError(f"superket length {vec.size} is not a perfect square")
    return vec.reshape(d, d)


def trace_superket(d: int) -> np.ndarray:
    """Vectorised identity; ``trace_superket(d) @ vectorize(rho) == trace(rho)``."""
    return np.eye(d, dtype=complex).reshape(-1)


def _check_square(op):
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValueError(f"expected a square operator, got shape {op.shape}")


def lift_left(op) -> np.ndarray:
    """Superoperator of ``rho -> op @ rho``."""
    op = np.asarray(op)
    _check_square(op)
    return np.kron(op, np.eye(op.shape[0]))


def lift_right(op) -> np.ndarray:
    """Superoperator of ``rho -> rho @ op``."""
    op = np.asarray(op)
    _check_square(op)
    return np.kron(np.eye(op.shape[0]), op.T)


def commutator(h) -> np.ndarray:
    """Superoperator of ``rho -> -i [h, rho]``."""
    return -1j * (lift_left(h) - lift_right(h))


def dissipator(x, rate: float = 1.0) -> np.ndarray:
    """``rate * (x (x) x* - 1/2 x^dag x (x) I - 1/2 I (x) x^T x*)``."""
    if rate < 0:
        raise ValueError(f"dissipation rate must be >= 0, got {rate}")
    x = np.asarray(x, dtype=complex)
    _check_square(x)
    eye = np.eye(x.shape[0])
    xdx = x.conj().T @ x
    return rate * (np.kron(x, x.conj()) - 0.5 * np.kron(xdx, eye) - 0.5 * np.kron(eye, xdx.T))


def _sp_dissipator(x, rate):
    eye = sp.identity(x.shape[0], format="csr", dtype=complex)
    xdx = (x.conj().T @ x).tocsr()
    return rate * (sp.kron(x, x.conj()) - 0.5 * sp.kron(xdx, eye) - 0.5 * sp.kron(eye, xdx.T))


def _sp_hamiltonian_part(h):
    eye = sp.identity(h.shape[0], format="csr", dtype=complex)
    return -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))


# --- Hilbert-space operators of the full system ----------------------------

def embed(op, site: int, n_spins: int, fock_dim: int, *, sparse: bool = True):
    """Place a local operator on ``site`` (0..N-1 spins, N = cavity)."""
    dims = [2] * n_spins + [fock_dim]
    factors = [sp.identity(d, format="csr", dtype=complex) for d in dims]
    factors[site] = sp.csr_matrix(op, dtype=complex)
    out = reduce(lambda a, b: sp.kron(a, b, format="csr"), factors)
    return out if sparse else out.toarray()


def full_operators(spec: EnsembleSpec):
    """Sparse cavity annihilation operator and per-spin lowering operators."""
    n, nc = spec.n_spins, spec.fock_dim
    a = embed(destroy(nc), n, n, nc)
    sm = [embed(SIGMA_MINUS, k, n, nc) for k in range(n)]
    return a, sm


def hamiltonian(spec: EnsembleSpec, *, drive_on: bool = True):
    """Rotating-frame Tavis-Cummings Hamiltonian as a sparse matrix.

    ``H = sum_k w_k sz_k / 2 + w_c a^dag a + i sum_k g_k (s+_k a - s-_k a^dag)
    + i eta (a^dag - a)`` with all frequencies measured from the drive.
    """
    n, nc = spec.n_spins, spec.fock_dim
    a, sm = full_operators(spec)
    ad = a.conj().T.tocsr()
    h = spec.cavity.frequency * (ad @ a)
    for k, s in enumerate(spec.spins):
        sz = embed(SIGMA_Z, k, n, nc)
        h = h + 0.5 * s.frequency * sz
        h = h + 1j * s.coupling * (sm[k].conj().T @ a - sm[k] @ ad)
    if drive_on and spec.drive.amplitude:
        h = h + 1j * spec.drive.amplitude * (ad - a)
    return h.tocsr()


def jump_operators(spec: EnsembleSpec):
    """List of ``(rate, L)`` pairs: cavity loss then spin decays."""
    a, sm = full_operators(spec)
    jumps = []
    if spec.cavity.decay:
        jumps.append((spec.cavity.decay, a))
    for s, op in zip(spec.spins, sm):
        if s.decay:
            jumps.append((s.decay, op))
    return jumps


def assemble_full(spec: EnsembleSpec, *, drive_on: bool = True, sparse: bool = True,
                  max_dim: int = DEFAULT_MAX_DIM):
    """Liouvillian of the whole ensemble on the joint vectorised space."""
    d = spec.hilbert_dim()
    if d * d > max_dim:
        raise DimensionCapError(
            f"Liouville dimension {d * d} for N={spec.n_spins}, n_c={spec.fock_dim} exceeds cap {max_dim}")
    lv = _sp_hamiltonian_part(hamiltonian(spec, drive_on=drive_on))
    for rate, op in jump_operators(spec):
        lv = lv + _sp_dissipator(op, rate)
    lv = lv.tocsr()
    lv.eliminate_zeros()
    return lv if sparse else lv.toarray()


# --- pair terms ------------------------------------------------------------

def pair_hamiltonian(spec: EnsembleSpec, k: int, *, drive_on: bool = True) -> np.ndarray:
    """Spin ``k`` Hamiltonian plus a 1/N share of the cavity Hamiltonian, on spin x cavity."""
    n = spec.n_spins
    if not 0 <= k < n:
        raise IndexError(f"spin index {k} out of range for N={n}")
    nc = spec.fock_dim
    s = spec.spins[k]
    a = destroy(nc)
    ad = a.conj().T
    i2, ic = np.eye(2), np.eye(nc)
    hc = spec.cavity.frequency * (ad @ a)
    if drive_on and spec.drive.amplitude:
        hc = hc + 1j * spec.drive.amplitude * (ad - a)
    h = 0.5 * s.frequency * np.kron(SIGMA_Z, ic)
    h = h + 1j * s.coupling * (np.kron(SIGMA_PLUS, a) - np.kron(SIGMA_MINUS, ad))
    return h + np.kron(i2, hc) / n


def assemble_pair(spec: EnsembleSpec, k: int, *, drive_on: bool = True) -> np.ndarray:
    """Dense pair Liouvillian of spin ``k`` (0-based) and the cavity, joint basis.

    Summing the embedded pair terms over ``k`` reproduces :func:`assemble_full`.
    """
    n, nc = spec.n_spins, spec.fock_dim
    s = spec.spins[k] if 0 <= k < n else None
    if s is None:
        raise IndexError(f"spin index {k} out of range for N={n}")
    ic = np.eye(nc)
    lv = commutator(pair_hamiltonian(spec, k, drive_on=drive_on))
    if s.decay:
        lv = lv + dissipator(np.kron(SIGMA_MINUS, ic), s.decay)
    if spec.cavity.decay:
        lv = lv + dissipator(np.kron(np.eye(2), destroy(nc)), spec.cavity.decay / n)
    return lv


def _pair_perm(ds: int, dc: int) -> np.ndarray:
    # joint (s, c, s', c') -> product (s, s', c, c')
    return np.arange((ds * dc) ** 2).reshape(ds, dc, ds, dc).transpose(0, 2, 1, 3).reshape(-1)


def reorder_to_product_basis(op, ds: int = 2, dc: int | None = None, *, inverse: bool = False) -> np.ndarray:
    """Similarity transform of a pair superoperator from joint to product superket basis.

    The joint basis indexes ``|s c><s' c'|`` as ``(s, c, s', c')``; the product basis as
    ``(s, s')(c, c')``.  ``inverse=True`` maps back.
    """
    op = np.asarray(op)
    dim = op.shape[0]
    if dc is None:
        pair = int(round(np.sqrt(dim)))
        if pair * pair != dim or pair % ds:
            raise ValueError(f"superoperator dimension {dim} does not factor as (ds*dc)^2 with ds={ds}")
        dc = pair // ds
    if (ds * dc) ** 2 != dim:
        raise ValueError(f"superoperator dimension {dim} != ({ds}*{dc})^2")
    perm = _pair_perm(ds, dc)
    if inverse:
        perm = np.argsort(perm)
    return op[np.ix_(perm, perm)]


# --- full-space basis conversions (small systems, tests and oracle comparison) ----

def _site_perm(n_spins: int, fock_dim: int) -> np.ndarray:
    dims = [2] * n_spins + [fock_dim]
    m = len(dims)
    idx = np.arange(int(np.prod(dims)) ** 2).reshape(dims + dims)
    order = [ax for site in range(m) for ax in (site, site + m)]
    return idx.transpose(order).reshape(-1)


def joint_to_product(vec, n_spins: int, fock_dim: int) -> np.ndarray:
    """Full joint-basis superket to per-site product basis."""
    return np.asarray(vec)[_site_perm(n_spins, fock_dim)]


def product_to_joint(vec, n_spins: int, fock_dim: int) -> np.ndarray:
    out = np.empty_like(np.asarray(vec))
    out[_site_perm(n_spins, fock_dim)] = vec
    return out


def embed_pair(op, k: int, n_spins: int, fock_dim: int):
    """Embed a joint-basis pair superoperator of spin ``k`` into the full joint space (sparse)."""
    prod_op = sp.csr_matrix(reorder_to_product_basis(op, 2, fock_dim))
    others = sp.identity(4 ** (n_spins - 1), format="csr", dtype=complex)
    big = sp.kron(prod_op, others, format="csr")
    # big acts on (s_k s_k')(c c')(other sites...), build map from joint index to that order
    dims = [2] * n_spins + [fock_dim]
    m = len(dims)
    idx = np.arange(int(np.prod(dims)) ** 2).reshape(dims + dims)
    order = [k, k + m, n_spins, n_spins + m]
    for j in range(n_spins):
        if j != k:
            order += [j, j + m]
    perm = idx.transpose(order).reshape(-1)  # position in big -> joint index
    big = big.tocoo()
    return sp.csr_matrix((big.data, (perm[big.row], perm[big.col])), shape=big.shape)


def partial_trace_cavity(rho, n_spins: int, fock_dim: int) -> np.ndarray:
    """Reduced cavity density matrix of a full joint-basis density matrix."""
    ds = 2**n_spins
    r = np.asarray(rho).reshape(ds, fock_dim, ds, fock_dim)
    return np.einsum("iaib->ab", r)
