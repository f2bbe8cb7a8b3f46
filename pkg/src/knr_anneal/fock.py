"""Truncated Fock-space linear algebra.

Everything lives on a product of ``n_modes`` identical truncated oscillators
(or two-level systems, ``dim=2``). Small operators are stored as dense
matrices (:class:`FockOperator`); Hamiltonians on larger spaces are kept as a
sum of Kronecker products (:class:`OperatorSum`) and applied without ever
forming the full matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg
from scipy.special import gammainc, gammaln

MAX_TOTAL_DIM = 2**20
HERMITIAN_TOL = 1e-12
DENSE_EIG_LIMIT = 1200

__all__ = [
    "ModeSpec",
    "FockOperator",
    "QuantumState",
    "KronTerm",
    "OperatorSum",
    "annihilation",
    "creation",
    "number",
    "identity",
    "parity",
    "apply_local",
    "coherent_state",
    "fock_state",
    "truncation_dim",
    "eigendecompose_hermitian",
    "fix_phase",
    "expectation",
    "matrix_element",
    "fidelity",
    "SpaceMismatch",
    "TruncationError",
]


class SpaceMismatch(ValueError):
    pass


class TruncationError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    dim: int
    n_modes: int = 1

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"dim must be an integer >= 2, got {self.dim}")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes}")
        if self.dim**self.n_modes > MAX_TOTAL_DIM:
            raise ValueError(
                f"total dimension {self.dim}**{self.n_modes} exceeds {MAX_TOTAL_DIM}"
            )

    @property
    def total(self) -> int:
        return self.dim**self.n_modes

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.dim,) * self.n_modes


def truncation_dim(alpha0: float) -> int:
    """Default per-mode truncation for a resonator settling at amplitude ``alpha0``."""
    a = abs(alpha0)
    return max(10, math.ceil(a * a + 6 * a + 4))


def _check_space(*spaces: ModeSpec) -> ModeSpec:
    first = spaces[0]
    for s in spaces[1:]:
        if s != first:
            raise SpaceMismatch(f"space mismatch: {first} vs {s}")
    return first


# -- dense operators ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FockOperator:
    space: ModeSpec
    matrix: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        n = self.space.total
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match space ({n}, {n})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.hermitian:
            dev = hermiticity_error(m)
            if dev > HERMITIAN_TOL * max(1.0, np.abs(m).max()):
                raise ValueError(f"operator tagged Hermitian deviates by {dev:.3e}")

    @property
    def dag(self) -> "FockOperator":
        return FockOperator(self.space, self.matrix.conj().T, self.hermitian)

    def __add__(self, other: "FockOperator") -> "FockOperator":
        _check_space(self.space, other.space)
        return FockOperator(self.space, self.matrix + other.matrix,
                            self.hermitian and other.hermitian)

    def __sub__(self, other: "FockOperator") -> "FockOperator":
        return self + (-1.0) * other

    def __mul__(self, c) -> "FockOperator":
        herm = self.hermitian and np.isreal(c)
        return FockOperator(self.space, c * self.matrix, bool(herm))

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, FockOperator):
            _check_space(self.space, other.space)
            return FockOperator(self.space, self.matrix @ other.matrix)
        return self.matrix @ other

    def commutator(self, other: "FockOperator") -> "FockOperator":
        _check_space(self.space, other.space)
        return FockOperator(self.space, self.matrix @ other.matrix - other.matrix @ self.matrix)

    def as_hermitian(self) -> "FockOperator":
        return FockOperator(self.space, self.matrix, hermitian=True)


def hermiticity_error(m: np.ndarray) -> float:
    return float(np.abs(m - m.conj().T).max()) if m.size else 0.0


def _ladder(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1).astype(complex)


def _embed(space: ModeSpec, local: np.ndarray, mode: int) -> np.ndarray:
    if not 0 <= mode < space.n_modes:
        raise IndexError(f"mode index {mode} out of range for {space.n_modes} modes")
    out = np.ones((1, 1), dtype=complex)
    eye = np.eye(space.dim)
    for k in range(space.n_modes):
        out = np.kron(out, local if k == mode else eye)
    return out


def annihilation(space: ModeSpec, mode_index: int = 0) -> FockOperator:
    """Lowering operator of one mode, identity on the others."""
    return FockOperator(space, _embed(space, _ladder(space.dim), mode_index))


def creation(space: ModeSpec, mode_index: int = 0) -> FockOperator:
    return annihilation(space, mode_index).dag


def number(space: ModeSpec, mode_index: int = 0) -> FockOperator:
    n = np.diag(np.arange(space.dim, dtype=complex))
    return FockOperator(space, _embed(space, n, mode_index), hermitian=True)


def identity(space: ModeSpec) -> FockOperator:
    return FockOperator(space, np.eye(space.total), hermitian=True)


def parity(space: ModeSpec, modes: Iterable[int] | None = None) -> FockOperator:
    """(-1)^(sum of photon numbers) over ``modes`` (all modes by default)."""
    modes = range(space.n_modes) if modes is None else list(modes)
    diag = np.ones(space.total)
    occ = np.indices(space.shape).reshape(space.n_modes, -1)
    for k in modes:
        diag = diag * (-1.0) ** occ[k]
    return FockOperator(space, np.diag(diag).astype(complex), hermitian=True)


# -- structured operators ----------------------------------------------------


def apply_local(op: np.ndarray, mode: int, x: np.ndarray, space: ModeSpec) -> np.ndarray:
    """Apply single-mode matrix ``op`` on ``mode`` to ``x`` of shape (total, ...)."""
    d = space.dim
    pre = d**mode
    rest = x.size // (pre * d)
    y = np.matmul(op, x.reshape(pre, d, rest))
    return y.reshape(x.shape)


@dataclass(frozen=True, eq=False)
class KronTerm:
    """``coeff * prod_k factor_k`` with each factor acting on a single mode.

    Factors are applied right to left, so ``((0, a_dag), (1, a))`` is
    ``a_dag_0 a_1``.
    """

    coeff: complex
    factors: tuple[tuple[int, np.ndarray], ...]

    @property
    def is_diagonal(self) -> bool:
        return all(np.count_nonzero(m - np.diag(np.diag(m))) == 0 for _, m in self.factors)

    def apply(self, x: np.ndarray, space: ModeSpec) -> np.ndarray:
        for mode, m in reversed(self.factors):
            x = apply_local(m, mode, x, space)
        return self.coeff * x

    def adjoint(self) -> "KronTerm":
        return KronTerm(np.conj(self.coeff),
                        tuple((k, m.conj().T) for k, m in reversed(self.factors)))

    def diagonal(self, space: ModeSpec) -> np.ndarray:
        diag = np.full(space.shape, self.coeff, dtype=complex)
        for mode, m in self.factors:
            shape = [1] * space.n_modes
            shape[mode] = space.dim
            diag = diag * np.diag(m).reshape(shape)
        return diag.ravel()

    def to_sparse(self, space: ModeSpec):
        mats = [sparse.identity(space.dim, dtype=complex, format="csr")
                for _ in range(space.n_modes)]
        for mode, m in self.factors:
            mats[mode] = sparse.csr_matrix(m) @ mats[mode]
        out = mats[0]
        for m in mats[1:]:
            out = sparse.kron(out, m, format="csr")
        return self.coeff * out


@dataclass(eq=False)
class OperatorSum:
    """Sum of Kronecker terms, applied matrix-free.

    Diagonal terms are folded into a single diagonal vector on first use.
    """

    space: ModeSpec
    terms: list[KronTerm] = field(default_factory=list)
    hermitian: bool = False

    def __post_init__(self):
        self._diag = None
        self._offdiag = None
        self._offdiag_csr = None

    def _compile(self):
        if self._diag is not None:
            return
        diag = np.zeros(self.space.total, dtype=complex)
        off = []
        for t in self.terms:
            if t.is_diagonal:
                diag += t.diagonal(self.space)
            else:
                off.append(t)
        self._diag, self._offdiag = diag, off

    def add(self, coeff, *factors: tuple[int, np.ndarray]) -> "OperatorSum":
        for mode, _ in factors:
            if not 0 <= mode < self.space.n_modes:
                raise IndexError(f"mode index {mode} out of range")
        self.terms.append(KronTerm(complex(coeff), tuple(factors)))
        self._diag = None
        self._offdiag_csr = None
        return self

    def add_with_hc(self, coeff, *factors) -> "OperatorSum":
        self.add(coeff, *factors)
        self.terms.append(self.terms[-1].adjoint())
        return self

    def __add__(self, other: "OperatorSum") -> "OperatorSum":
        _check_space(self.space, other.space)
        return OperatorSum(self.space, self.terms + other.terms,
                           self.hermitian and other.hermitian)

    def __mul__(self, c) -> "OperatorSum":
        terms = [KronTerm(c * t.coeff, t.factors) for t in self.terms]
        return OperatorSum(self.space, terms, self.hermitian and bool(np.isreal(c)))

    __rmul__ = __mul__

    @property
    def diagonal_part(self) -> np.ndarray:
        self._compile()
        return self._diag

    @property
    def offdiagonal_terms(self) -> list[KronTerm]:
        self._compile()
        return self._offdiag

    @property
    def offdiagonal_sparse(self):
        """CSR matrix of the off-diagonal terms, built once and cached."""
        if self._offdiag_csr is None:
            n = self.space.total
            out = sparse.csr_matrix((n, n), dtype=complex)
            for t in self.offdiagonal_terms:
                out = out + t.to_sparse(self.space)
            self._offdiag_csr = out.tocsr()
        return self._offdiag_csr

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._compile()
        diag = self._diag.reshape((-1,) + (1,) * (x.ndim - 1))
        y = diag * x
        for t in self._offdiag:
            y += t.apply(x, self.space)
        return y

    def to_sparse(self):
        n = self.space.total
        out = sparse.diags(self.diagonal_part, format="csr")
        for t in self.offdiagonal_terms:
            out = out + t.to_sparse(self.space)
        return out.tocsr() if out.shape == (n, n) else out

    def to_dense(self) -> FockOperator:
        if self.space.total > 4096:
            raise MemoryError(f"refusing to densify a {self.space.total}-dim operator")
        return FockOperator(self.space, self.to_sparse().toarray(), hermitian=self.hermitian)


def as_operator_sum(op) -> OperatorSum:
    if isinstance(op, OperatorSum):
        return op
    if isinstance(op, FockOperator):
        s = ModeSpec(op.space.total, 1)
        return OperatorSum(s, [KronTerm(1.0, ((0, op.matrix),))])
    raise TypeError(f"cannot convert {type(op).__name__} to OperatorSum")


# -- states -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantumState:
    space: ModeSpec
    kind: str
    data: np.ndarray
    validate: bool = True

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        n = self.space.total
        if self.kind == "pure":
            if data.shape != (n,):
                raise ValueError(f"pure state must have shape ({n},), got {data.shape}")
            if self.validate and abs(np.linalg.norm(data) - 1) > 1e-10:
                raise ValueError(f"state norm {np.linalg.norm(data)!r} != 1")
        elif self.kind == "density":
            if data.shape != (n, n):
                raise ValueError(f"density matrix must have shape ({n}, {n})")
            if self.validate:
                tr = np.trace(data).real
                if abs(tr - 1) > 1e-8:
                    raise ValueError(f"trace {tr!r} != 1")
                if hermiticity_error(data) > 1e-10:
                    raise ValueError("density matrix is not Hermitian")
                lo = np.linalg.eigvalsh(data)[0] if n <= 4096 else 0.0
                if lo < -1e-8:
                    raise ValueError(f"density matrix has eigenvalue {lo:.3e}")
        else:
            raise ValueError(f"unknown state kind {self.kind!r}")
        object.__setattr__(self, "data", data)

    @classmethod
    def pure(cls, space: ModeSpec, vec, normalize: bool = False) -> "QuantumState":
        vec = np.asarray(vec, dtype=complex)
        if normalize:
            vec = vec / np.linalg.norm(vec)
        return cls(space, "pure", vec)

    @classmethod
    def density(cls, space: ModeSpec, rho) -> "QuantumState":
        return cls(space, "density", rho)

    @property
    def is_pure(self) -> bool:
        return self.kind == "pure"

    def to_density(self) -> "QuantumState":
        if self.kind == "density":
            return self
        return QuantumState(self.space, "density", np.outer(self.data, self.data.conj()))

    def tensor(self, other: "QuantumState") -> "QuantumState":
        if self.space.dim != other.space.dim:
            raise SpaceMismatch("tensor product needs equal per-mode dimensions")
        space = ModeSpec(self.space.dim, self.space.n_modes + other.space.n_modes)
        if self.is_pure and other.is_pure:
            return QuantumState(space, "pure", np.kron(self.data, other.data))
        return QuantumState(space, "density",
                            np.kron(self.to_density().data, other.to_density().data))

    def reduced(self, keep: Sequence[int]) -> "QuantumState":
        """Partial trace onto the modes in ``keep`` (in the given order)."""
        s, d = self.space, self.space.dim
        keep = list(keep)
        traced = [k for k in range(s.n_modes) if k not in keep]
        sub = ModeSpec(d, len(keep))
        if self.is_pure:
            psi = self.data.reshape(s.shape).transpose(keep + traced).reshape(sub.total, -1)
            return QuantumState(sub, "density", psi @ psi.conj().T, validate=False)
        rho = self.data.reshape(s.shape * 2)
        perm = keep + traced
        rho = rho.transpose(perm + [p + s.n_modes for p in perm])
        m = d ** len(traced)
        rho = rho.reshape(sub.total, m, sub.total, m)
        return QuantumState(sub, "density", np.einsum("ajbj->ab", rho), validate=False)


def fock_state(space: ModeSpec, occupations: Sequence[int]) -> QuantumState:
    if len(occupations) != space.n_modes:
        raise ValueError("one occupation number per mode required")
    vec = np.zeros(space.total, dtype=complex)
    vec[np.ravel_multi_index(tuple(occupations), space.shape)] = 1.0
    return QuantumState(space, "pure", vec)


def coherent_amplitudes(alpha: complex, dim: int) -> np.ndarray:
    """Unnormalized truncated Fock amplitudes of |alpha>."""
    n = np.arange(dim)
    if alpha == 0:
        out = np.zeros(dim, dtype=complex)
        out[0] = 1.0
        return out
    r, phi = abs(alpha), np.angle(alpha)
    mag = np.exp(-r * r / 2 + n * np.log(r) - 0.5 * gammaln(n + 1))
    return mag * np.exp(1j * phi * n)


def coherent_state(space: ModeSpec, mode_amplitudes: Sequence[complex],
                   tail_tol: float = 1e-8) -> QuantumState:
    """Normalized product of truncated coherent states.

    Raises :class:`TruncationError` when the part of |alpha> cut off by the
    truncation reduces its norm by more than ``tail_tol``.
    """
    if len(mode_amplitudes) != space.n_modes:
        raise ValueError("one amplitude per mode required")
    vec = np.ones(1, dtype=complex)
    for alpha in mode_amplitudes:
        deficit = 1.0 - math.sqrt(1.0 - gammainc(space.dim, abs(alpha) ** 2))
        if deficit > tail_tol:
            raise TruncationError(
                f"dim={space.dim} too small for |alpha|={abs(alpha):.4g}: "
                f"norm deficit {deficit:.2e} > {tail_tol:.0e}"
            )
        c = coherent_amplitudes(alpha, space.dim)
        vec = np.kron(vec, c / np.linalg.norm(c))
    return QuantumState(space, "pure", vec)


# -- spectra and inner products ---------------------------------------------


def fix_phase(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component of each column real and positive."""
    vecs = np.array(vecs, dtype=complex, copy=True)
    idx = np.argmax(np.abs(vecs), axis=0)
    cols = np.arange(vecs.shape[1])
    ph = vecs[idx, cols]
    vecs *= (np.abs(ph) / ph)[None, :]
    return vecs


def eigendecompose_hermitian(op, k: int | None = None, which: str = "lowest",
                             sigma: float | None = None):
    """The ``k`` lowest (or highest) eigenpairs, eigenvalues ascending.

    Dense ``eigh`` is used up to ``DENSE_EIG_LIMIT``; beyond that the operator
    is assembled as a sparse matrix and the extremal eigenpairs are found by
    shift-invert Lanczos.
    """
    if which not in ("lowest", "highest"):
        raise ValueError(f"which must be 'lowest' or 'highest', got {which!r}")
    if isinstance(op, np.ndarray):
        op = FockOperator(ModeSpec(op.shape[0], 1), op)
    n = op.space.total
    k = n if k is None else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for dimension {n}")

    if isinstance(op, FockOperator) or n <= DENSE_EIG_LIMIT:
        m = op.matrix if isinstance(op, FockOperator) else op.to_sparse().toarray()
        dev = hermiticity_error(m)
        if dev > 1e-10 * max(1.0, np.abs(m).max()):
            raise ValueError(f"operator is not Hermitian (deviation {dev:.3e})")
        w, v = np.linalg.eigh(m)
        sl = slice(0, k) if which == "lowest" else slice(n - k, n)
        return w[sl], fix_phase(v[:, sl])

    h = op.to_sparse()
    dev = abs(h - h.getH()).max() if h.nnz else 0.0
    if dev > 1e-10 * max(1.0, abs(h).max()):
        raise ValueError(f"operator is not Hermitian (deviation {dev:.3e})")
    if sigma is None:
        edge = sparse_linalg.eigsh(h, k=1, which="LA" if which == "highest" else "SA",
                                   tol=1e-6, return_eigenvectors=False)[0]
        sigma = edge + (1e-2 if which == "highest" else -1e-2)
    w, v = sparse_linalg.eigsh(h.tocsc(), k=k, sigma=sigma, which="LM", tol=1e-12)
    order = np.argsort(w)
    return w[order], fix_phase(v[:, order])


def _state_data(state):
    return state.data if isinstance(state, QuantumState) else np.asarray(state)


def _op_apply(op, x):
    if isinstance(op, FockOperator):
        return op.matrix @ x
    if isinstance(op, OperatorSum):
        return op.apply(x)
    return np.asarray(op) @ x


def expectation(state: QuantumState, op) -> complex:
    _check_space(state.space, op.space)
    if state.is_pure:
        return complex(np.vdot(state.data, _op_apply(op, state.data)))
    return complex(np.trace(_op_apply(op, state.data)))


def matrix_element(bra: QuantumState, op, ket: QuantumState) -> complex:
    _check_space(bra.space, op.space, ket.space)
    if not (bra.is_pure and ket.is_pure):
        raise ValueError("matrix elements need pure states")
    return complex(np.vdot(bra.data, _op_apply(op, ket.data)))


def fidelity(a: QuantumState, b: QuantumState) -> float:
    """|<a|b>|^2, <a|rho|a>, or Uhlmann fidelity for two mixed states."""
    _check_space(a.space, b.space)
    if a.is_pure and b.is_pure:
        return float(abs(np.vdot(a.data, b.data)) ** 2)
    if a.is_pure:
        return float(np.real(np.vdot(a.data, b.data @ a.data)))
    if b.is_pure:
        return fidelity(b, a)
    # PSD square root via eigh; sqrtm loses accuracy on rank-deficient states
    w, v = np.linalg.eigh(a.data)
    s = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
    ev = np.linalg.eigvalsh(s @ b.data @ s)
    return float(np.sum(np.sqrt(np.clip(ev, 0, None))) ** 2)
