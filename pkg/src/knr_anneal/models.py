"""Time-dependent annealing Hamiltonians for driven Kerr resonators and qubits.

Every model is stored as

    H(t) = H_static + (1 - t/tau) * H_initial + (t/tau) * H_problem

where ``H_static`` holds the always-on pieces (Kerr terms, linear exchange,
four-body coupling, the fixed resonator). Energies are in units of K and
times in units of 1/K.

The Kerr term enters with a negative sign, so the coherent-state manifold
sits at the *top* of the spectrum; the annealed "ground" state is the lowest
level of that top band, not the lowest eigenvalue of H. Models record this
in ``band``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .fock import (
    FockOperator,
    KronTerm,
    ModeSpec,
    OperatorSum,
    QuantumState,
    coherent_state,
    fock_state,
    truncation_dim,
)

KINDS = ("single_spin", "two_spin", "plaquette", "plaquette_pinned",
         "qubit_two_spin", "qubit_lhz3")


@dataclass(frozen=True)
class KnrParams:
    """Resonator parameters, all in units of the Kerr constant K.

    ``E0`` is the single-photon drive: the local field on a single spin, or
    the per-resonator field ``J`` on a plaquette. ``J12`` is the linear
    exchange between two resonators and ``C`` the four-body coupling.
    """

    K: float = 1.0
    Ep: float = 4.0
    E0: float = 0.0
    delta0: float = 0.2
    C: float = 0.0
    J12: float = 0.0
    tau: float = 100.0

    def __post_init__(self):
        for name in ("K", "Ep", "E0", "delta0", "C", "J12", "tau"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.Ep < 0:
            raise ValueError("Ep must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.delta0 < self.K:
            raise ValueError(f"delta0 ({self.delta0}) must be smaller than K ({self.K})")
        a0 = self.alpha0
        if a0 > 0 and abs(self.E0) > 0.4 * self.K * a0**3:
            warnings.warn(
                f"|E0|={abs(self.E0):.3g} exceeds 0.4*K*alpha0^3={0.4 * self.K * a0**3:.3g}; "
                "the spin states will deviate from coherent states",
                stacklevel=2,
            )

    @property
    def alpha0(self) -> float:
        return math.sqrt(self.Ep / self.K)


@dataclass(frozen=True)
class QubitParams:
    U: float = 1.0
    J: float = 1.0
    C: float = 0.0
    tau: float = 100.0
    pinned_sz: float = -1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(eq=False)
class AnnealModel:
    kind: str
    space: ModeSpec
    params: object
    static: OperatorSum
    initial: OperatorSum
    problem: OperatorSum
    band: str = "highest"
    symmetry: np.ndarray | None = None
    manifold: int = 1
    fixed_modes: tuple = ()
    _init_state: QuantumState | None = field(default=None, repr=False)

    @property
    def tau(self) -> float:
        return self.params.tau

    def _s(self, t: float) -> float:
        tau = self.tau
        if t < -1e-12 * tau or t > tau * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, tau={tau}]")
        return min(max(t / tau, 0.0), 1.0)

    def hamiltonian(self, t: float) -> OperatorSum:
        s = self._s(t)
        return self.static + (1.0 - s) * self.initial + s * self.problem

    def dense(self, t: float) -> FockOperator:
        return self.hamiltonian(t).to_dense().as_hermitian()

    @property
    def frame_diagonal(self) -> np.ndarray:
        """Time-independent diagonal of H, used as the interaction-picture frame."""
        return self.static.diagonal_part.real.copy()

    def apply(self, t: float, x: np.ndarray, skip_frame: bool = False) -> np.ndarray:
        """H(t) @ x from cached off-diagonal CSR parts; optionally drop the static diagonal."""
        s = self._s(t)
        diag = (1.0 - s) * self.initial.diagonal_part + s * self.problem.diagonal_part
        if not skip_frame:
            diag = diag + self.static.diagonal_part
        y = diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        flat = x.reshape(x.shape[0], -1)
        out = y.reshape(flat.shape)
        out += self.static.offdiagonal_sparse @ flat
        # the cached CSR products beat per-term Kronecker contractions by ~5x
        if s != 1.0:
            out += (1.0 - s) * (self.initial.offdiagonal_sparse @ flat)
        if s != 0.0:
            out += s * (self.problem.offdiagonal_sparse @ flat)
        return y

    def initial_state(self) -> QuantumState:
        return self._init_state

    def with_tau(self, tau: float) -> "AnnealModel":
        return replace(self, params=replace(self.params, tau=float(tau)))


# -- single-mode building blocks ---------------------------------------------


def _ops(d: int):
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1).astype(complex)
    ad = a.conj().T
    n = np.diag(np.arange(d, dtype=complex))
    kerr = ad @ ad @ a @ a
    return a, ad, n, kerr


def _resolve_dim(params: KnrParams, dim: int | None) -> int:
    return truncation_dim(params.alpha0) if dim is None else int(dim)


def _parity_diag(space: ModeSpec) -> np.ndarray:
    occ = np.indices(space.shape).reshape(space.n_modes, -1).sum(axis=0)
    return (-1.0) ** occ


# -- resonator models --------------------------------------------------------


def h_single(params: KnrParams, dim: int | None = None) -> AnnealModel:
    """Single driven Kerr resonator annealed from the vacuum.

    (1-s)(delta0 n - K a+^2 a^2) + s(-K a+^2 a^2 + Ep(a+^2 + a^2) + E0(a+ + a))
    """
    space = ModeSpec(_resolve_dim(params, dim), 1)
    a, ad, n, kerr = _ops(space.dim)
    static = OperatorSum(space, hermitian=True).add(-params.K, (0, kerr))
    initial = OperatorSum(space, hermitian=True).add(params.delta0, (0, n))
    drive = params.Ep * (ad @ ad + a @ a) + params.E0 * (ad + a)
    problem = OperatorSum(space, hermitian=True).add(1.0, (0, drive))
    sym = _parity_diag(space) if params.E0 == 0 else None
    return AnnealModel("single_spin", space, params, static, initial, problem,
                       symmetry=sym, _init_state=fock_state(space, [0]))


def h_two_spin(params: KnrParams, dim: int | None = None) -> AnnealModel:
    """Two resonators with always-on exchange ``J12 (a1+ a2 + a2+ a1)``."""
    if not params.delta0 > abs(params.J12):
        raise ValueError("two-spin anneal needs delta0 > |J12| for a vacuum ground state")
    space = ModeSpec(_resolve_dim(params, dim), 2)
    a, ad, n, kerr = _ops(space.dim)
    static = OperatorSum(space, hermitian=True)
    for k in range(2):
        static.add(-params.K, (k, kerr))
    if params.J12:
        static.add_with_hc(params.J12, (0, ad), (1, a))
    initial = OperatorSum(space, hermitian=True)
    problem = OperatorSum(space, hermitian=True)
    for k in range(2):
        initial.add(params.delta0, (k, n))
        problem.add(params.Ep, (k, ad @ ad + a @ a))
    return AnnealModel("two_spin", space, params, static, initial, problem,
                       symmetry=_parity_diag(space), manifold=1,
                       _init_state=fock_state(space, [0, 0]))


def h_plaquette(params: KnrParams, dim: int | None = None,
                pinned: bool = False) -> AnnealModel:
    """Four-resonator plaquette; mode 3 (0-based) is the fixed resonator.

    With ``pinned=True`` the fixed resonator is replaced by its amplitude
    alpha0 inside the four-body term, leaving a three-mode model.
    The target manifold is the three frustrated solutions.
    """
    d = _resolve_dim(params, dim)
    K, Ep, J, C, a0 = params.K, params.Ep, params.E0, params.C, params.alpha0
    n_modes = 3 if pinned else 4
    space = ModeSpec(d, n_modes)
    a, ad, n, kerr = _ops(d)
    static = OperatorSum(space, hermitian=True)
    initial = OperatorSum(space, hermitian=True)
    problem = OperatorSum(space, hermitian=True)
    for k in range(3):
        static.add(-K, (k, kerr))
        initial.add(params.delta0, (k, n))
        problem.add(1.0, (k, Ep * (ad @ ad + a @ a) + J * (ad + a)))
    if pinned:
        if C:
            static.add_with_hc(-C * a0, (0, ad), (1, ad), (2, a))
        init = fock_state(space, [0, 0, 0])
        fixed = ((3, a0),)
    else:
        static.add(-K, (3, kerr))
        static.add(Ep, (3, ad @ ad + a @ a))
        if C:
            static.add_with_hc(-C, (0, ad), (1, ad), (2, a), (3, a))
        one = ModeSpec(d, 1)
        init = fock_state(ModeSpec(d, 3), [0, 0, 0]).tensor(coherent_state(one, [a0]))
        fixed = ()
    kind = "plaquette_pinned" if pinned else "plaquette"
    return AnnealModel(kind, space, params, static, initial, problem,
                       manifold=3, fixed_modes=fixed, _init_state=init)


def fixed_resonator(params: KnrParams, dim: int | None = None) -> FockOperator:
    """The time-independent Hamiltonian of the plaquette's fixed resonator."""
    space = ModeSpec(_resolve_dim(params, dim), 1)
    a, ad, n, kerr = _ops(space.dim)
    return FockOperator(space, -params.K * kerr + params.Ep * (ad @ ad + a @ a),
                        hermitian=True)


# -- qubit baseline ------------------------------------------------------------

SX = np.array([[0, 1], [1, 0]], dtype=complex)
# basis order (|g>, |e>); sigma_z = |e><e| - |g><g|
SZ = np.diag([-1.0, 1.0]).astype(complex)


def _symmetrizer(n: int) -> np.ndarray:
    """Projector onto the permutation-symmetric subspace of ``n`` qubits."""
    idx = np.arange(2**n).reshape((2,) * n)
    perms = list(itertools.permutations(range(n)))
    out = np.zeros((2**n, 2**n))
    for perm in perms:
        out[idx.transpose(perm).ravel(), np.arange(2**n)] += 1.0
    return out / len(perms)


def h_qubit_baseline(params: QubitParams, kind: str = "qubit_two_spin") -> AnnealModel:
    """Transverse-field qubit annealer used as the dephasing baseline.

    ``qubit_two_spin``: U(sx1 + sx2) -> J sz1 sz2.
    ``qubit_lhz3``: U sum sx -> J sum sz + C sz1 sz2 sz3 sz4 with spin 4
    frozen at ``pinned_sz`` and therefore folded into a three-body term.
    """
    if kind not in ("qubit_two_spin", "qubit_lhz3"):
        raise ValueError(f"invalid qubit baseline kind {kind!r}")
    n_q = 2 if kind == "qubit_two_spin" else 3
    space = ModeSpec(2, n_q)
    static = OperatorSum(space, hermitian=True)
    initial = OperatorSum(space, hermitian=True)
    problem = OperatorSum(space, hermitian=True)
    for k in range(n_q):
        initial.add(params.U, (k, SX))
    if kind == "qubit_two_spin":
        problem.add(params.J, (0, SZ), (1, SZ))
        flip = np.ones((1, 1))
        for _ in range(n_q):
            flip = np.kron(flip, SX)
        sym, manifold = flip.real, 1
    else:
        for k in range(n_q):
            problem.add(params.J, (k, SZ))
        problem.add(params.C * params.pinned_sz, (0, SZ), (1, SZ), (2, SZ))
        # H and the initial state are invariant under qubit permutations; in the
        # symmetric sector the frustrated triple contributes a single level
        sym, manifold = _symmetrizer(n_q), 1
    minus = np.array([1.0, -1.0]) / math.sqrt(2)
    plus = np.array([1.0, 1.0]) / math.sqrt(2)
    single = minus if params.U >= 0 else plus
    vec = np.ones(1)
    for _ in range(n_q):
        vec = np.kron(vec, single)
    return AnnealModel(kind, space, params, static, initial, problem, band="lowest",
                       symmetry=sym, manifold=manifold,
                       fixed_modes=((3, params.pinned_sz),) if n_q == 3 else (),
                       _init_state=QuantumState.pure(space, vec))


def build_model(kind: str, params, dim: int | None = None) -> AnnealModel:
    if kind == "single_spin":
        return h_single(params, dim)
    if kind == "two_spin":
        return h_two_spin(params, dim)
    if kind == "plaquette":
        return h_plaquette(params, dim)
    if kind == "plaquette_pinned":
        return h_plaquette(params, dim, pinned=True)
    if kind in ("qubit_two_spin", "qubit_lhz3"):
        return h_qubit_baseline(params, kind)
    raise ValueError(f"unknown model kind {kind!r}")


# -- classical metapotential ---------------------------------------------------


def metapotential(x, y, params: KnrParams, with_single_drive: bool = True, s: float = 1.0):
    """Classical energy from a -> x + iy in the normal-ordered H at t = s*tau.

    At s = 1 this is -K(x^2+y^2)^2 + 2Ep(x^2-y^2) + 2E0 x.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = x * x + y * y
    e = (1.0 - s) * params.delta0 * r2 - params.K * r2 * r2 + s * 2 * params.Ep * (x * x - y * y)
    if with_single_drive:
        e = e + s * 2 * params.E0 * x
    return e


def metapotential_gradient(x, y, params: KnrParams, with_single_drive: bool = True,
                           s: float = 1.0):
    r2 = x * x + y * y
    d0 = (1.0 - s) * params.delta0
    gx = 2 * d0 * x - 4 * params.K * r2 * x + 4 * s * params.Ep * x
    gy = 2 * d0 * y - 4 * params.K * r2 * y - 4 * s * params.Ep * y
    if with_single_drive:
        gx = gx + 2 * s * params.E0
    return np.array([gx, gy])


def metapotential_peaks(params: KnrParams, with_single_drive: bool = True, s: float = 1.0):
    """The two outer maxima on the x axis, as [(x, y, E)] ordered by x.

    The y-gradient vanishes on y = 0, where the x-gradient is a cubic; its
    outermost real roots are the peaks (the quartic term dominates far out).
    """
    d0 = (1.0 - s) * params.delta0
    drive = 2 * s * params.E0 if with_single_drive else 0.0
    roots = np.roots([-4 * params.K, 0.0, 2 * d0 + 4 * s * params.Ep, drive])
    real = np.sort(roots[np.abs(roots.imag) <= 1e-9 * (1 + np.abs(roots))].real)
    if len(real) < 2 or real[0] >= 0 or real[-1] <= 0:
        raise RuntimeError("metapotential has a single maximum for these parameters")
    peaks = []
    for x in (real[0], real[-1]):
        # one Newton polish step on the cubic
        g = metapotential_gradient(x, 0.0, params, with_single_drive, s)[0]
        dg = 2 * d0 - 12 * params.K * x * x + 4 * s * params.Ep
        x = float(x - g / dg)
        peaks.append((x, 0.0, float(metapotential(x, 0.0, params, with_single_drive, s))))
    return peaks


# -- effective spin parameters -------------------------------------------------


def effective_two_spin_coupling(params: KnrParams) -> float:
    """Coupling of the projected sz sz Hamiltonian: <a,a|J(a1+ a2 + h.c.)|a,a> = 2 J alpha0^2."""
    return 2.0 * params.J12 * params.alpha0**2


def effective_plaquette_fields(params: KnrParams) -> tuple[float, float]:
    """Local field 2 J alpha0 and constraint strength 2 C alpha0^4 on the coherent manifold."""
    a0 = params.alpha0
    return 2.0 * params.E0 * a0, 2.0 * params.C * a0**4
