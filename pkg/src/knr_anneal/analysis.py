"""Spectra, gaps, transition elements, Wigner functions and success metrics."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.sparse import linalg as sparse_linalg

from .dynamics import (CollapseSet, EvolutionConfig, check_dense_budget, evolve_lindblad,
                       evolve_trajectories, evolve_unitary, DimensionBudgetError)
from .fock import (DENSE_EIG_LIMIT, ModeSpec, QuantumState, coherent_amplitudes,
                   eigendecompose_hermitian, fix_phase,
                   hermiticity_error)
from .models import (AnnealModel, KnrParams, QubitParams, build_model,
                     effective_plaquette_fields, effective_two_spin_coupling)


class GridError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


# -- spectra -------------------------------------------------------------------------


@dataclass(eq=False)
class SpectrumTrace:
    """Levels of H(t) around the adiabatically followed state.

    ``levels`` holds the ``k`` eigenvalues of the model's band (the top of the
    spectrum for resonator models, the bottom for qubits), ascending per row.
    ``tracked`` is the column of the followed state; ``gap`` is measured from
    it to the first level above its ``manifold``-fold final manifold.
    """

    times: np.ndarray
    levels: np.ndarray
    tracked: np.ndarray
    gap: np.ndarray
    min_gap: float
    t_min: float
    manifold: int
    sector_dim: int
    min_overlap: float = 1.0  # worst overlap between consecutive followed eigenvectors


def _sector(model: AnnealModel) -> np.ndarray | None:
    """The symmetry sector holding the initial state.

    ``model.symmetry`` is either the diagonal of a diagonal symmetry (parity),
    giving basis indices, or a full unitary matrix, giving an orthonormal
    basis as columns. None when there is no symmetry or the initial state is
    not an eigenstate of it.
    """
    sym = model.symmetry
    if sym is None:
        return None
    psi = model.initial_state().data
    if sym.ndim == 1:
        support = np.abs(psi) > 1e-12
        vals = np.unique(np.round(sym[support].real, 9))
        if len(vals) != 1:
            return None
        return np.nonzero(np.isclose(sym.real, vals[0]))[0]
    w, v = np.linalg.eigh(0.5 * (sym + sym.conj().T))
    lam = np.vdot(psi, sym @ psi).real
    if np.linalg.norm(sym @ psi - lam * psi) > 1e-9:
        return None
    return v[:, np.isclose(w, lam, atol=1e-9)]


class _BandSolver:
    def __init__(self, model: AnnealModel, k: int):
        self.model = model
        sec = _sector(model)
        self.idx = sec if sec is not None and sec.ndim == 1 else None
        self.W = sec if sec is not None and sec.ndim == 2 else None
        n = model.space.total if sec is None else sec.shape[-1] if sec.ndim == 2 else len(sec)
        self.n = n
        self.k = min(k, n)
        self.highest = model.band == "highest"
        self._parts = [self._restrict(p.to_sparse()) for p in
                       (model.static, model.initial, model.problem)]

    def _restrict(self, m):
        m = m.tocsr()
        if self.idx is not None:
            return m[self.idx][:, self.idx]
        if self.W is not None:
            return sparse.csr_matrix(self.W.conj().T @ (m @ self.W))
        return m

    def matrix(self, t: float):
        s = self.model._s(t)
        a, b, c = self._parts
        return a + (1.0 - s) * b + s * c

    def eig(self, t: float):
        m = self.matrix(t)
        if self.n <= DENSE_EIG_LIMIT:
            d = m.toarray()
            if hermiticity_error(d) > 1e-10 * max(1.0, np.abs(d).max()):
                raise ValueError("Hamiltonian is not Hermitian")
            w, v = np.linalg.eigh(0.5 * (d + d.conj().T))
            sl = slice(self.n - self.k, self.n) if self.highest else slice(0, self.k)
            return w[sl], fix_phase(v[:, sl])
        # ARPACK can return a spurious duplicate instead of a level of a decoupled block
        # (seen at t=0, where H is block diagonal); retry with a wider basis, then go dense
        rng = np.random.default_rng(0)
        v0 = rng.normal(size=m.shape[0]) + (0j if np.iscomplexobj(m.data) else 0.0)
        for ncv in (max(2 * self.k + 1, 40), max(4 * self.k + 1, 100)):
            try:
                w, v = sparse_linalg.eigsh(m, k=self.k, which="LA" if self.highest else "SA",
                                           tol=1e-12, ncv=min(ncv, self.n), v0=v0)
            except sparse_linalg.ArpackError as exc:
                raise RuntimeError(f"eigensolver failed at t={t:.6g}: {exc}") from exc
            if np.abs(v.conj().T @ v - np.eye(self.k)).max() < 1e-8:
                order = np.argsort(w)
                return w[order], fix_phase(v[:, order])
        d = m.toarray()
        lo = self.n - self.k if self.highest else 0
        w, v = linalg.eigh(0.5 * (d + d.conj().T), subset_by_index=[lo, lo + self.k - 1])
        return w, fix_phase(v)

    def initial_vector(self) -> np.ndarray:
        psi = self.model.initial_state().data
        if self.idx is not None:
            return psi[self.idx]
        return psi if self.W is None else self.W.conj().T @ psi


def golden_section(f, a: float, b: float, xtol: float) -> tuple[float, float]:
    """Minimize a unimodal ``f`` on [a, b]; returns (x, f(x))."""
    r = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def spectrum_trace(model: AnnealModel, k: int = 8, n_samples: int = 201,
                   refine: bool = True) -> SpectrumTrace:
    """Eigenvalues along the schedule, the followed level and the minimum gap.

    The followed level starts as the eigenstate with the largest overlap with
    the initial state and is continued by maximal eigenvector overlap. When
    the model carries a symmetry (parity with no single-photon drives) the
    calculation is restricted to the sector of the initial state.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    solver = _BandSolver(model, k)
    m = model.manifold
    times = model.tau * np.linspace(0.0, 1.0, n_samples)
    levels = np.empty((n_samples, solver.k))
    tracked = np.empty(n_samples, dtype=int)
    prev = solver.initial_vector()
    worst = 1.0
    for i, t in enumerate(times):
        w, v = solver.eig(t)
        ov = np.abs(prev.conj() @ v)
        j = int(np.argmax(ov))
        worst = min(worst, float(ov[j]))
        # inside an exactly degenerate cluster the eigenvectors are arbitrary; use its bottom
        tol = 1e-9 * max(1.0, abs(w[j]))
        while j > 0 and w[j] - w[j - 1] <= tol:
            j -= 1
        if j + m >= solver.k:
            raise ValueError(f"followed level {j} has no level {m} above it among k={solver.k}; "
                             "increase k")
        levels[i], tracked[i], prev = w, j, v[:, j]
    rows = np.arange(n_samples)
    gap = levels[rows, tracked + m] - levels[rows, tracked]
    i0 = int(np.argmin(gap))
    min_gap, t_min = float(gap[i0]), float(times[i0])
    if refine and 0 < i0 < n_samples - 1:
        j = tracked[i0]

        def f(t):
            w, _ = solver.eig(t)
            return w[j + m] - w[j]

        t_best, g_best = golden_section(f, times[i0 - 1], times[i0 + 1],
                                        xtol=1e-7 * model.tau)
        if g_best < min_gap:
            min_gap, t_min = float(g_best), float(t_best)
    return SpectrumTrace(times, levels, tracked, gap, min_gap, t_min, m, solver.n, worst)


def degeneracy_splitting(params: KnrParams, dim: int | None = None) -> float:
    """Splitting of the top two levels of the final single-spin Hamiltonian.

    Without E0 the pair |+-alpha0> is exactly degenerate; E0 lifts it by
    about 4 E0 alpha0.
    """
    m = build_model("single_spin", params, dim)
    w, _ = eigendecompose_hermitian(m.dense(m.tau), k=2, which="highest")
    return float(w[1] - w[0])


@dataclass(eq=False)
class TransitionTrace:
    times: np.ndarray
    g_to_e: np.ndarray
    e_to_g: np.ndarray
    ambiguous: np.ndarray


def transition_elements(model: AnnealModel, n_samples: int = 201,
                        degeneracy_tol: float = 1e-8) -> TransitionTrace:
    """|<e|a|g>| and |<g|a|e>| between the followed state and the level above it.

    Samples where the two levels are closer than ``degeneracy_tol`` or the
    overlap continuation is weak are flagged in ``ambiguous``.
    """
    if model.space.n_modes != 1:
        raise ValueError("transition elements are defined for single-mode models")
    d = model.space.dim
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1)
    times = model.tau * np.linspace(0.0, 1.0, n_samples)
    ge, eg = np.empty(n_samples), np.empty(n_samples)
    amb = np.zeros(n_samples, dtype=bool)
    prev = model.initial_state().data
    for i, t in enumerate(times):
        h = model.dense(t).matrix
        w, v = np.linalg.eigh(h)
        v = fix_phase(v)
        ov = np.abs(prev.conj() @ v)
        j = int(np.argmax(ov))
        # inside an exactly degenerate cluster the eigenvectors are arbitrary; use its bottom
        tol = 1e-9 * max(1.0, abs(w[j]))
        while j > 0 and w[j] - w[j - 1] <= tol:
            j -= 1
        if j + 1 >= d:
            raise ValueError("followed level is the top of the truncated spectrum")
        g, e = v[:, j], v[:, j + 1]
        ge[i] = abs(e.conj() @ a @ g)
        eg[i] = abs(g.conj() @ a @ e)
        amb[i] = (w[j + 1] - w[j] < degeneracy_tol) or ov[j] < 0.5
        prev = g
    return TransitionTrace(times, ge, eg, amb)


# -- Wigner function -----------------------------------------------------------------


@dataclass(frozen=True)
class WignerGrid:
    x_range: tuple[float, float] = (-5.0, 5.0)
    p_range: tuple[float, float] = (-5.0, 5.0)
    n_points: int = 201

    def axes(self):
        return (np.linspace(*self.x_range, self.n_points),
                np.linspace(*self.p_range, self.n_points))


def wigner(state, grid: WignerGrid = WignerGrid(), check: bool = True):
    """Wigner function W(x, p) of a single-mode state.

    Quadratures follow a = (x + i p)/sqrt(2), so the vacuum is
    exp(-x^2 - p^2)/pi and |alpha> is centred at sqrt(2)(Re alpha, Im alpha).
    Evaluated with the Laguerre recurrence for the displaced-parity matrix
    elements. Returns ``(x, p, W)`` with ``W[i, j] = W(x_j, p_i)``.
    """
    if isinstance(state, QuantumState):
        if state.space.n_modes != 1:
            raise ValueError("wigner needs a single-mode state; pass state.reduced([mode])")
        rho = state.to_density().data
    else:
        arr = np.asarray(state, dtype=complex)
        rho = np.outer(arr, arr.conj()) if arr.ndim == 1 else arr
    x, p = grid.axes()
    X, P = np.meshgrid(x, p)
    A2 = np.sqrt(2.0) * (X + 1j * P)  # 2 * beta
    M = rho.shape[0]
    w_list = [np.exp(-0.5 * np.abs(A2) ** 2) / np.pi] + [None] * (M - 1)
    W = rho[0, 0].real * w_list[0]
    for n in range(1, M):
        w_list[n] = A2 * w_list[n - 1] / math.sqrt(n)
        W = W + 2 * np.real(rho[0, n] * w_list[n])
    for m in range(1, M):
        temp = w_list[m]
        w_list[m] = (np.conj(A2) * temp - math.sqrt(m) * w_list[m - 1]) / math.sqrt(m)
        W = W + np.real(rho[m, m] * w_list[m])
        for n in range(m + 1, M):
            temp2 = (A2 * w_list[n - 1] - math.sqrt(m) * temp) / math.sqrt(n)
            temp = w_list[n]
            w_list[n] = temp2
            W = W + 2 * np.real(rho[m, n] * w_list[n])
    W = W.real
    if check:
        total = np.trapezoid(np.trapezoid(W, x, axis=1), p)
        if abs(total - 1.0) > 1e-3:
            raise GridError(f"Wigner function integrates to {total:.6f} on this grid; "
                            "widen the range or add points")
    return x, p, W


# -- readout ---------------------------------------------------------------------------


def lowdin_pair(alpha0: float, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrically orthogonalized (|-alpha0>, |alpha0>) = (|0bar>, |1bar>)."""
    c0 = coherent_amplitudes(-alpha0, dim)
    c1 = coherent_amplitudes(alpha0, dim)
    c0, c1 = c0 / np.linalg.norm(c0), c1 / np.linalg.norm(c1)
    B = np.stack([c0, c1], axis=1)
    S = B.conj().T @ B
    w, U = np.linalg.eigh(S)
    B = B @ (U @ np.diag(w ** -0.5) @ U.conj().T)
    return B[:, 0], B[:, 1]


@dataclass(eq=False)
class SpinReadout:
    """Ideal projective readout of each spin onto an orthonormal pair (|0bar>, |1bar>).

    Outcome index ``sum_k b_k 2^(n-1-k)`` over the read modes in increasing
    order, so bit strings read left to right in mode order.
    """

    space: ModeSpec
    modes: tuple[int, ...]
    basis: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if list(self.modes) != sorted(set(self.modes)):
            raise ValueError("read modes must be distinct and increasing")
        u0, u1 = self.basis
        if abs(np.vdot(u0, u1)) > 1e-12:
            raise ValueError("readout pair must be orthogonal")
        self._U = np.stack([u0.conj(), u1.conj()])  # (2, d)

    @classmethod
    def knr(cls, space: ModeSpec, alpha0: float, modes=None) -> "SpinReadout":
        modes = tuple(range(space.n_modes)) if modes is None else tuple(modes)
        return cls(space, modes, lowdin_pair(alpha0, space.dim))

    @classmethod
    def qubit(cls, space: ModeSpec, modes=None) -> "SpinReadout":
        modes = tuple(range(space.n_modes)) if modes is None else tuple(modes)
        return cls(space, modes, (np.array([1.0, 0.0], complex), np.array([0.0, 1.0], complex)))

    @property
    def n_outcomes(self) -> int:
        return 2 ** len(self.modes)

    def projectors(self) -> tuple[np.ndarray, np.ndarray]:
        u0, u1 = self.basis
        return np.outer(u0, u0.conj()), np.outer(u1, u1.conj())

    def populations_batch(self, psi: np.ndarray) -> np.ndarray:
        """Outcome populations for states stacked as columns, shape (B, 2^n)."""
        B = psi.shape[1]
        X = psi.reshape(self.space.shape + (B,))
        for mode in self.modes:
            X = np.moveaxis(np.tensordot(self._U, X, axes=(1, mode)), 0, mode)
        P = np.abs(X) ** 2
        unread = tuple(k for k in range(self.space.n_modes) if k not in self.modes)
        if unread:
            P = P.sum(axis=unread)
        return P.reshape(self.n_outcomes, B).T

    def populations_density(self, rho: np.ndarray) -> np.ndarray:
        n = self.space.n_modes
        X = rho.reshape(self.space.shape * 2)
        for mode in self.modes:
            X = np.moveaxis(np.tensordot(self._U, X, axes=(1, mode)), 0, mode)
            X = np.moveaxis(np.tensordot(self._U.conj(), X, axes=(1, n + mode)), 0, n + mode)
        letters = "abcdefghijkl"[:n]
        out = "".join(letters[k] for k in self.modes)
        return np.einsum(f"{letters}{letters}->{out}", X).real.reshape(self.n_outcomes)

    def populations(self, state: QuantumState) -> np.ndarray:
        if state.space != self.space:
            raise ValueError("readout and state spaces differ")
        if state.is_pure:
            return self.populations_batch(state.data[:, None])[0]
        return self.populations_density(state.data)


@dataclass(frozen=True)
class Scenario:
    """Correct outcome set and optional target superposition for one anneal."""

    name: str
    n_spins: int
    correct: frozenset
    target: tuple = ()  # ((bitstring, amplitude), ...)

    def __post_init__(self):
        for b in self.correct:
            if len(b) != self.n_spins or set(b) - {"0", "1"}:
                raise ValueError(f"bad outcome {b!r} for {self.n_spins} spins")

    def indices(self) -> list[int]:
        return sorted(int(b, 2) for b in self.correct)


def scenario_for(model: AnnealModel) -> Scenario:
    """The correct outcomes implied by the model's problem Hamiltonian."""
    p = model.params
    kind = model.kind
    if kind == "single_spin":
        if p.E0 > 0:
            return Scenario(kind, 1, frozenset({"0"}))
        if p.E0 < 0:
            return Scenario(kind, 1, frozenset({"1"}))
        return Scenario(kind, 1, frozenset({"0", "1"}), (("0", 1.0), ("1", 1.0)))
    if kind in ("two_spin", "qubit_two_spin"):
        J = p.J12 if kind == "two_spin" else p.J
        if J == 0:
            raise ValueError("two-spin scenario needs a nonzero coupling")
        pair = ("01", "10") if J > 0 else ("00", "11")
        return Scenario(f"{kind}_{'afm' if J > 0 else 'fm'}", 2, frozenset(pair),
                        tuple((b, 1.0) for b in pair))
    if kind in ("plaquette", "plaquette_pinned", "qubit_lhz3"):
        return Scenario(kind, 3, frozenset({"100", "010", "001"}))
    raise ValueError(f"no scenario defined for model kind {kind!r}")


def readout_for(model: AnnealModel) -> SpinReadout:
    if model.kind.startswith("qubit"):
        return SpinReadout.qubit(model.space)
    modes = [k for k in range(model.space.n_modes)
             if k not in {m for m, _ in model.fixed_modes}]
    if model.kind == "plaquette":
        modes = [0, 1, 2]
    return SpinReadout.knr(model.space, model.params.alpha0, modes)


def target_state(model: AnnealModel, scenario: Scenario) -> np.ndarray | None:
    """Normalized superposition of computational product states, or None.

    Resonator spins use the bare coherent states |-alpha0>, |alpha0>.
    """
    if not scenario.target:
        return None
    d = model.space.dim
    if model.kind.startswith("qubit"):
        single = {"0": np.array([1.0, 0.0], complex), "1": np.array([0.0, 1.0], complex)}
    else:
        a0 = model.params.alpha0
        c0, c1 = coherent_amplitudes(-a0, d), coherent_amplitudes(a0, d)
        single = {"0": c0 / np.linalg.norm(c0), "1": c1 / np.linalg.norm(c1)}
    vec = np.zeros(model.space.total, dtype=complex)
    for bits, amp in scenario.target:
        v = np.ones(1, dtype=complex)
        for b in bits:
            v = np.kron(v, single[b])
        vec += amp * v
    return vec / np.linalg.norm(vec)


@dataclass(eq=False)
class SuccessReport:
    success: float
    populations: np.ndarray
    leakage: float
    subspace: float


def success_probability(state: QuantumState, scenario: Scenario,
                        readout: SpinReadout) -> SuccessReport:
    if scenario.n_spins != len(readout.modes):
        raise ValueError("scenario and readout disagree on the number of spins")
    pops = readout.populations(state)
    sub = float(pops.sum())
    return SuccessReport(float(pops[scenario.indices()].sum()), pops, 1.0 - sub, sub)


# -- anneal runner ---------------------------------------------------------------------


@dataclass(eq=False)
class AnnealResult:
    times: np.ndarray
    populations: np.ndarray          # (n_times, 2^n)
    leakage: np.ndarray              # (n_times,)
    mean_photons: np.ndarray         # (n_times, n_modes)
    fidelity: np.ndarray | None      # (n_times,) overlap with the scenario target
    success: float
    subspace: float
    solver: str
    scenario: Scenario
    stderr: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    final: QuantumState | None = None


def choose_solver(model: AnnealModel, rate: float, solver: str = "auto") -> str:
    if solver not in ("auto", "unitary", "lindblad", "traj"):
        raise ValueError(f"unknown solver {solver!r}")
    if solver != "auto":
        return solver
    if rate == 0:
        return "unitary"
    try:
        check_dense_budget(model.space)
        return "lindblad"
    except DimensionBudgetError:
        return "traj"


def collapse_for(model: AnnealModel, rate: float, include_fixed: bool = False) -> CollapseSet:
    """Photon loss on the annealed resonators, or dephasing on every qubit."""
    if model.kind.startswith("qubit"):
        return CollapseSet.dephasing(model.space, range(model.space.n_modes), rate)
    fixed = {m for m, _ in model.fixed_modes}
    if model.kind == "plaquette" and not include_fixed:
        fixed.add(3)
    modes = [k for k in range(model.space.n_modes) if k not in fixed]
    return CollapseSet.photon_loss(model.space, modes, rate)


class _PureObs:
    """Picklable observable bundle for pure-state solvers."""

    def __init__(self, readout, nums, target, correct):
        self.readout, self.nums, self.target, self.correct = readout, nums, target, correct

    def pops(self, psi):
        return self.readout.populations_batch(psi)

    def photons(self, psi):
        p = np.abs(psi) ** 2
        return (self.nums.T @ p).T

    def fid(self, psi):
        return np.abs(self.target.conj() @ psi) ** 2

    def succ(self, psi):
        return self.readout.populations_batch(psi)[:, self.correct].sum(axis=1)


def _number_diagonals(space: ModeSpec) -> np.ndarray:
    out = np.empty((space.total, space.n_modes))
    grids = np.indices(space.shape).reshape(space.n_modes, -1)
    for k in range(space.n_modes):
        out[:, k] = grids[k]
    return out


def run_anneal(model: AnnealModel, scenario: Scenario | None = None, rate: float = 0.0,
               solver: str = "auto", config: EvolutionConfig | None = None,
               include_fixed_loss: bool = False) -> AnnealResult:
    """Anneal from the model's initial state and read out the spins.

    ``rate`` is the photon-loss rate for resonator models and the pure
    dephasing rate for qubit models.
    """
    config = config or EvolutionConfig()
    scenario = scenario or scenario_for(model)
    readout = readout_for(model)
    target = target_state(model, scenario)
    nums = _number_diagonals(model.space)
    which = choose_solver(model, rate, solver)
    collapse = collapse_for(model, rate, include_fixed_loss)
    psi0 = model.initial_state()
    if which in ("unitary", "traj"):
        ob = _PureObs(readout, nums, target, scenario.indices())
        obs = {"pops": ob.pops, "n": ob.photons, "succ": ob.succ}
        if target is not None:
            obs["fid"] = ob.fid
        if which == "unitary":
            if rate > 0:
                raise ValueError("the unitary solver cannot include loss")
            ev = evolve_unitary(model, psi0, config, obs)
            o = {k: v for k, v in ev.observables.items()}
            stderr, stats, final = {}, ev.stats, ev.final
        else:
            ens = evolve_trajectories(model, psi0, collapse, config, obs)
            o, stderr, stats, final = ens.mean, ens.stderr, ens.stats, None
    else:
        def pops(r):
            return readout.populations_density(r)

        def photons(r):
            return nums.T @ np.diag(r).real

        obs = {"pops": pops, "n": photons}
        if target is not None:
            obs["fid"] = lambda r: float((target.conj() @ r @ target).real)
        ev = evolve_lindblad(model, psi0.to_density(), collapse, config, obs)
        o, stderr, stats, final = ev.observables, {}, ev.stats, ev.final
    pops_t = np.asarray(o["pops"])
    idx = scenario.indices()
    success = float(pops_t[-1, idx].sum())
    res = AnnealResult(times=config.times(model.tau), populations=pops_t,
                       leakage=1.0 - pops_t.sum(axis=1), mean_photons=np.asarray(o["n"]),
                       fidelity=np.asarray(o["fid"]) if "fid" in o else None,
                       success=success, subspace=float(pops_t[-1].sum()), solver=which,
                       scenario=scenario, stats=stats, final=final)
    if stderr:
        res.stderr = {"populations": np.asarray(stderr["pops"]),
                      "success": float(np.asarray(stderr["succ"])[-1])}
        if "fid" in stderr:
            res.stderr["fidelity"] = np.asarray(stderr["fid"])
    return res


# -- qubit calibration and loss sweeps ------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    params: QubitParams
    delta_min: float
    scaled: bool


def qubit_delta_min(kind: str, params: QubitParams) -> float:
    """Minimum gap, or nan when the followed level leaves the target manifold.

    That happens when U is so large that the avoided crossing falls between
    two samples of the grid.
    """
    tr = spectrum_trace(build_model(kind, params), k=8, n_samples=201)
    lost = tr.tracked[-1] >= tr.manifold or tr.min_overlap < 0.5
    return float("nan") if lost else tr.min_gap


def calibrate_qubit(kind: str, delta_target: float, J: float, C: float = 0.0,
                    tau: float = 1.0, u_grid=None) -> Calibration:
    """Transverse field U with the qubit Delta_min equal to ``delta_target``.

    Scans U on a log grid for the first bracket and refines with Brent's
    method. If no U reaches the target, U, J and C are scaled together from
    the grid maximum (Delta_min is homogeneous of degree one).
    """
    if delta_target <= 0:
        raise CalibrationError("target gap must be positive")
    u_grid = np.geomspace(1e-3, 1e2, 41) if u_grid is None else np.asarray(u_grid)

    def gap(u, scale=1.0):
        return qubit_delta_min(kind, QubitParams(U=u * scale, J=J * scale, C=C * scale, tau=tau))

    vals = np.array([gap(u) for u in u_grid])
    for i in range(len(u_grid) - 1):
        if (vals[i] - delta_target) * (vals[i + 1] - delta_target) <= 0:
            u = optimize.brentq(lambda x: gap(x) - delta_target, u_grid[i], u_grid[i + 1],
                                xtol=1e-12, rtol=1e-10)
            p = QubitParams(U=u, J=J, C=C, tau=tau)
            d = qubit_delta_min(kind, p)
            if abs(d / delta_target - 1) <= 1e-6:
                return Calibration(p, d, False)
    if not np.any(vals > 0):
        raise CalibrationError("qubit gap vanishes on the whole U grid")
    i = int(np.nanargmax(vals))
    f = delta_target / vals[i]
    p = QubitParams(U=u_grid[i] * f, J=J * f, C=C * f, tau=tau)
    d = qubit_delta_min(kind, p)
    if abs(d / delta_target - 1) > 1e-3:
        raise CalibrationError(f"joint scaling missed the target ({d} vs {delta_target})")
    return Calibration(p, d, True)


@dataclass(eq=False)
class PairedFamily:
    """Resonator instances and their calibrated qubit counterparts."""

    name: str
    knr_models: list[AnnealModel]
    qubit_models: list[AnnealModel]
    delta_min: float
    tau: float
    calibration: Calibration


FIG3_PARAMS = KnrParams(K=1.0, Ep=2.0, delta0=0.25, J12=0.1)
FIG5_PARAMS = KnrParams(K=1.0, Ep=2.0, E0=0.095, delta0=0.45, C=0.05)


def paired_family(name: str, dim: int | None = None, tau_factor: float | None = None,
                  params: KnrParams | None = None) -> PairedFamily:
    """Fig. 3 ("two_spin", tau = 20/Delta_min) or Fig. 5 ("plaquette", 40/Delta_min).

    The two-spin family lists both coupling signs. The resonator plaquette
    uses the pinned three-mode model so the fixed resonator does not enter
    the loss sweep.
    """
    if name == "two_spin":
        p = params or FIG3_PARAMS
        tau_factor = tau_factor or 20.0
        base = build_model("two_spin", p, dim)
        delta = spectrum_trace(base).min_gap
        tau = tau_factor / delta
        knr = [build_model("two_spin", replace(p, J12=s * abs(p.J12), tau=tau), dim)
               for s in (1, -1)]
        Jq = effective_two_spin_coupling(p)
        cal = calibrate_qubit("qubit_two_spin", delta, Jq, tau=tau)
        qp = cal.params
        qubits = [build_model("qubit_two_spin", replace(qp, J=s * qp.J)) for s in (1, -1)]
        return PairedFamily(name, knr, qubits, delta, tau, cal)
    if name == "plaquette":
        p = params or FIG5_PARAMS
        tau_factor = tau_factor or 40.0
        base = build_model("plaquette_pinned", p, dim)
        delta = spectrum_trace(base, k=12).min_gap
        tau = tau_factor / delta
        knr = [build_model("plaquette_pinned", replace(p, tau=tau), dim)]
        Jq, Cq = effective_plaquette_fields(p)
        cal = calibrate_qubit("qubit_lhz3", delta, Jq, Cq, tau=tau)
        return PairedFamily(name, knr, [build_model("qubit_lhz3", cal.params)], delta, tau, cal)
    raise ValueError(f"unknown family {name!r}")


def _sweep_point(args):
    model, rate, config = args
    r = run_anneal(model, rate=rate, config=config)
    return r.success, r.stderr.get("success", 0.0)


def sweep_gap_over_loss(family: PairedFamily, ratios, config: EvolutionConfig | None = None,
                        workers: int = 1, knr_symmetric: bool = True) -> list[dict]:
    """Success versus Delta_min/rate for both platforms, averaged over instances.

    ``knr_symmetric`` simulates only the first resonator instance when the
    family is the two-spin pair: a2 -> -a2 maps J12 to -J12 and leaves the
    vacuum, the drives and the loss invariant, so both signs have the same
    success.
    """
    config = config or EvolutionConfig()
    knr = family.knr_models[:1] if (knr_symmetric and family.name == "two_spin") \
        else family.knr_models
    jobs = []
    for ratio in ratios:
        if not ratio > 0:
            raise ValueError("ratios must be positive")
        rate = family.delta_min / ratio if math.isfinite(ratio) else 0.0
        jobs += [(m, rate, config) for m in knr]
        jobs += [(m, rate, config) for m in family.qubit_models]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_sweep_point, jobs))
    else:
        out = [_sweep_point(j) for j in jobs]
    rows, i = [], 0
    nk, nq = len(knr), len(family.qubit_models)
    for ratio in ratios:
        k = out[i:i + nk]
        q = out[i + nk:i + nk + nq]
        i += nk + nq
        rows.append({
            "ratio": float(ratio),
            "success_knr": float(np.mean([s for s, _ in k])),
            "stderr_knr": float(np.sqrt(np.sum([e ** 2 for _, e in k])) / nk),
            "success_qubit": float(np.mean([s for s, _ in q])),
        })
    return rows
