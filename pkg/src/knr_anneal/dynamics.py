"""Time evolution: Schrodinger, dense Lindblad, and Monte Carlo wavefunction.

All three solvers share one adaptive Dormand-Prince 5(4) integrator. The
integration runs window by window between the recorded sample times, each
window in a rotating frame (see ``EvolutionConfig.frame``) so that the
large truncation-edge energies do not dictate the explicit step size.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fock import KronTerm, ModeSpec, OperatorSum, QuantumState
from .models import AnnealModel


class IntegrationError(RuntimeError):
    pass


class DimensionBudgetError(ValueError):
    pass


# -- integrator ----------------------------------------------------------------


class DormandPrince:
    """Embedded RK 5(4) pair with FSAL and 4th-order dense output.

    ``y`` may be any complex ndarray; the error norm is the RMS over all of
    its entries.
    """

    C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
    A = [
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    ]
    B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
    E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
    P = np.array([
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ])

    def __init__(self, fun, t0, y0, t_bound, rtol=1e-8, atol=1e-10,
                 max_step=math.inf, first_step=None):
        self.fun = fun
        self.t = float(t0)
        self.y = np.array(y0, dtype=complex)
        self.t_bound = float(t_bound)
        self.rtol, self.atol, self.max_step = rtol, atol, max_step
        self.f = fun(self.t, self.y)
        self.nfev = 1
        self.n_steps = 0
        self.n_rejected = 0
        self.h = first_step if first_step else self._initial_step()
        self.t_old = self.y_old = self.K = None
        self._Q = None

    def _norm(self, x, scale):
        return float(np.sqrt(np.mean(np.abs(x / scale) ** 2)))

    def _initial_step(self):
        scale = self.atol + self.rtol * np.abs(self.y)
        d0, d1 = self._norm(self.y, scale), self._norm(self.f, scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, self.t_bound - self.t)
        f1 = self.fun(self.t + h0, self.y + h0 * self.f)
        self.nfev += 1
        d2 = self._norm(f1 - self.f, scale) / h0
        h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
        return min(100 * h0, h1, self.max_step)

    @property
    def done(self) -> bool:
        return self.t >= self.t_bound

    def step(self):
        t, y = self.t, self.y
        h = min(self.h, self.max_step)
        min_step = 10 * np.spacing(max(abs(t), 1.0))
        while True:
            if h < min_step:
                raise IntegrationError(f"step size underflow at t={t:.6g}")
            h = min(h, self.t_bound - t)
            K = [self.f]
            for s in range(1, 6):
                dy = sum(a * k for a, k in zip(self.A[s], K) if a)
                K.append(self.fun(t + self.C[s] * h, y + h * dy))
            y_new = y + h * sum(b * k for b, k in zip(self.B, K) if b)
            f_new = self.fun(t + h, y_new)
            K.append(f_new)
            self.nfev += 6
            err = h * sum(e * k for e, k in zip(self.E, K) if e)
            scale = self.atol + self.rtol * np.maximum(np.abs(y), np.abs(y_new))
            en = self._norm(err, scale)
            if not math.isfinite(en):
                raise IntegrationError(f"non-finite error estimate at t={t:.6g}")
            if en <= 1.0:
                fac = 10.0 if en == 0 else min(10.0, 0.9 * en ** -0.2)
                break
            self.n_rejected += 1
            h *= max(0.2, 0.9 * en ** -0.2)
        self.t_old, self.y_old, self.K, self.h_used = t, y, K, h
        self._Q = None
        t_new = t + h
        self.t = self.t_bound if self.t_bound - t_new < 1e-14 * max(1.0, abs(t_new)) else t_new
        self.y, self.f = y_new, f_new
        self.h = h * fac
        self.n_steps += 1

    def dense(self, t: float, index=None) -> np.ndarray:
        """Interpolate within the last accepted step; ``index`` slices the last axis."""
        if self._Q is None:
            self._Q = [sum(p * k for p, k in zip(self.P[:, j], self.K) if p)
                       for j in range(4)]
        theta = (t - self.t_old) / self.h_used
        if index is None:
            y0, Q = self.y_old, self._Q
        else:
            y0, Q = self.y_old[..., index], [q[..., index] for q in self._Q]
        out = y0.copy()
        x = theta
        for q in Q:
            out = out + self.h_used * x * q
            x *= theta
        return out


# -- configuration and collapse channels ----------------------------------------

EIGEN_FRAME_LIMIT = 512


@dataclass(frozen=True)
class EvolutionConfig:
    """Solver settings.

    ``frame`` picks the rotating frame the integrator works in. ``"eigen"``
    diagonalizes H at every sample time and integrates only the residual
    drift of the schedule inside each window; ``"interaction"`` removes the
    static diagonal (Kerr) part and stays matrix-free; ``"auto"`` uses the
    eigen frame up to ``EIGEN_FRAME_LIMIT`` basis states.
    """

    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    n_samples: int = 201
    rng_seed: int = 0
    n_trajectories: int = 2000
    batch_size: int = 100
    frame: str = "auto"
    store_states: bool = False
    workers: int = 1

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.n_trajectories < 1 or self.batch_size < 1:
            raise ValueError("n_trajectories and batch_size must be positive")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.frame not in ("auto", "eigen", "interaction", "lab"):
            raise ValueError(f"unknown frame {self.frame!r}")

    def times(self, tau: float) -> np.ndarray:
        return tau * np.linspace(0.0, 1.0, self.n_samples)

    def resolved_frame(self, space: ModeSpec) -> str:
        if self.frame != "auto":
            return self.frame
        return "eigen" if space.total <= EIGEN_FRAME_LIMIT else "interaction"


@dataclass(eq=False)
class CollapseSet:
    """Jump operators with their rates; each operator is a single :class:`KronTerm`."""

    channels: list[tuple[KronTerm, float]] = field(default_factory=list)

    def __post_init__(self):
        for _, rate in self.channels:
            if not (math.isfinite(rate) and rate >= 0):
                raise ValueError(f"collapse rate must be finite and >= 0, got {rate}")

    @classmethod
    def photon_loss(cls, space: ModeSpec, modes, kappa: float) -> "CollapseSet":
        a = np.diag(np.sqrt(np.arange(1, space.dim, dtype=float)), 1).astype(complex)
        return cls([(KronTerm(1.0, ((k, a),)), float(kappa)) for k in modes])

    @classmethod
    def dephasing(cls, space: ModeSpec, modes, gamma: float) -> "CollapseSet":
        sz = np.diag([-1.0, 1.0]).astype(complex)
        return cls([(KronTerm(1.0, ((k, sz),)), float(gamma)) for k in modes])

    def __add__(self, other: "CollapseSet") -> "CollapseSet":
        return CollapseSet(self.channels + other.channels)

    @property
    def active(self) -> list[tuple[KronTerm, float]]:
        return [(op, r) for op, r in self.channels if r > 0]

    def decay_operator(self, space: ModeSpec) -> OperatorSum:
        """sum_k rate_k c_k^dag c_k."""
        out = OperatorSum(space, hermitian=True)
        for op, rate in self.active:
            modes = [m for m, _ in op.factors]
            if len(set(modes)) == len(modes):
                fac = tuple((m, f.conj().T @ f) for m, f in op.factors)
                out.add(rate * abs(op.coeff) ** 2, *fac)
            else:
                out.terms.append(KronTerm(rate * abs(op.coeff) ** 2,
                                          op.adjoint().factors + op.factors))
        return out


# -- frames -------------------------------------------------------------------------


def _bcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (x.ndim - 1))


class _DiagonalFrame:
    """y = exp(iDt) psi with a fixed real diagonal D; matrix-free."""

    def __init__(self, model: AnnealModel, collapse: CollapseSet | None, lab: bool):
        self.model = model
        self.space = model.space
        self.skip = not lab
        self.D = np.zeros(model.space.total) if lab else model.frame_diagonal
        self.decay = collapse.decay_operator(model.space) if collapse else None
        self.jumps = collapse.active if collapse else []
        if not self.jumps:
            self.decay = None

    def window(self, t0: float, t1: float):
        return self

    def _ph(self, t):
        return np.exp(-1j * self.D * t)

    def to_lab(self, t, y):
        return _bcast(self._ph(t), y) * y

    def from_lab(self, t, x):
        return _bcast(np.conj(self._ph(t)), x) * x

    def heff_apply(self, t, x):
        z = self.model.apply(t, x, skip_frame=self.skip)
        if self.decay is not None:
            z = z - 0.5j * self.decay.apply(x)
        return z

    def rhs_pure(self, t, y):
        ph = _bcast(self._ph(t), y)
        return np.conj(ph) * (-1j * self.heff_apply(t, ph * y))

    def rhs_density(self, t, y):
        ph = self._ph(t)
        rho = ph[:, None] * y * np.conj(ph)[None, :]
        rho = 0.5 * (rho + rho.conj().T)
        out = -1j * self.heff_apply(t, rho)
        out = out + out.conj().T
        for op, rate in self.jumps:
            Y = op.apply(rho, self.space)
            out += rate * op.apply(Y.conj().T, self.space)
        return np.conj(ph)[:, None] * out * ph[None, :]

    def density_to_lab(self, t, y):
        ph = self._ph(t)
        return ph[:, None] * y * np.conj(ph)[None, :]

    def density_from_lab(self, t, rho):
        ph = self._ph(t)
        return np.conj(ph)[:, None] * rho * ph[None, :]

    def jump_ops(self):
        return [(lambda x, op=op: op.apply(x, self.space), r) for op, r in self.jumps]


class _EigenFrame:
    """Exponential frame anchored at H(t0) for one sample window.

    With H(t0) = V diag(lam) V^dag and psi = V exp(-i lam (t - t0)) y, only
    the schedule drift (s(t) - s(t0)) (H_problem - H_initial) and the loss
    terms are left for the integrator.
    """

    def __init__(self, model: AnnealModel, collapse: CollapseSet | None):
        self.model = model
        self.space = model.space
        self.H_static = model.static.to_dense().matrix
        self.H_init = model.initial.to_dense().matrix
        self.B = model.problem.to_dense().matrix - self.H_init
        self.jumps_lab = []
        self.G_lab = None
        if collapse and collapse.active:
            G = np.zeros_like(self.B)
            for op, rate in collapse.active:
                c = op.to_sparse(model.space).toarray()
                self.jumps_lab.append((c, rate))
                G += rate * (c.conj().T @ c)
            self.G_lab = G

    def window(self, t0: float, t1: float) -> "_EigenWindow":
        return _EigenWindow(self, t0)


class _EigenWindow:
    def __init__(self, base: _EigenFrame, t0: float):
        model = base.model
        self.t0 = t0
        self.tau = model.tau
        self.s0 = model._s(t0)
        H = base.H_static + (1.0 - self.s0) * base.H_init + self.s0 * (base.B + base.H_init)
        H = 0.5 * (H + H.conj().T)
        self.lam, self.V = np.linalg.eigh(H)
        Vh = self.V.conj().T
        self.M = Vh @ base.B @ self.V
        self.G = Vh @ base.G_lab @ self.V if base.G_lab is not None else None
        self.C = [(Vh @ c @ self.V, r) for c, r in base.jumps_lab]
        self.base = base

    def _ph(self, t):
        return np.exp(-1j * self.lam * (t - self.t0))

    def to_lab(self, t, y):
        return self.V @ (_bcast(self._ph(t), y) * y)

    def from_lab(self, t, x):
        return _bcast(np.conj(self._ph(t)), x) * (self.V.conj().T @ x)

    def _heff(self, t, w):
        z = (t / self.tau - self.s0) * (self.M @ w)
        if self.G is not None:
            z = z - 0.5j * (self.G @ w)
        return z

    def rhs_pure(self, t, y):
        ph = _bcast(self._ph(t), y)
        return np.conj(ph) * (-1j * self._heff(t, ph * y))

    def rhs_density(self, t, y):
        ph = self._ph(t)
        rho = ph[:, None] * y * np.conj(ph)[None, :]
        rho = 0.5 * (rho + rho.conj().T)
        out = -1j * self._heff(t, rho)
        out = out + out.conj().T
        for c, rate in self.C:
            out += rate * (c @ rho @ c.conj().T)
        return np.conj(ph)[:, None] * out * ph[None, :]

    def density_to_lab(self, t, y):
        ph = self._ph(t)
        A = self.V * ph[None, :]
        return A @ y @ A.conj().T

    def density_from_lab(self, t, rho):
        ph = self._ph(t)
        A = self.V * ph[None, :]
        return A.conj().T @ rho @ A

    def jump_ops(self):
        return [(lambda x, c=c: c @ x, r) for c, r in self.base.jumps_lab]


def _make_frame(model: AnnealModel, config: EvolutionConfig, collapse: CollapseSet | None):
    kind = config.resolved_frame(model.space)
    if kind == "eigen":
        if model.space.total > 4096:
            raise DimensionBudgetError("eigen frame needs a dense Hamiltonian; use 'interaction'")
        return _EigenFrame(model, collapse)
    return _DiagonalFrame(model, collapse, lab=(kind == "lab"))


# -- results ---------------------------------------------------------------------


@dataclass(eq=False)
class Evolution:
    times: np.ndarray
    final: QuantumState
    observables: dict[str, np.ndarray]
    states: list[QuantumState] | None = None
    stats: dict = field(default_factory=dict)


@dataclass(eq=False)
class TrajectoryEnsemble:
    times: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    per_trajectory: dict[str, np.ndarray]
    jump_counts: np.ndarray
    stats: dict = field(default_factory=dict)


def _check_match(model: AnnealModel, state: QuantumState):
    if state.space != model.space:
        raise ValueError(f"state space {state.space} does not match model space {model.space}")


def _integrate_window(fun, t0, y0, t1, config, h):
    integ = DormandPrince(fun, t0, y0, t1, config.rel_tol, config.abs_tol, config.max_step,
                          first_step=h)
    while not integ.done:
        integ.step()
    return integ


# -- Schrodinger ------------------------------------------------------------------


def evolve_unitary(model: AnnealModel, psi0: QuantumState, config: EvolutionConfig = None,
                   observables: dict[str, Callable] | None = None) -> Evolution:
    """Solve i dpsi/dt = H(t) psi over [0, tau].

    Observables receive the normalized state as a column array of shape
    (N, 1) and return an array of shape (1, ...). The run aborts if the norm
    drifts by more than 1e-6; the drift is reported in ``stats``.
    """
    config = config or EvolutionConfig()
    _check_match(model, psi0)
    if not psi0.is_pure:
        raise ValueError("evolve_unitary needs a pure initial state")
    observables = observables or {}
    frame = _make_frame(model, config, None)
    times = config.times(model.tau)
    wall = time.perf_counter()
    obs: dict[str, list] = {}
    states = [] if config.store_states else None
    drift, nfev, steps, h = 0.0, 0, 0, None

    def record(psi):
        nonlocal drift
        nrm = np.linalg.norm(psi)
        drift = max(drift, abs(nrm - 1.0))
        for name, fn in observables.items():
            obs.setdefault(name, []).append(np.asarray(fn((psi / nrm)[:, None])))
        if states is not None:
            states.append(QuantumState(model.space, "pure", psi / nrm, validate=False))

    psi = np.asarray(psi0.data, dtype=complex)
    record(psi)
    for t0, t1 in zip(times[:-1], times[1:]):
        w = frame.window(t0, t1)
        integ = _integrate_window(w.rhs_pure, t0, w.from_lab(t0, psi), t1, config, h)
        h, nfev, steps = integ.h, nfev + integ.nfev, steps + integ.n_steps
        psi = w.to_lab(t1, integ.y)
        record(psi)
    if drift > 1e-6:
        raise IntegrationError(f"norm drift {drift:.3e} exceeds 1e-6; tighten tolerances")
    final = QuantumState(model.space, "pure", psi / np.linalg.norm(psi), validate=False)
    stats = {"nfev": nfev, "steps": steps, "norm_drift": drift,
             "frame": config.resolved_frame(model.space),
             "wall_seconds": time.perf_counter() - wall}
    return Evolution(times, final, {n: np.concatenate(v) for n, v in obs.items()},
                     states, stats)


# -- Lindblad ---------------------------------------------------------------------


def check_dense_budget(space: ModeSpec):
    if (space.dim > 2 and space.n_modes > 2) or (space.dim == 2 and space.n_modes > 4):
        raise DimensionBudgetError(
            f"dense density matrices are limited to 2 resonator or 4 qubit modes, got {space}"
        )


def evolve_lindblad(model: AnnealModel, rho0: QuantumState, collapse: CollapseSet,
                    config: EvolutionConfig = None,
                    observables: dict[str, Callable] | None = None) -> Evolution:
    """Solve drho/dt = -i[H(t), rho] + sum_k rate_k D[c_k] rho on a dense matrix.

    D[c] rho = c rho c^dag - (c^dag c rho + rho c^dag c)/2. Hermiticity is
    enforced inside every right-hand-side evaluation. The run aborts if the
    trace drifts by more than 1e-7 or an eigenvalue drops below -1e-6.
    Observables receive the density matrix.
    """
    config = config or EvolutionConfig()
    _check_match(model, rho0)
    check_dense_budget(model.space)
    observables = observables or {}
    frame = _make_frame(model, config, collapse)
    times = config.times(model.tau)
    wall = time.perf_counter()
    obs: dict[str, list] = {}
    states = [] if config.store_states else None
    trace_drift, min_eig, nfev, steps, h = 0.0, 0.0, 0, 0, None

    def record(t, rho):
        nonlocal trace_drift, min_eig
        rho = 0.5 * (rho + rho.conj().T)
        trace_drift = max(trace_drift, abs(np.trace(rho).real - 1.0))
        lo = float(np.linalg.eigvalsh(rho)[0])
        min_eig = min(min_eig, lo)
        if lo < -1e-6:
            raise IntegrationError(f"density matrix lost positivity at t={t:.6g} "
                                   f"(eigenvalue {lo:.3e}); tighten tolerances")
        for name, fn in observables.items():
            obs.setdefault(name, []).append(np.asarray(fn(rho)))
        if states is not None:
            states.append(QuantumState(model.space, "density", rho, validate=False))
        return rho

    rho = record(0.0, rho0.to_density().data.astype(complex))
    for t0, t1 in zip(times[:-1], times[1:]):
        w = frame.window(t0, t1)
        integ = _integrate_window(w.rhs_density, t0, w.density_from_lab(t0, rho), t1, config, h)
        h, nfev, steps = integ.h, nfev + integ.nfev, steps + integ.n_steps
        rho = record(t1, w.density_to_lab(t1, integ.y))
    if trace_drift > 1e-7:
        raise IntegrationError(f"trace drift {trace_drift:.3e} exceeds 1e-7")
    final = QuantumState(model.space, "density", rho, validate=False)
    stats = {"nfev": nfev, "steps": steps, "trace_drift": trace_drift,
             "min_eigenvalue": min_eig, "frame": config.resolved_frame(model.space),
             "wall_seconds": time.perf_counter() - wall}
    return Evolution(times, final, {n: np.stack(v) for n, v in obs.items()}, states, stats)


# -- Monte Carlo wavefunction --------------------------------------------------------


def _locate_jump(integ: DormandPrince, col: int, threshold: float) -> float:
    """Bisection for ||psi(t)||^2 = threshold inside the last accepted step."""
    lo, hi = integ.t_old, integ.t
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        n2 = float(np.sum(np.abs(integ.dense(mid, col)) ** 2))
        if abs(n2 - threshold) <= 1e-10 * threshold:
            return mid
        if n2 > threshold:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.spacing(hi):
            return hi
    raise IntegrationError("jump-time bisection failed to converge")


def _run_batch(model: AnnealModel, psi0: np.ndarray, collapse: CollapseSet,
               config: EvolutionConfig, observables: dict, seeds) -> dict:
    B = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    frame = _make_frame(model, config, collapse)
    times = config.times(model.tau)
    thresholds = np.array([g.random() for g in rngs])
    counts = np.zeros(B, dtype=int)
    obs: dict[str, list] = {}
    nfev = steps = 0
    h = None

    def record(psi):
        psi = psi / np.linalg.norm(psi, axis=0)[None, :]
        for name, fn in observables.items():
            obs.setdefault(name, []).append(np.asarray(fn(psi)))

    Psi = np.repeat(np.asarray(psi0, dtype=complex)[:, None], B, axis=1)
    record(Psi)
    for t0, t1 in zip(times[:-1], times[1:]):
        w = frame.window(t0, t1)
        ops = w.jump_ops()
        rates = np.array([r for _, r in ops])
        integ = DormandPrince(w.rhs_pure, t0, w.from_lab(t0, Psi), t1, config.rel_tol,
                              config.abs_tol, config.max_step, first_step=h)
        while not integ.done:
            integ.step()
            if not ops:
                continue
            n2 = np.sum(np.abs(integ.y) ** 2, axis=0)
            below = np.nonzero(n2 <= thresholds)[0]
            if not below.size:
                continue
            start = np.sum(np.abs(integ.y_old[:, below]) ** 2, axis=0)
            cands = []
            for j, s0 in zip(below, start):
                tj = integ.t_old if s0 <= thresholds[j] else _locate_jump(integ, j, thresholds[j])
                cands.append((tj, int(j)))
            t_j, j = min(cands)
            Y = integ.y.copy() if t_j >= integ.t else integ.dense(t_j)
            psi = w.to_lab(t_j, Y[:, j])
            cand = [op(psi) for op, _ in ops]
            weights = rates * np.array([np.vdot(c, c).real for c in cand])
            g = rngs[j]
            ch = int(np.searchsorted(np.cumsum(weights), g.random() * weights.sum(), side="right"))
            new = cand[min(ch, len(cand) - 1)]
            Y[:, j] = w.from_lab(t_j, new / np.linalg.norm(new))
            thresholds[j] = g.random()
            counts[j] += 1
            nfev, steps = nfev + integ.nfev, steps + integ.n_steps
            h_used = integ.h_used
            integ = DormandPrince(w.rhs_pure, t_j, Y, t1, config.rel_tol, config.abs_tol,
                                  config.max_step, first_step=h_used)
        h = integ.h
        nfev, steps = nfev + integ.nfev, steps + integ.n_steps
        Psi = w.to_lab(t1, integ.y)
        record(Psi)
    per = {n: np.stack(v, axis=1) for n, v in obs.items()}  # (B, n_times, ...)
    return {"per": per, "counts": counts, "nfev": nfev, "steps": steps}


def _run_batch_star(args):
    return _run_batch(*args)


def evolve_trajectories(model: AnnealModel, psi0: QuantumState, collapse: CollapseSet,
                        config: EvolutionConfig = None,
                        observables: dict[str, Callable] | None = None) -> TrajectoryEnsemble:
    """Monte Carlo wavefunction unravelling of the same master equation.

    Trajectories run in fixed batches of ``config.batch_size``. Trajectory
    ``i`` draws all its random numbers from child ``i`` of
    ``SeedSequence(config.rng_seed)`` and the batch partition does not depend
    on ``config.workers``, so results are identical for any worker count.
    Observables receive normalized states of shape (N, B) and return arrays
    of shape (B, ...).
    """
    config = config or EvolutionConfig()
    _check_match(model, psi0)
    if not psi0.is_pure:
        raise ValueError("trajectories need a pure initial state")
    observables = observables or {}
    n = config.n_trajectories
    seeds = np.random.SeedSequence(config.rng_seed).spawn(n)
    batches = [seeds[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
    wall = time.perf_counter()
    args = [(model, psi0.data, collapse, config, observables, b) for b in batches]
    if config.workers > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(_run_batch_star, args))
    else:
        results = [_run_batch(*a) for a in args]
    per = {name: np.concatenate([r["per"][name] for r in results]) for name in observables}
    mean = {name: v.mean(axis=0) for name, v in per.items()}
    stderr = {name: (v.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(v[0]))
              for name, v in per.items()}
    counts = np.concatenate([r["counts"] for r in results])
    stats = {"nfev": sum(r["nfev"] for r in results), "steps": sum(r["steps"] for r in results),
             "mean_jumps": float(counts.mean()), "frame": config.resolved_frame(model.space),
             "wall_seconds": time.perf_counter() - wall}
    return TrajectoryEnsemble(config.times(model.tau), mean, stderr, per, counts, stats)
