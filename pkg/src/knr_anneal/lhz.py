"""LHZ compilation of all-to-all Ising problems onto local fields and plaquettes.

Logical spins are numbered 1..N. Physical spin k(i, j) = (j-2)(j-1)/2 + i
(1-based, i < j) carries sigma_k = s_i s_j, so bit 1 means "i and j
aligned". Internally physical spins are stored 0-based at k - 1 and the
N - 2 fixed boundary spins follow at indices M .. M+N-3.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

BRUTE_FORCE_LIMIT = 20
FULL_SCAN_LIMIT = 20  # physical spins


class ProblemFileError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class IsingProblem:
    """H = sum_{i<j} J_ij s_i s_j over logical spins s_i = +-1; absent pairs are 0."""

    n_logical: int
    couplings: dict

    def __post_init__(self):
        if self.n_logical < 2:
            raise ValueError("an Ising problem needs at least two spins")
        for (i, j), J in self.couplings.items():
            if not (1 <= i < j <= self.n_logical):
                raise ValueError(f"coupling ({i}, {j}) must satisfy 1 <= i < j <= N")
            if not np.isfinite(J):
                raise ValueError(f"coupling ({i}, {j}) is not finite")

    def coupling(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return float(self.couplings.get((i, j), 0.0))

    def matrix(self) -> np.ndarray:
        n = self.n_logical
        m = np.zeros((n, n))
        for (i, j), J in self.couplings.items():
            m[i - 1, j - 1] = J
        return m

    def energy(self, spins) -> float:
        s = np.asarray(spins, dtype=float)
        return float(s @ self.matrix() @ s)


def physical_index(i: int, j: int) -> int:
    """1-based physical label of the logical pair (i, j)."""
    if i > j:
        i, j = j, i
    if not 1 <= i < j:
        raise ValueError(f"invalid logical pair ({i}, {j})")
    return (j - 2) * (j - 1) // 2 + i


@dataclass(frozen=True)
class LhzLayout:
    n_logical: int
    local_fields: np.ndarray           # J_k, 0-based physical index
    index_map: tuple                   # index_map[k] = (i, j) for 0-based k
    plaquettes: tuple                  # 4-tuples of 0-based physical / fixed indices
    fixed_spins: tuple
    constraint_strength: float

    @property
    def n_physical(self) -> int:
        return len(self.index_map)

    def physical_image(self, logical) -> np.ndarray:
        """sigma_k = s_i s_j for a logical configuration of +-1 values."""
        s = np.asarray(logical)
        return np.array([s[i - 1] * s[j - 1] for i, j in self.index_map], dtype=int)

    def plaquette_products(self, sigma) -> np.ndarray:
        full = np.concatenate([np.asarray(sigma, dtype=int), np.ones(len(self.fixed_spins), int)])
        return np.array([np.prod(full[list(p)]) for p in self.plaquettes])

    def energy(self, sigma) -> float:
        """sum_k J_k sigma_k - C sum_p prod_{q in p} sigma_q, fixed spins up."""
        sigma = np.asarray(sigma, dtype=float)
        return float(self.local_fields @ sigma
                     - self.constraint_strength * self.plaquette_products(sigma).sum())


def default_constraint(problem: IsingProblem) -> float:
    """A plaquette penalty large enough that no violating state is a physical minimum."""
    return 1.0 + 2.0 * sum(abs(J) for J in problem.couplings.values())


def compile_problem(problem: IsingProblem, C: float | None = None) -> LhzLayout:
    """Triangular LHZ layout: local fields plus row-by-row plaquettes.

    Interior plaquettes join (i,j), (i,j+1), (i+1,j), (i+1,j+1); the boundary
    triangle (i,i+1), (i,i+2), (i+1,i+2) is closed by fixed spin i.
    """
    N = problem.n_logical
    if N < 3:
        raise ValueError("LHZ compilation needs N >= 3")
    M = N * (N - 1) // 2
    index_map = [None] * M
    fields = np.zeros(M)
    for j in range(2, N + 1):
        for i in range(1, j):
            k = physical_index(i, j) - 1
            index_map[k] = (i, j)
            fields[k] = problem.coupling(i, j)
    q = lambda i, j: physical_index(i, j) - 1  # noqa: E731
    plaquettes = []
    fixed = tuple(range(M, M + N - 2))
    for i in range(1, N - 1):
        plaquettes.append((q(i, i + 1), q(i, i + 2), q(i + 1, i + 2), fixed[i - 1]))
        for j in range(i + 2, N):
            plaquettes.append((q(i, j), q(i, j + 1), q(i + 1, j), q(i + 1, j + 1)))
    C = default_constraint(problem) if C is None else float(C)
    return LhzLayout(N, fields, tuple(index_map), tuple(plaquettes), fixed, C)


@dataclass(frozen=True)
class DecodeResult:
    logical: tuple
    violations: tuple

    @property
    def consistent(self) -> bool:
        return not self.violations


def decode(bits, layout: LhzLayout) -> DecodeResult:
    """Logical spins from physical bits (1 = aligned), logical spin 1 up.

    Spin j is read from the (1, j) physical spin; plaquettes with odd parity
    are reported, not corrected.
    """
    bits = np.asarray(bits, dtype=int)
    if bits.shape != (layout.n_physical,):
        raise ValueError(f"expected {layout.n_physical} physical bits, got {bits.shape}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("physical bits must be 0 or 1")
    sigma = 2 * bits - 1
    logical = [1] + [int(sigma[physical_index(1, j) - 1]) for j in range(2, layout.n_logical + 1)]
    bad = tuple(int(p) for p in np.nonzero(layout.plaquette_products(sigma) < 0)[0])
    return DecodeResult(tuple(logical), bad)


def encode(logical, layout: LhzLayout) -> np.ndarray:
    """Physical bits of a logical configuration."""
    return (layout.physical_image(logical) + 1) // 2


def _all_configs(n: int) -> np.ndarray:
    return 1 - 2 * ((np.arange(2 ** n)[:, None] >> np.arange(n - 1, -1, -1)) & 1)


def brute_force_ground(problem: IsingProblem) -> tuple[float, set]:
    """All minimizing logical configurations (tuples of +-1) and the minimum."""
    N = problem.n_logical
    if N > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_LIMIT}")
    Jm = problem.matrix()
    best, ground = np.inf, set()
    chunk = 1 << 14
    for start in range(0, 2 ** N, chunk):
        idx = np.arange(start, min(start + chunk, 2 ** N))
        S = 1 - 2 * ((idx[:, None] >> np.arange(N - 1, -1, -1)) & 1)
        E = np.einsum("bi,ij,bj->b", S, Jm, S)
        lo = E.min()
        tol = 1e-9 * max(1.0, abs(lo))
        if lo < best - tol:
            best, ground = lo, set()
        if lo <= best + tol:
            ground |= {tuple(int(v) for v in row) for row in S[np.abs(E - best) <= tol]}
    return float(best), ground


def physical_ground(layout: LhzLayout) -> tuple[float, list]:
    """Exhaustive minimum of the physical energy over all 2^M bit strings."""
    M = layout.n_physical
    if M > FULL_SCAN_LIMIT:
        raise ValueError(f"full physical scan limited to M <= {FULL_SCAN_LIMIT}")
    sig = _all_configs(M)
    full = np.concatenate([sig, np.ones((len(sig), len(layout.fixed_spins)), int)], axis=1)
    prods = np.stack([np.prod(full[:, list(p)], axis=1) for p in layout.plaquettes], axis=1)
    E = sig @ layout.local_fields - layout.constraint_strength * prods.sum(axis=1)
    lo = E.min()
    sel = np.abs(E - lo) <= 1e-9 * max(1.0, abs(lo))
    return float(lo), [(row + 1) // 2 for row in sig[sel]]


@dataclass(frozen=True)
class Verification:
    logical_energy: float
    logical_minima: int
    physical_minima: int
    decoded_match: bool
    full_scan: bool

    def summary(self) -> str:
        return (f"{self.physical_minima} physical solutions <-> {self.logical_minima} logical "
                f"ground states; decoded minima {'match' if self.decoded_match else 'DIFFER'}"
                f"{' (full physical scan)' if self.full_scan else ''}")


def verify(problem: IsingProblem, layout: LhzLayout) -> Verification:
    """Check that the lowest constraint-satisfying physical states decode to logical minima.

    Consistent physical states are enumerated as images of gauge-fixed
    logical configurations; when M is small enough every bit string is also
    scanned with the plaquette penalty.
    """
    e_log, ground = brute_force_ground(problem)
    N = problem.n_logical
    gauge = _all_configs(N - 1)
    logical = np.concatenate([np.ones((len(gauge), 1), int), gauge], axis=1)
    e_phys = np.array([layout.local_fields @ layout.physical_image(s) for s in logical])
    lo = e_phys.min()
    minima = logical[np.abs(e_phys - lo) <= 1e-9 * max(1.0, abs(lo))]
    decoded = set()
    for s in minima:
        d = decode(encode(s, layout), layout)
        decoded.add(d.logical)
        decoded.add(tuple(-v for v in d.logical))
    match = decoded == ground
    full = layout.n_physical <= FULL_SCAN_LIMIT
    if full:
        _, phys = physical_ground(layout)
        scan = set()
        for bits in phys:
            d = decode(bits, layout)
            scan |= {d.logical, tuple(-v for v in d.logical)}
        match = match and scan == ground and len(phys) == len(minima)
    return Verification(e_log, len(ground), len(minima), match, full)


def layout_document(layout: LhzLayout) -> str:
    """Plain-text description: header fields, physical spins, plaquettes."""
    M = layout.n_physical
    lines = [
        "# LHZ layout (physical spins 1-based; fixed spins follow the physical ones)",
        f"n_logical: {layout.n_logical}",
        f"n_physical: {M}",
        f"n_fixed: {len(layout.fixed_spins)}",
        f"n_plaquettes: {len(layout.plaquettes)}",
        f"constraint_strength: {layout.constraint_strength!r}",
        f"fixed_spins: {' '.join(str(f + 1) for f in layout.fixed_spins)}",
        "",
        "[physical]",
        "# k i j local_field",
    ]
    for k, (i, j) in enumerate(layout.index_map):
        lines.append(f"{k + 1} {i} {j} {float(layout.local_fields[k])!r}")
    lines += ["", "[plaquettes]", "# p members (fixed spins marked with f)"]
    for p, members in enumerate(layout.plaquettes):
        tags = [f"{m + 1}" if m < M else f"{m + 1}f" for m in members]
        lines.append(f"{p + 1} {' '.join(tags)}")
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> IsingProblem:
    """Parse "N" followed by "i j J_ij" lines; '#' starts a comment."""
    n = None
    couplings = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if n is None:
            if len(parts) != 1:
                raise ProblemFileError(lineno, "expected the number of logical spins")
            try:
                n = int(parts[0])
            except ValueError:
                raise ProblemFileError(lineno, f"invalid spin count {parts[0]!r}") from None
            if n < 2:
                raise ProblemFileError(lineno, "need at least two logical spins")
            continue
        if len(parts) != 3:
            raise ProblemFileError(lineno, "expected 'i j J_ij'")
        try:
            i, j, J = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ProblemFileError(lineno, f"cannot parse {line!r}") from None
        if i == j or not (1 <= i <= n and 1 <= j <= n):
            raise ProblemFileError(lineno, f"spin indices must be distinct and in 1..{n}")
        if not np.isfinite(J):
            raise ProblemFileError(lineno, "coupling must be finite")
        key = (min(i, j), max(i, j))
        if key in couplings:
            raise ProblemFileError(lineno, f"duplicate coupling {key}")
        couplings[key] = J
    if n is None:
        raise ProblemFileError(1, "empty problem file")
    return IsingProblem(n, couplings)


def all_pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(1, n + 1), 2))
