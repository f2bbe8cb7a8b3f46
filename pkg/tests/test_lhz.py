import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knr_anneal.lhz import (
    IsingProblem, ProblemFileError, all_pairs, brute_force_ground, compile_problem, decode,
    encode, layout_document, parse_problem, physical_index, verify,
)


def _random_problem(n, seed, integer=False):
    rng = np.random.default_rng(seed)
    vals = rng.integers(-2, 3, size=len(all_pairs(n))) if integer \
        else rng.normal(size=len(all_pairs(n)))
    return IsingProblem(n, {p: float(v) for p, v in zip(all_pairs(n), vals)})


def test_physical_index_enumerates_columns():
    labels = [physical_index(i, j) for j in range(2, 6) for i in range(1, j)]
    assert labels == list(range(1, 11))
    assert physical_index(3, 1) == physical_index(1, 3)
    with pytest.raises(ValueError):
        physical_index(2, 2)


@pytest.mark.parametrize("n,m,fixed,plaq", [(3, 3, 1, 1), (4, 6, 2, 3), (5, 10, 3, 6),
                                            (6, 15, 4, 10)])
def test_layout_counts(n, m, fixed, plaq):
    lay = compile_problem(_random_problem(n, 0))
    assert lay.n_physical == m == n * (n - 1) // 2
    assert len(lay.fixed_spins) == fixed == n - 2
    assert len(lay.plaquettes) == plaq == m - n + 1


def test_plaquettes_are_local_and_close_parity_cycles():
    lay = compile_problem(_random_problem(6, 1))
    for p in lay.plaquettes:
        logical = [lay.index_map[q] for q in p if q < lay.n_physical]
        counts = {}
        for pair in logical:
            for s in pair:
                counts[s] = counts.get(s, 0) + 1
        # interior plaquettes: every logical index appears an even number of times;
        # boundary triangles: likewise, the fixed spin closes them
        assert all(c % 2 == 0 for c in counts.values())


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_exhaustive_round_trip_and_energy_equivalence(n):
    prob = _random_problem(n, n)
    lay = compile_problem(prob)
    offset = lay.constraint_strength * len(lay.plaquettes)
    images = set()
    for s in itertools.product((1, -1), repeat=n):
        bits = encode(s, lay)
        d = decode(bits, lay)
        assert d.consistent
        gauge = s if s[0] == 1 else tuple(-v for v in s)
        assert d.logical == gauge
        assert lay.energy(2 * bits - 1) + offset == pytest.approx(prob.energy(s), abs=1e-10)
        images.add(tuple(bits))
    assert len(images) == 2 ** (n - 1)
    # every constraint-satisfying bit string is the image of a logical state
    consistent = {b for b in itertools.product((0, 1), repeat=lay.n_physical)
                  if decode(np.array(b), lay).consistent}
    assert consistent == images


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_physical_minima_decode_to_logical_minima(n):
    for seed in range(3):
        prob = _random_problem(n, 100 * n + seed, integer=True)
        v = verify(prob, compile_problem(prob))
        assert v.decoded_match, v.summary()
        assert v.full_scan
        assert v.logical_minima == 2 * v.physical_minima


@given(st.integers(3, 6), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_verification_property(n, seed):
    prob = _random_problem(n, seed)
    assert verify(prob, compile_problem(prob)).decoded_match


def test_three_spin_antiferromagnet_gauge_count():
    prob = parse_problem("3\n1 2 1\n1 3 1\n2 3 1\n")
    v = verify(prob, compile_problem(prob))
    assert (v.physical_minima, v.logical_minima) == (3, 6)
    assert v.summary().startswith("3 physical solutions <-> 6 logical ground states")
    e, ground = brute_force_ground(prob)
    assert e == -1.0 and len(ground) == 6


def test_weak_constraint_breaks_equivalence():
    prob = parse_problem("3\n1 2 1\n1 3 1\n2 3 1\n")
    v = verify(prob, compile_problem(prob, C=0.1))
    assert not v.decoded_match


def test_decode_reports_violations():
    lay = compile_problem(_random_problem(4, 2))
    bits = encode((1, 1, 1, 1), lay)
    bits[0] ^= 1
    d = decode(bits, lay)
    assert not d.consistent
    with pytest.raises(ValueError):
        decode(np.zeros(3, int), lay)


def test_layout_document_lists_everything():
    lay = compile_problem(parse_problem("5\n1 2 0.5\n2 5 -1\n"))
    doc = layout_document(lay)
    assert "n_physical: 10" in doc and "n_fixed: 3" in doc and "n_plaquettes: 6" in doc
    body = doc.split("[plaquettes]")[1].strip().splitlines()[1:]
    assert len(body) == 6
    assert "np.float64" not in doc


@pytest.mark.parametrize("text,line", [
    ("", None), ("x\n", 1), ("3\n1 2\n", 2), ("3\n# c\n1 1 0.5\n", 3), ("3\n1 4 1\n", 2),
    ("3\n1 2 1\n2 1 1\n", 3), ("3\n1 2 nan\n", 2), ("3\n1 2 abc\n", 2),
])
def test_parse_errors_cite_lines(text, line):
    with pytest.raises(ProblemFileError) as exc:
        parse_problem(text)
    if line is not None:
        assert exc.value.lineno == line
        assert f"line {line}" in str(exc.value)


def test_parse_problem_comments_and_symmetry():
    prob = parse_problem("# header\n4  # spins\n3 1 -0.5\n")
    assert prob.n_logical == 4
    assert prob.coupling(1, 3) == -0.5 and prob.coupling(3, 1) == -0.5
    assert prob.coupling(2, 4) == 0.0
