"""Adiabatic annealing with Kerr nonlinear resonators: models, solvers and analysis."""

__version__ = "0.1.0"

from .fock import ModeSpec, QuantumState, TruncationError, coherent_state, fock_state
from .models import KnrParams, QubitParams, build_model
from .dynamics import (EvolutionConfig, evolve_lindblad, evolve_trajectories,
                       evolve_unitary)
from .analysis import run_anneal, spectrum_trace, wigner
from .lhz import IsingProblem, compile_problem, decode

__all__ = [
    "ModeSpec", "QuantumState", "TruncationError", "coherent_state", "fock_state",
    "KnrParams", "QubitParams", "build_model",
    "EvolutionConfig", "evolve_unitary", "evolve_lindblad", "evolve_trajectories",
    "run_anneal", "spectrum_trace", "wigner",
    "IsingProblem", "compile_problem", "decode",
]
