"""Command-line front end: ``knr-anneal <command> --config FILE --out DIR``.

Config files are flat ``key = value`` text, all energies in units of K and
times in units of 1/K. Every run writes its outputs plus ``manifest.json``
(config echo, version, truncation, tolerances, wall clock, sha256 of every
output file). Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackError

from . import __version__
from .analysis import (CalibrationError, GridError, WignerGrid, calibrate_qubit,
                       choose_solver, collapse_for, paired_family, run_anneal, spectrum_trace,
                       sweep_gap_over_loss, wigner)
from .dynamics import (DimensionBudgetError, EvolutionConfig, IntegrationError,
                       evolve_lindblad, evolve_unitary)
from .fock import TruncationError, truncation_dim
from .lhz import ProblemFileError, compile_problem, layout_document, parse_problem, verify
from .models import (KINDS, KnrParams, QubitParams, build_model, effective_plaquette_fields,
                     effective_two_spin_coupling, metapotential, metapotential_peaks)

SCENARIOS = KINDS + ("lhz_compile",)
TRUNCATION_DRIFT = 1e-4
CHECK_DIM_LIMIT = 4096


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.replace(",", " ").split()]


def _range(v: str) -> tuple[float, float]:
    out = _floats(v)
    if len(out) != 2 or not out[0] < out[1]:
        raise ValueError("expected 'low, high' with low < high")
    return out[0], out[1]


def _choice(*opts):
    def parse(v):
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return v
    return parse


KEYS = {
    "scenario": _choice(*SCENARIOS),
    "K": float, "Ep": float, "E0": float, "J": float, "delta0": float, "C": float,
    "J12": float, "U": float, "tau": float, "tau_factor": float,
    "kappa": float, "kappa_tau": float, "gamma_phi": float,
    "dim": int, "levels": int, "n_samples": int,
    "solver": _choice("auto", "unitary", "lindblad", "traj"),
    "frame": _choice("auto", "eigen", "interaction", "lab"),
    "rel_tol": float, "abs_tol": float, "max_step": float,
    "n_trajectories": int, "batch_size": int, "rng_seed": int,
    "include_fixed_loss": _bool, "truncation_check": _choice("auto", "true", "false"),
    "family": _choice("two_spin", "plaquette"), "ratios": _floats,
    "sweep_variable": str, "sweep_values": _floats,
    "wigner_times": _floats, "x_range": _range, "p_range": _range, "grid_points": int,
    "mp_extent": float, "mp_points": int, "mp_s": float,
    "problem_file": str, "constraint_strength": float,
}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; unknown keys and bad values raise ConfigError."""
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    if len(cp.sections()) != 1:
        raise ConfigError("config must be a single flat list of key = value lines")
    out = {}
    for key, raw in cp.items(cp.sections()[0]):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = KEYS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return out


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config_text(text)
    cfg["_text"] = text
    cfg["_config_dir"] = str(Path(path).resolve().parent)
    return cfg


# -- model assembly ----------------------------------------------------------------------


def _scenario(cfg: dict) -> str:
    if "scenario" not in cfg:
        raise ConfigError("missing required key 'scenario'")
    return cfg["scenario"]


def knr_params(cfg: dict, tau: float = 100.0) -> KnrParams:
    if "J" in cfg and "E0" in cfg:
        raise ConfigError("set either E0 or J (the single-photon drive), not both")
    drive = cfg.get("J", cfg.get("E0", 0.0))
    try:
        return KnrParams(K=cfg.get("K", 1.0), Ep=cfg.get("Ep", 4.0), E0=drive,
                         delta0=cfg.get("delta0", 0.2), C=cfg.get("C", 0.0),
                         J12=cfg.get("J12", 0.0), tau=tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _partner_kind(kind: str) -> str:
    return {"qubit_two_spin": "two_spin", "qubit_lhz3": "plaquette_pinned"}[kind]


def build(cfg: dict, dim: int | None = None):
    """Model with tau resolved; returns (model, info dict)."""
    kind = _scenario(cfg)
    if kind == "lhz_compile":
        raise ConfigError("scenario lhz_compile only works with the lhz command")
    if "tau" in cfg and "tau_factor" in cfg:
        raise ConfigError("set either tau or tau_factor, not both")
    dim = dim if dim is not None else cfg.get("dim")
    info = {}
    try:
        if kind.startswith("qubit"):
            model = _build_qubit(cfg, kind, dim, info)
        else:
            model = build_model(kind, knr_params(cfg), dim)
            model = _resolve_tau(cfg, model, info)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, (TruncationError, ConfigError)):
            raise
        raise ConfigError(str(exc)) from None
    info["dim"] = model.space.dim
    info["tau"] = model.tau
    return model, info


def _levels(cfg, model):
    return cfg.get("levels", 12 if model.manifold > 1 else 8)


def _resolve_tau(cfg, model, info):
    if "tau_factor" in cfg:
        tr = spectrum_trace(model, k=_levels(cfg, model))
        info["delta_min"] = tr.min_gap
        return model.with_tau(cfg["tau_factor"] / tr.min_gap)
    return model.with_tau(cfg.get("tau", model.tau))


def _build_qubit(cfg, kind, dim, info):
    if "U" in cfg:
        qp = QubitParams(U=cfg["U"], J=cfg.get("J", 1.0), C=cfg.get("C", 0.0))
        model = build_model(kind, qp)
        return _resolve_tau(cfg, model, info)
    # calibrate against the resonator partner built from the same keys
    partner = build_model(_partner_kind(kind), knr_params(cfg), dim)
    delta = spectrum_trace(partner, k=_levels(cfg, partner)).min_gap
    p = partner.params
    if kind == "qubit_two_spin":
        Jq, Cq = effective_two_spin_coupling(p), 0.0
    else:
        Jq, Cq = effective_plaquette_fields(p)
    cal = calibrate_qubit(kind, delta, Jq, Cq)
    info.update(delta_min=delta, calibrated_U=cal.params.U, calibration_scaled=cal.scaled)
    tau = cfg["tau_factor"] / delta if "tau_factor" in cfg else cfg.get("tau", 100.0)
    return build_model(kind, replace(cal.params, tau=tau))


def evolution_config(cfg: dict, args) -> EvolutionConfig:
    try:
        return EvolutionConfig(
            rel_tol=cfg.get("rel_tol", 1e-8), abs_tol=cfg.get("abs_tol", 1e-10),
            max_step=cfg.get("max_step", math.inf), n_samples=cfg.get("n_samples", 201),
            rng_seed=args.seed if args.seed is not None else cfg.get("rng_seed", 0),
            n_trajectories=cfg.get("n_trajectories", 2000),
            batch_size=cfg.get("batch_size", 100), frame=cfg.get("frame", "auto"),
            workers=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def loss_rate(cfg: dict, model) -> float:
    keys = [k for k in ("kappa", "kappa_tau", "gamma_phi") if k in cfg]
    if len(keys) > 1:
        raise ConfigError(f"set only one of {', '.join(keys)}")
    if not keys:
        return 0.0
    rate = cfg["kappa_tau"] / model.tau if keys[0] == "kappa_tau" else cfg[keys[0]]
    if rate < 0:
        raise ConfigError("loss rates must be non-negative")
    return rate


# -- output ------------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".16e")
    return str(v)


def csv_bytes(header: list[str], rows) -> bytes:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return ("\n".join(lines) + "\n").encode()


def json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Run:
    """Collects outputs in memory; everything is written by :meth:`finish`."""

    def __init__(self, command: str, cfg: dict, args):
        self.command, self.cfg, self.args = command, cfg, args
        self.files: dict[str, bytes] = {}
        self.meta: dict = {}
        self.start = time.perf_counter()

    def add(self, name: str, data: bytes):
        self.files[name] = data

    def finish(self) -> Path:
        out = Path(self.args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            (out / name).write_bytes(data)
        echo = {k: v for k, v in self.cfg.items() if not k.startswith("_")}
        manifest = {
            "command": self.command,
            "config": echo,
            "config_text": self.cfg.get("_text", ""),
            "overrides": {"seed": self.args.seed, "dim": self.args.dim,
                          "solver": self.args.solver, "threads": self.args.threads},
            "version": __version__,
            "wall_seconds": time.perf_counter() - self.start,
            "outputs": {n: hashlib.sha256(d).hexdigest() for n, d in sorted(self.files.items())},
            **self.meta,
        }
        (out / "manifest.json").write_bytes(json_bytes(manifest))
        return out


# -- commands ----------------------------------------------------------------------------


def _check_wanted(cfg, solver: str | None, total_plus: int) -> bool:
    mode = cfg.get("truncation_check", "auto")
    if mode == "auto":
        return total_plus <= CHECK_DIM_LIMIT and solver in (None, "unitary")
    return mode == "true"


def cmd_spectrum(cfg, args, run: Run):
    model, info = build(cfg, args.dim)
    k = cfg.get("levels", _levels(cfg, model))
    if k < 2:
        raise ConfigError("levels must be >= 2")
    tr = spectrum_trace(model, k=k, n_samples=cfg.get("n_samples", 201))
    header = ["t_over_tau"] + [f"E{i}" for i in range(tr.levels.shape[1])] + ["tracked", "gap"]
    rows = [[t / model.tau, *lv, int(j), g]
            for t, lv, j, g in zip(tr.times, tr.levels, tr.tracked, tr.gap)]
    run.add("spectrum.csv", csv_bytes(header, rows))
    summary = {"delta_min": tr.min_gap, "t_min": tr.t_min, "t_min_over_tau": tr.t_min / model.tau,
               "manifold": tr.manifold, "sector_dim": tr.sector_dim, **info}
    if not model.kind.startswith("qubit"):
        bigger = model.space.dim + 4
        if _check_wanted(cfg, None, bigger ** model.space.n_modes):
            m2 = build_model(model.kind, model.params, bigger)
            drift = abs(spectrum_trace(m2, k=k, n_samples=cfg.get("n_samples", 201)).min_gap
                        - tr.min_gap)
            summary["truncation_drift"] = drift
            if drift > TRUNCATION_DRIFT:
                raise TruncationError(f"min gap changes by {drift:.2e} at dim {bigger}")
    run.add("summary.json", json_bytes(summary))
    run.meta["truncation_dim"] = model.space.dim
    print(f"delta_min = {tr.min_gap:.6g} K at t/tau = {tr.t_min / model.tau:.4f}")


def _anneal(cfg, args, dim=None):
    model, info = build(cfg, dim if dim is not None else args.dim)
    ecfg = evolution_config(cfg, args)
    rate = loss_rate(cfg, model)
    solver = choose_solver(model, rate, args.solver or cfg.get("solver", "auto"))
    try:
        res = run_anneal(model, rate=rate, solver=solver, config=ecfg,
                         include_fixed_loss=cfg.get("include_fixed_loss", False))
    except DimensionBudgetError as exc:
        raise ConfigError(str(exc)) from None
    return model, info, ecfg, rate, res


def cmd_anneal(cfg, args, run: Run):
    model, info, ecfg, rate, res = _anneal(cfg, args)
    n = res.scenario.n_spins
    labels = [format(i, f"0{n}b") for i in range(2 ** n)]
    header = ["t_over_tau"] + [f"P_{b}" for b in labels] + ["leakage"]
    header += [f"n_{k}" for k in range(model.space.n_modes)]
    cols = [res.times / model.tau, *res.populations.T, res.leakage, *res.mean_photons.T]
    if res.fidelity is not None:
        header.append("fidelity")
        cols.append(res.fidelity)
    if "populations" in res.stderr:
        header += [f"stderr_P_{b}" for b in labels]
        cols += list(res.stderr["populations"].T)
    run.add("anneal.csv", csv_bytes(header, zip(*cols)))
    summary = {"success": res.success, "subspace": res.subspace, "solver": res.solver,
               "rate": rate, "correct": sorted(res.scenario.correct), **info}
    if res.fidelity is not None:
        summary["fidelity"] = float(res.fidelity[-1])
    if "success" in res.stderr:
        summary["success_stderr"] = res.stderr["success"]
    if res.solver == "traj":
        summary["n_trajectories"] = ecfg.n_trajectories
    if res.stats:
        summary["solver_stats"] = {k: v for k, v in res.stats.items() if k != "wall_seconds"}
    bigger = model.space.dim + 4
    if not model.kind.startswith("qubit") and _check_wanted(cfg, res.solver,
                                                            bigger ** model.space.n_modes):
        *_, res2 = _anneal(cfg, args, bigger)
        drift = float(np.max(np.abs(res2.populations[-1] - res.populations[-1])))
        summary["truncation_drift"] = drift
        if drift > TRUNCATION_DRIFT:
            raise TruncationError(f"final populations change by {drift:.2e} at dim {bigger}")
    run.add("summary.json", json_bytes(summary))
    run.meta.update(truncation_dim=model.space.dim,
                    tolerances={"rel_tol": ecfg.rel_tol, "abs_tol": ecfg.abs_tol})
    line = f"success = {res.success:.6f}"
    if "success" in res.stderr:
        line += f" +- {res.stderr['success']:.6f}"
    print(line + f" (subspace {res.subspace:.6f}, solver {res.solver})")


def _sweep_job(job):
    cfg, args_dict = job
    args = argparse.Namespace(**args_dict)
    _, info, _, rate, res = _anneal(cfg, args)
    return res.success, res.stderr.get("success", 0.0), res.subspace, rate


def cmd_sweep(cfg, args, run: Run):
    ecfg = evolution_config(cfg, args)
    if "ratios" in cfg:
        if "family" not in cfg:
            raise ConfigError("a ratio sweep needs 'family'")
        fam = paired_family(cfg["family"], cfg.get("dim", args.dim),
                            tau_factor=cfg.get("tau_factor"))
        rows = sweep_gap_over_loss(fam, cfg["ratios"], replace(ecfg, workers=1),
                                   workers=args.threads)
        run.add("sweep.csv", csv_bytes(
            ["ratio", "success_knr", "stderr_knr", "success_qubit"],
            [[r["ratio"], r["success_knr"], r["stderr_knr"], r["success_qubit"]] for r in rows]))
        summary = {"family": fam.name, "delta_min": fam.delta_min, "tau": fam.tau,
                   "qubit_U": fam.calibration.params.U, "qubit_J": fam.calibration.params.J,
                   "qubit_C": fam.calibration.params.C,
                   "calibration_scaled": fam.calibration.scaled}
        run.add("summary.json", json_bytes(summary))
        for r in rows:
            print(f"ratio {r['ratio']:g}: knr {r['success_knr']:.4f}  qubit {r['success_qubit']:.4f}")
        return
    var = cfg.get("sweep_variable")
    if var is None or "sweep_values" not in cfg:
        raise ConfigError("a sweep needs 'ratios' (with 'family') or 'sweep_variable' "
                          "and 'sweep_values'")
    if var not in KEYS or KEYS[var] is not float:
        raise ConfigError(f"cannot sweep {var!r}")
    args_dict = {**vars(args), "threads": 1}
    jobs = [({**cfg, var: v}, args_dict) for v in cfg["sweep_values"]]
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as ex:
            out = list(ex.map(_sweep_job, jobs))
    else:
        out = [_sweep_job(j) for j in jobs]
    run.add("sweep.csv", csv_bytes([var, "success", "stderr", "subspace", "rate"],
                                   [[v, *o] for v, o in zip(cfg["sweep_values"], out)]))
    for v, o in zip(cfg["sweep_values"], out):
        print(f"{var} = {v:g}: success {o[0]:.6f}")


def cmd_wigner(cfg, args, run: Run):
    model, info = build(cfg, args.dim)
    if model.space.n_modes != 1:
        raise ConfigError("wigner snapshots need a single-mode scenario")
    ecfg = replace(evolution_config(cfg, args), store_states=True)
    rate = loss_rate(cfg, model)
    if rate > 0:
        ev = evolve_lindblad(model, model.initial_state(),
                             collapse_for(model, rate), ecfg)
    else:
        ev = evolve_unitary(model, model.initial_state(), ecfg)
    # coherent peaks sit at x = +-sqrt(2) alpha0 with unit width
    ext = math.sqrt(2) * model.params.alpha0 + 5.0
    grid = WignerGrid(cfg.get("x_range", (-ext, ext)), cfg.get("p_range", (-ext, ext)),
                      cfg.get("grid_points", 201))
    snaps = []
    for frac in cfg.get("wigner_times", [0.0, 0.5, 1.0]):
        if not 0 <= frac <= 1:
            raise ConfigError("wigner_times are fractions of tau in [0, 1]")
        i = int(round(frac * (ecfg.n_samples - 1)))
        x, p, W = wigner(ev.states[i], grid)
        name = f"wigner_{i:04d}.csv"
        rows = [[pv, *W[r]] for r, pv in enumerate(p)]
        run.add(name, csv_bytes(["p\\x", *[fmt(v) for v in x]], rows))
        snaps.append({"file": name, "t_over_tau": i / (ecfg.n_samples - 1),
                      "min": float(W.min()), "max": float(W.max())})
    run.add("summary.json", json_bytes({"snapshots": snaps, "rate": rate, **info}))
    run.meta["truncation_dim"] = model.space.dim
    print(f"wrote {len(snaps)} Wigner snapshots")


def cmd_metapotential(cfg, args, run: Run):
    p = knr_params(cfg)
    s = cfg.get("mp_s", 1.0)
    ext = cfg.get("mp_extent", 1.5 * p.alpha0 + 1.0)
    n = cfg.get("mp_points", 101)
    xs = np.linspace(-ext, ext, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    E = metapotential(X, Y, p, s=s)
    run.add("metapotential.csv", csv_bytes(
        ["x", "y", "E"], zip(X.ravel(), Y.ravel(), E.ravel())))
    peaks = metapotential_peaks(p, s=s)
    run.add("summary.json", json_bytes({
        "peaks": [{"x": x, "y": y, "E": e} for x, y, e in peaks],
        "height_difference": peaks[1][2] - peaks[0][2]}))
    for x, y, e in peaks:
        print(f"peak at ({x:.10f}, {y:.3g}) with E = {e:.10g}")


def cmd_lhz(cfg, args, run: Run):
    if "problem_file" not in cfg:
        raise ConfigError("the lhz command needs 'problem_file'")
    path = Path(cfg["problem_file"])
    if not path.is_absolute():
        path = Path(cfg.get("_config_dir", ".")) / path
    try:
        problem = parse_problem(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read problem file: {exc}") from None
    except ProblemFileError as exc:
        raise ConfigError(f"{path.name}: {exc}") from None
    try:
        layout = compile_problem(problem, cfg.get("constraint_strength"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run.add("layout.txt", layout_document(layout).encode())
    report = {"n_logical": problem.n_logical, "n_physical": layout.n_physical,
              "n_fixed": len(layout.fixed_spins), "n_plaquettes": len(layout.plaquettes)}
    if problem.n_logical <= 12:
        v = verify(problem, layout)
        report.update(logical_energy=v.logical_energy, logical_minima=v.logical_minima,
                      physical_minima=v.physical_minima, decoded_match=v.decoded_match,
                      full_physical_scan=v.full_scan, verification=v.summary())
    run.add("verification.json", json_bytes(report))
    print(f"{layout.n_physical} physical spins, {len(layout.fixed_spins)} fixed, "
          f"{len(layout.plaquettes)} plaquettes")
    if "verification" in report:
        print(report["verification"])


COMMANDS = {"spectrum": cmd_spectrum, "anneal": cmd_anneal, "sweep": cmd_sweep,
            "wigner": cmd_wigner, "metapotential": cmd_metapotential, "lhz": cmd_lhz}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knr-anneal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override rng_seed")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for sweeps and trajectory batches")
        sp.add_argument("--dim", type=int, default=None, help="per-mode Fock truncation")
        sp.add_argument("--solver", choices=("auto", "unitary", "lindblad", "traj"),
                        default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.dim is not None and args.dim < 2:
            raise ConfigError("--dim must be >= 2")
        cfg = load_config(args.config)
        run = Run(args.command, cfg, args)
        COMMANDS[args.command](cfg, args, run)
        run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, TruncationError, CalibrationError, GridError, ArpackError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
