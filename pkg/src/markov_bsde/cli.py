"""Configuration-driven command line: one JSON file, one command.

Exit codes: 0 success, 2 invalid configuration or failed precondition,
3 numerical or convergence failure, 4 property violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .abse import AnticipatedProblem, apriori_estimate_check, solve_anticipated
from .bsde import ClassicDriver, Grid, solve_classical
from .chain import RateMatrix, simulate_paths
from .compare import (ComparisonInstance, run_comparison, run_sweep, sweep_cases,
                      write_sweep_csv)
from .errors import ConvergenceError, NumericalError, ValidationError
from .registry import build_delays, build_driver, build_terminal, linear_coefficients
from .sdde import anticipated_problem, duality_estimate

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_VIOLATION = 0, 2, 3, 4
OUTPUT_ENV = "MARKOV_BSDE_OUTPUT_DIR"
COMMANDS = ("simulate-chain", "solve-bsde", "solve-abse", "verify-duality",
            "check-comparison", "check-estimate")


class PropertyViolation(Exception):
    """A verified property failed; maps to exit code 4."""


def fmt(x) -> str:
    return f"{float(x):.17g}"


@dataclass
class RunConfig:
    command: str
    raw: dict
    A: RateMatrix
    pi0: np.ndarray
    initial_states: list
    T: float
    n_steps: int
    seed: int
    n_paths: int
    output_dir: Path

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    def block(self, name: str) -> dict:
        b = self.raw.get(name)
        if not isinstance(b, dict):
            raise ValidationError(f"config needs a '{name}' block")
        return b


@dataclass
class Outcome:
    code: int = EXIT_OK
    message: str = "ok"
    outputs: list = field(default_factory=list)


def load_config(path: Path) -> RunConfig:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be an object")
    command = raw.get("command")
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    chain = raw.get("chain") or {}
    if "rates" not in chain:
        raise ValidationError("chain block needs 'rates'")
    A = RateMatrix(np.array(chain["rates"], dtype=float))
    n = A.n_states
    pi0 = np.asarray(chain.get("initial_distribution", np.full(n, 1.0 / n)), dtype=float)
    if pi0.shape != (n,) or pi0.min() < 0 or abs(pi0.sum() - 1.0) > 1e-9:
        raise ValidationError("initial_distribution must be a probability vector of length N")
    states = chain.get("initial_states", list(range(n)))
    states = [A.check_state(s) for s in states]
    grid = raw.get("grid") or {}
    T = float(grid.get("T", 1.0))
    n_steps = grid.get("n_steps", 200)
    if not T > 0 or int(n_steps) != n_steps or n_steps < 1:
        raise ValidationError("grid needs T > 0 and a positive integer n_steps")
    mc = raw.get("mc") or {}
    seed, n_paths = mc.get("seed", 0), mc.get("n_paths", 10_000)
    if int(seed) != seed or int(n_paths) != n_paths or n_paths < 2:
        raise ValidationError("mc needs an integer seed and n_paths >= 2")
    env = os.environ.get(OUTPUT_ENV)
    if env:
        out = Path(env)
    else:
        out = Path((raw.get("output") or {}).get("directory", "output"))
        if not out.is_absolute():
            out = path.parent / out
    return RunConfig(command, raw, A, pi0, states, T, int(n_steps), int(seed), int(n_paths), out)


def _extended_grid(cfg: RunConfig, K: float) -> Grid:
    if K == 0:
        return Grid(0.0, cfg.T, cfg.n_steps)
    extra = round(K / cfg.h)
    if abs(extra * cfg.h - K) > 1e-9 * max(1.0, K):
        raise ValidationError(f"K = {K} is not a multiple of the grid step {cfg.h}")
    return Grid(0.0, cfg.T + K, cfg.n_steps + extra)


def _anticipated(cfg: RunConfig):
    driver = build_driver(cfg.block("driver"), cfg.A)
    delays = build_delays(cfg.block("delays"))
    terminal = build_terminal(cfg.block("terminal"), cfg.A.n_states)
    problem = AnticipatedProblem(driver, delays, terminal, cfg.T, cfg.pi0)
    return problem, _extended_grid(cfg, delays.K)


def _solve(cfg: RunConfig, out: Outcome):
    problem, grid = _anticipated(cfg)
    iteration = cfg.raw.get("iteration") or {}
    surface, report = solve_anticipated(problem, cfg.A, grid, float(iteration.get("tol", 1e-9)),
                                        int(iteration.get("max_iter", 60)))
    _write(cfg, out, "surface.csv", surface.to_csv)
    _write(cfg, out, "iterations.csv", report.to_csv)
    return problem, grid, surface


def _write(cfg: RunConfig, out: Outcome, name: str, writer) -> None:
    path = cfg.output_dir / name
    writer(path)
    out.outputs.append(name)


def _write_rows(cfg: RunConfig, out: Outcome, name: str, header, rows) -> None:
    def emit(path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    _write(cfg, out, name, emit)


# --------------------------------------------------------------------------
# commands


def cmd_simulate_chain(cfg: RunConfig, out: Outcome) -> None:
    batch = simulate_paths(cfg.A, cfg.pi0, cfg.T, cfg.n_paths, cfg.seed)
    rows = []
    for p in range(len(batch)):
        path = batch.path(p)
        times = np.concatenate([[path.start], path.jump_times])
        rows.extend([p, fmt(t), int(s)] for t, s in zip(times, path.states))
    _write_rows(cfg, out, "paths.csv", ["path", "time", "state"], rows)


def cmd_solve_bsde(cfg: RunConfig, out: Outcome) -> None:
    drv = build_driver(cfg.block("driver"), cfg.A)
    f = drv.eval
    # without anticipation the anticipated slots read the current values
    driver = ClassicDriver(lambda t, y, z, i: f(t, y, z, y, z, i), 2 * drv.c1, 2 * drv.c2)
    terminal = build_terminal(cfg.block("terminal"), cfg.A.n_states).xi_vector(cfg.T, cfg.A.n_states)
    surface = solve_classical(terminal, driver, cfg.A, Grid(0.0, cfg.T, cfg.n_steps))
    _write(cfg, out, "surface.csv", surface.to_csv)


def cmd_solve_abse(cfg: RunConfig, out: Outcome) -> None:
    _solve(cfg, out)


def cmd_check_estimate(cfg: RunConfig, out: Outcome) -> None:
    problem, grid, surface = _solve(cfg, out)
    chk = apriori_estimate_check(problem, surface, cfg.A, grid, cfg.n_paths, cfg.seed)
    d1, d2, d3 = chk.data_terms
    _write_rows(cfg, out, "estimate.csv",
                ["lhs", "rhs", "C", "holds", "sup_term", "sup_std_error", "z_term", "d1", "d2", "d3"],
                [[fmt(chk.lhs), fmt(chk.rhs), fmt(chk.C), int(chk.holds), fmt(chk.sup_term),
                  fmt(chk.sup_std_error), fmt(chk.z_term), fmt(d1), fmt(d2), fmt(d3)]])
    if not chk.holds:
        raise PropertyViolation(f"estimate fails: lhs {chk.lhs:.6g} > rhs {chk.rhs:.6g}")


def cmd_verify_duality(cfg: RunConfig, out: Outcome) -> None:
    drv_block = cfg.block("driver")
    if drv_block.get("name") != "linear":
        raise ValidationError("verify-duality needs the 'linear' driver")
    delays = build_delays(cfg.block("delays"))
    theta = delays.delta(0.0)
    if not (theta > 0 and all(delays.delta(t) == theta and delays.zeta(t) == theta
                              for t in np.linspace(0.0, cfg.T, 11))):
        raise ValidationError("verify-duality needs equal constant delays delta = zeta = theta > 0")
    n = cfg.A.n_states
    coeffs = linear_coefficients(drv_block.get("params", {}), n, theta)
    terminal = build_terminal(cfg.block("terminal"), n)
    grid = _extended_grid(cfg, theta)
    problem = anticipated_problem(coeffs, terminal.xi, terminal.eta, cfg.A, cfg.T, grid, cfg.pi0)
    surface, _ = solve_anticipated(problem, cfg.A, grid)
    mc = cfg.raw.get("mc") or {}
    steps = int(mc.get("steps_per_delay", 25))
    rows, failed = [], []
    for k, state in enumerate(cfg.initial_states):
        est = duality_estimate(coeffs, terminal.xi, terminal.eta, cfg.A, 0.0, cfg.n_paths,
                               cfg.seed + k, T=cfg.T, initial_state=state, steps_per_delay=steps)
        solver = surface.u[0, state]
        gap = solver - est.estimate
        ok = abs(gap) <= 3.0 * est.std_error
        rows.append([state, fmt(solver), fmt(est.estimate), fmt(est.std_error), fmt(gap), int(ok)])
        if not ok:
            failed.append(state)
    _write_rows(cfg, out, "duality.csv",
                ["state", "solver", "estimate", "std_error", "gap", "within_3se"], rows)
    if failed:
        raise PropertyViolation(f"duality gap above 3 standard errors for states {failed}")


def cmd_check_comparison(cfg: RunConfig, out: Outcome) -> None:
    block = cfg.block("comparison")
    tol = float(block.get("tol", 1e-8))
    if "sweep" in block:
        sw = block["sweep"]
        rows = run_sweep(sweep_cases(int(sw.get("n_instances", 30)), int(sw.get("seed", cfg.seed)),
                                     int(sw.get("steps_per_unit", 100))), tol)
        _write(cfg, out, "comparison.csv", lambda p: write_sweep_csv(rows, p))
        bad = [r.instance_id for r in rows if r.status == "accepted" and r.max_violation > tol]
        if bad:
            raise PropertyViolation(f"ordering violated on instances {bad}")
        return
    n = cfg.A.n_states
    delays = build_delays(cfg.block("delays"))
    instance = ComparisonInstance(build_driver(block["driver_1"], cfg.A), build_driver(block["driver_2"], cfg.A),
                                  build_terminal({"xi": block["xi_1"]}, n),
                                  build_terminal({"xi": block["xi_2"]}, n), delays, cfg.T, cfg.pi0)
    rep = run_comparison(instance, cfg.A, _extended_grid(cfg, delays.K), tol, rng_seed=cfg.seed)
    _write_rows(cfg, out, "comparison.csv",
                ["instance_id", "max_violation", "location_t", "location_state", "status", "reason"],
                [[0, fmt(rep.max_violation), fmt(rep.location[0]), rep.location[1], "accepted",
                  "ordering violated" if rep.violated else ""]])
    if rep.violated:
        raise PropertyViolation(f"ordering violated by {rep.max_violation:.3g} at {rep.location}")


DISPATCH = {
    "simulate-chain": cmd_simulate_chain,
    "solve-bsde": cmd_solve_bsde,
    "solve-abse": cmd_solve_abse,
    "verify-duality": cmd_verify_duality,
    "check-comparison": cmd_check_comparison,
    "check-estimate": cmd_check_estimate,
}


# --------------------------------------------------------------------------
# entry point


def _write_manifest(cfg: RunConfig, config_bytes: bytes, out: Outcome) -> None:
    lines = [
        f"command: {cfg.command}",
        f"config_sha256: {hashlib.sha256(config_bytes).hexdigest()}",
        f"seed: {cfg.seed}",
        f"version: {__version__}",
        f"exit_code: {out.code}",
        f"outputs: {', '.join(out.outputs)}",
        f"message: {out.message}",
    ]
    (cfg.output_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def run(config_path) -> int:
    path = Path(config_path)
    if not path.is_file():
        print(f"error: config file not found: {path}", file=sys.stderr)
        return EXIT_INVALID
    config_bytes = path.read_bytes()
    try:
        cfg = load_config(path)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except (ValidationError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = Outcome()
    try:
        DISPATCH[cfg.command](cfg, out)
    except PropertyViolation as exc:
        out.code, out.message = EXIT_VIOLATION, str(exc)
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        out.code, out.message = EXIT_NUMERICAL, str(exc)
    except (ValidationError, KeyError, TypeError, ValueError) as exc:
        out.code, out.message = EXIT_INVALID, f"{type(exc).__name__}: {exc}"
    _write_manifest(cfg, config_bytes, out)
    if out.code != EXIT_OK:
        print(f"error: {out.message}", file=sys.stderr)
    return out.code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="markov-bsde", description=__doc__.splitlines()[0])
    parser.add_argument("config", help="JSON configuration file")
    args = parser.parse_args(argv)
    return run(args.config)


if __name__ == "__main__":
    sys.exit(main())
