"""Comparison of anticipated BSDE solutions, gated so that the ordering is guaranteed.

An instance pairs two Y-anticipated problems. It is accepted only if the
first driver's z-constant passes ``c2 ||Psi_i^+||_F sqrt(6m) <= 1`` for all
states, the first driver is increasing in its anticipated slot, neither
driver reads the anticipated Z, and ``xi^1 <= xi^2`` on the terminal
segment. After solving, ``f_1 <= f_2`` is checked on the second solution.
Accepted instances must then satisfy ``u^1 <= u^2 + tol`` everywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .abse import (AnticipatedDriver, AnticipatedProblem, DelaySpec, TerminalSegment,
                   anticipated_values, solve_anticipated)
from .bsde import Grid
from .chain import RateMatrix
from .errors import PreconditionError

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class AssumptionReport:
    c2: float
    per_state: np.ndarray
    max_value: float
    satisfied: bool


def check_assumption(A: RateMatrix, c2: float) -> AssumptionReport:
    """``c2 ||Psi^+(e_i)||_F sqrt(6m)`` for every state, against the bound 1."""
    norms = np.linalg.norm(A.psi_dagger_stack, axis=(1, 2))
    per_state = c2 * norms * math.sqrt(6.0 * A.m_bound)
    top = float(per_state.max())
    return AssumptionReport(float(c2), per_state, top, top <= 1.0)


@dataclass(frozen=True)
class ProbeResult:
    passed: bool
    witness: dict | None = None

    def __bool__(self):
        return self.passed


def _probe_args(rng, n_states: int, horizon: float):
    t = float(rng.uniform(0.0, horizon))
    i = int(rng.integers(n_states))
    y = float(rng.normal(scale=2.0))
    z = rng.normal(scale=2.0, size=n_states)
    za = rng.normal(scale=2.0, size=n_states)
    return t, i, y, z, za


def monotonicity_probe(driver: AnticipatedDriver, n_probes: int = 200, rng_seed: int = 0,
                       n_states: int = 2, horizon: float = 1.0) -> ProbeResult:
    """Random check that ``f`` is increasing in its anticipated-Y argument."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(n_probes):
        t, i, y, z, za = _probe_args(rng, n_states, horizon)
        lo, hi = np.sort(rng.normal(scale=2.0, size=2))
        f_lo = driver.eval(t, y, z, float(lo), za, i)
        f_hi = driver.eval(t, y, z, float(hi), za, i)
        if f_lo > f_hi + 1e-12 * max(1.0, abs(f_lo)):
            return ProbeResult(False, dict(t=t, state=i, y=y, z=z.tolist(), y_ant=(float(lo), float(hi)),
                                           values=(float(f_lo), float(f_hi))))
    return ProbeResult(True)


def z_anticipation_probe(driver: AnticipatedDriver, n_probes: int = 50, rng_seed: int = 0,
                         n_states: int = 2, horizon: float = 1.0) -> ProbeResult:
    """Random check that ``f`` ignores its anticipated-Z argument."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(n_probes):
        t, i, y, z, za = _probe_args(rng, n_states, horizon)
        ya = float(rng.normal(scale=2.0))
        f1 = driver.eval(t, y, z, ya, za, i)
        f2 = driver.eval(t, y, z, ya, rng.normal(scale=2.0, size=n_states), i)
        if f1 != f2:
            return ProbeResult(False, dict(t=t, state=i, values=(float(f1), float(f2))))
    return ProbeResult(True)


@dataclass(frozen=True)
class ComparisonInstance:
    driver_1: AnticipatedDriver
    driver_2: AnticipatedDriver
    xi_1: TerminalSegment
    xi_2: TerminalSegment
    delay: DelaySpec
    T: float
    pi0: np.ndarray | None = None

    def problems(self):
        return (AnticipatedProblem(self.driver_1, self.delay, self.xi_1, self.T, self.pi0),
                AnticipatedProblem(self.driver_2, self.delay, self.xi_2, self.T, self.pi0))


@dataclass(frozen=True)
class ComparisonReport:
    max_violation: float
    location: tuple  # (t, state) of the largest u1 - u2
    violated: bool
    rechecked: bool
    gap_at_start: np.ndarray  # u2(0, .) - u1(0, .)
    surfaces: tuple = ()  # the two solved surfaces behind the reported numbers


def _gate(instance: ComparisonInstance, A: RateMatrix, grid: Grid, rng_seed: int) -> None:
    n = A.n_states
    report = check_assumption(A, instance.driver_1.c2)
    if not report.satisfied:
        raise PreconditionError(f"assumption on c2 fails: max value {report.max_value:.4g} > 1")
    probe = monotonicity_probe(instance.driver_1, rng_seed=rng_seed, n_states=n, horizon=instance.T)
    if not probe:
        raise PreconditionError(f"driver_1 is not increasing in the anticipated Y: {probe.witness}")
    for name, drv in (("driver_1", instance.driver_1), ("driver_2", instance.driver_2)):
        if not z_anticipation_probe(drv, rng_seed=rng_seed, n_states=n, horizon=instance.T):
            raise PreconditionError(f"{name} depends on the anticipated Z")
    T, K = instance.T, instance.delay.K
    n_T = grid.node_index(T)
    for t in grid.nodes[n_T:]:
        if t > T + K + 1e-12:
            break
        gap = instance.xi_2.xi_vector(t, n) - instance.xi_1.xi_vector(t, n)
        if gap.min() < 0:
            raise PreconditionError(f"xi_1 exceeds xi_2 at t={t:.6g}")


def _driver_gap(instance: ComparisonInstance, A: RateMatrix, problem_2: AnticipatedProblem, surface_2):
    """``min (f_2 - f_1)`` over nodes of ``[0, T]`` and states on the second solution."""
    y_hat, z_hat = anticipated_values(problem_2, A, surface_2)
    f1, f2 = instance.driver_1.eval, instance.driver_2.eval
    nodes = surface_2.grid.nodes
    worst = math.inf
    for k in range(y_hat.shape[0]):
        t = nodes[k]
        for i in range(A.n_states):
            args = (t, surface_2.u[k, i], surface_2.z[k, i], y_hat[k, i], z_hat[k, i], i)
            worst = min(worst, f2(*args) - f1(*args))
    return worst


def _ordering(instance: ComparisonInstance, A: RateMatrix, grid: Grid):
    p1, p2 = instance.problems()
    s1, _ = solve_anticipated(p1, A, grid)
    s2, _ = solve_anticipated(p2, A, grid)
    worst = _driver_gap(instance, A, p2, s2)
    if worst < -1e-12:
        raise PreconditionError(f"f_1 > f_2 on the second solution (by {-worst:.3g})")
    n_T = grid.node_index(instance.T)
    diff = s1.u[: n_T + 1] - s2.u[: n_T + 1]
    k, i = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[k, i]), (float(grid.nodes[k]), int(i)), s2.u[0] - s1.u[0], (s1, s2)


def run_comparison(instance: ComparisonInstance, A: RateMatrix, grid: Grid,
                   tol: float = DEFAULT_TOL, rng_seed: int = 0) -> ComparisonReport:
    """Gate, solve both problems and measure ``max (u^1 - u^2)`` on ``[0, T]``.

    A violation above ``tol`` is recomputed on a grid with twice as many
    steps and only reported if it persists there. Gate failures raise
    :class:`PreconditionError`.
    """
    _gate(instance, A, grid, rng_seed)
    worst, where, gap, surfaces = _ordering(instance, A, grid)
    rechecked = False
    if worst > tol:
        rechecked = True
        worst, where, gap, surfaces = _ordering(instance, A, grid.refined(2))
    return ComparisonReport(worst, where, worst > tol, rechecked, gap, surfaces)


# --------------------------------------------------------------------------
# randomized sweep


def seminorm_term(A: RateMatrix):
    psi = A.psi_stack

    def norm(z, i):
        q = float(z @ psi[i] @ z)
        return math.sqrt(q) if q > 0 else 0.0

    return norm


def family_driver(A: RateMatrix, k: float, kappa: float, mu: float, g_amp, g_freq: float) -> AnticipatedDriver:
    """``-k y + kappa ||z||_X + mu max(y_ant, 0) + g(t, state)``."""
    norm = seminorm_term(A)
    amp = np.asarray(g_amp, dtype=float)

    def f(t, y, z, ya, za, i):
        return -k * y + kappa * norm(z, i) + mu * max(ya, 0.0) + amp[i] * math.sin(g_freq * t + i)

    return AnticipatedDriver(f, max(abs(k), abs(mu)), abs(kappa))


def shifted_driver(base: AnticipatedDriver, lift: float, freq: float) -> AnticipatedDriver:
    """``base + lift (1 + cos(freq t + state)) / 2``, a nonnegative shift."""
    f0 = base.eval

    def f(t, y, z, ya, za, i):
        return f0(t, y, z, ya, za, i) + lift * 0.5 * (1.0 + math.cos(freq * t + i))

    return AnticipatedDriver(f, base.c1, base.c2)


def linear_terminal(level, slope) -> TerminalSegment:
    level = np.asarray(level, dtype=float)
    slope = np.asarray(slope, dtype=float)
    zeros = np.zeros(level.size)
    return TerminalSegment(lambda t, i: level[i] + slope[i] * t, lambda t, i: zeros)


@dataclass(frozen=True)
class SweepCase:
    instance_id: int
    instance: ComparisonInstance
    A: RateMatrix
    grid: Grid
    planted: str  # "" for a valid instance, else the gate it is built to fail


def sweep_cases(n_instances: int = 30, seed: int = 0, n_steps_per_unit: int = 100,
                reject_every: int = 6) -> list:
    """Seeded instance family; every ``reject_every``-th case is built to fail a gate."""
    cases = []
    for idx in range(n_instances):
        rng = np.random.default_rng([seed, idx])
        n = int(rng.integers(2, 5))
        A = RateMatrix.random(n, rng)
        ceiling = 1.0 / check_assumption(A, 1.0).max_value
        T = float(rng.choice([0.5, 1.0]))
        if rng.random() < 0.5:
            theta = float(rng.choice([0.1, 0.2, 0.25]))
            delay = DelaySpec.constant(theta, 0.0)
        else:
            delay = DelaySpec.affine_capped(float(rng.uniform(0.1, 0.2)), float(rng.uniform(-0.05, 0.2)), 0.3,
                                            zeta=(0.0, 0.0, 0.0))
        planted = ""
        kappa = float(rng.uniform(0.0, 0.95)) * ceiling
        mu = float(rng.uniform(0.0, 1.0))
        if reject_every and idx % reject_every == reject_every - 1:
            if (idx // reject_every) % 2 == 0:
                planted, mu = "monotonicity", -float(rng.uniform(0.2, 1.0))
            else:
                planted, kappa = "assumption", float(rng.uniform(1.5, 3.0)) * ceiling
        base = family_driver(A, float(rng.uniform(-0.5, 1.0)), kappa, mu,
                             rng.uniform(-1.0, 1.0, size=n), float(rng.uniform(0.5, 4.0)))
        lift = 0.0 if rng.random() < 0.2 else float(rng.uniform(0.0, 0.5))
        level = rng.uniform(-1.0, 1.0, size=n)
        slope = rng.uniform(-0.5, 0.5, size=n)
        bump = 0.0 if rng.random() < 0.2 else 1.0
        instance = ComparisonInstance(
            base, shifted_driver(base, lift, float(rng.uniform(0.5, 3.0))),
            linear_terminal(level, slope),
            linear_terminal(level + bump * np.abs(rng.normal(scale=0.3, size=n)), slope),
            delay, T)
        grid = Grid.with_step(0.0, T + delay.K, 1.0 / n_steps_per_unit) if delay.K > 0 \
            else Grid(0.0, T, int(round(T * n_steps_per_unit)))
        cases.append(SweepCase(idx, instance, A, grid, planted))
    return cases


@dataclass(frozen=True)
class SweepRow:
    instance_id: int
    status: str  # accepted | rejected
    max_violation: float
    location: tuple
    reason: str
    planted: str
    surfaces: tuple = ()


def run_sweep(cases, tol: float = DEFAULT_TOL) -> list:
    rows = []
    for case in cases:
        try:
            rep = run_comparison(case.instance, case.A, case.grid, tol, rng_seed=case.instance_id)
        except PreconditionError as exc:
            rows.append(SweepRow(case.instance_id, "rejected", math.nan, (math.nan, -1), str(exc),
                                 case.planted))
            continue
        reason = "ordering violated" if rep.violated else ""
        rows.append(SweepRow(case.instance_id, "accepted", rep.max_violation, rep.location, reason,
                             case.planted, rep.surfaces))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "max_violation", "location_t", "location_state", "status", "reason"])
        for r in rows:
            w.writerow([r.instance_id, f"{r.max_violation:.17g}", f"{r.location[0]:.17g}",
                        r.location[1], r.status, r.reason])
