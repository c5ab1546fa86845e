"""Anticipated BSDEs on a finite-state chain by Picard iteration.

The equation is

    -dY_t = f(t, Y_t, Z_t, E_t[Y_{t+delta(t)}], E_t[Z_{t+zeta(t)}]) dt - Z_t' dM_t,   t in [0, T]
     Y_t = xi_t,  Z_t = eta_t,                                                     t in [T, T+K].

Each sweep freezes the anticipated arguments at the previous iterate and
runs one classical backward solve. Conditional expectations are exact:
``E[u(t+d, X_{t+d}) | X_t = e_i] = sum_j exp(A d)[j, i] u(t+d, j)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import (NODE_TOL, Grid, SolutionSurface, check_step_size, integrate_backward,
                   project, substeps_for)
from .chain import RateMatrix, seminorms, simulate_paths, transition_matrix
from .errors import ConvergenceError, DelaySpecError, GridError, ValidationError

CONTRACTION_BOUND = 1.0 / math.sqrt(2.0)


# --------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class DelaySpec:
    """Anticipation offsets ``delta``, ``zeta`` with horizon extension ``K`` and constant ``L``."""

    delta: Callable
    zeta: Callable
    K: float
    L: float

    def __post_init__(self):
        if self.K < 0 or not math.isfinite(self.K):
            raise DelaySpecError(f"K must be a finite nonnegative number, got {self.K}")
        if not self.L > 0 or not math.isfinite(self.L):
            raise DelaySpecError(f"L must be a finite positive number, got {self.L}")

    @classmethod
    def constant(cls, delta: float, zeta: float | None = None) -> "DelaySpec":
        zeta = delta if zeta is None else zeta
        if delta < 0 or zeta < 0:
            raise DelaySpecError("delays must be nonnegative")
        return cls(lambda t: delta, lambda t: zeta, max(delta, zeta), 1.0)

    @classmethod
    def affine_capped(cls, intercept: float, slope: float, cap: float,
                      zeta: "tuple | None" = None) -> "DelaySpec":
        """``delta(s) = min(intercept + slope * s, cap)``, clipped at zero.

        ``zeta`` is an ``(intercept, slope, cap)`` triple or ``None`` to reuse
        ``delta``. ``s -> s + delta(s)`` has slope at least ``1 + min(slope, 0)``,
        so ``L = max(1, 1 / (1 + min(slope, 0)))``.
        """
        forms = [(intercept, slope, cap), zeta if zeta is not None else (intercept, slope, cap)]
        for c0, c1, cp in forms:
            if c1 <= -1:
                raise DelaySpecError(f"slope must exceed -1, got {c1}")
            if cp < 0:
                raise DelaySpecError(f"cap must be nonnegative, got {cp}")

        def make(c0, c1, cp):
            return lambda t: min(max(c0 + c1 * t, 0.0), cp)

        L = max(max(1.0, 1.0 / (1.0 + min(c1, 0.0))) for _, c1, _ in forms)
        return cls(make(*forms[0]), make(*forms[1]), max(forms[0][2], forms[1][2]), L)

    def validate(self, T: float, grid: Grid, samples_per_cell: int = 32) -> None:
        """Check both hypotheses on the grid; raises :class:`DelaySpecError`."""
        horizon = T + self.K
        slack = NODE_TOL * max(1.0, horizon)
        n_t = round((T - grid.t_start) / grid.h)
        s_half = grid.t_start + 0.5 * grid.h * np.arange(2 * n_t + 1)
        for name, fn in (("delta", self.delta), ("zeta", self.zeta)):
            d = np.array([fn(s) for s in s_half])
            if not np.all(np.isfinite(d)) or d.min() < 0:
                raise DelaySpecError(f"{name} must be finite and nonnegative on [0, T]")
            if np.max(s_half + d) > horizon + slack:
                k = int(np.argmax(s_half + d))
                raise DelaySpecError(f"s + {name}(s) exceeds T+K at s={s_half[k]:.6g}")
            # change of variables, tested with g = indicator of each cell of [t_start, T+K]
            r = samples_per_cell
            s = grid.t_start + grid.h * (np.arange(n_t * r) + 0.5) / r
            shifted = s + np.array([fn(x) for x in s])
            cells = np.floor((shifted - grid.t_start) / grid.h + 1e-12).astype(int)
            n_cells = round((horizon - grid.t_start) / grid.h)
            cells = np.clip(cells, 0, max(n_cells - 1, 0))
            mass = np.bincount(cells, minlength=max(n_cells, 1)) * grid.h / r
            bound = self.L * grid.h + 4.0 * grid.h / r
            if mass.max() > bound:
                k = int(np.argmax(mass))
                raise DelaySpecError(
                    f"{name} violates the change-of-variables bound on cell {k}: "
                    f"{mass[k]:.6g} > L*h = {self.L * grid.h:.6g}")


@dataclass(frozen=True)
class AnticipatedDriver:
    """``f(t, y, z, y_ant, z_ant, state)`` with Lipschitz constants ``c1`` (y slots) and ``c2`` (z slots)."""

    eval: Callable
    c1: float = 0.0
    c2: float = 0.0

    @property
    def c(self) -> float:
        return max(self.c1, self.c2)


@dataclass(frozen=True)
class TerminalSegment:
    """``xi(t, state)`` and ``eta(t, state)`` on ``[T, T+K]``."""

    xi: Callable
    eta: Callable

    @classmethod
    def constant(cls, values, eta_values=None) -> "TerminalSegment":
        v = np.array(values, dtype=float)
        e = np.zeros((v.size, v.size)) if eta_values is None else np.array(eta_values, dtype=float)
        return cls(lambda t, i: v[i], lambda t, i: e[i])

    def xi_vector(self, t: float, n: int) -> np.ndarray:
        return np.array([self.xi(t, i) for i in range(n)], dtype=float)

    def eta_projected(self, t: float, A: RateMatrix) -> np.ndarray:
        """``Psi_i Psi_i^+ eta(t, i)`` stacked over states, shape (N, N)."""
        e = np.array([np.asarray(self.eta(t, i), dtype=float) for i in range(A.n_states)])
        return np.einsum("ijk,ik->ij", A.projections, e)


@dataclass(frozen=True)
class AnticipatedProblem:
    driver: AnticipatedDriver
    delays: DelaySpec
    terminal: TerminalSegment
    T: float
    pi0: np.ndarray | None = None

    def initial_law(self, n: int) -> np.ndarray:
        if self.pi0 is None:
            return np.full(n, 1.0 / n)
        pi0 = np.asarray(self.pi0, dtype=float)
        if pi0.shape != (n,) or pi0.min() < 0 or abs(pi0.sum() - 1.0) > 1e-9:
            raise ValidationError("pi0 must be a probability vector over the chain's states")
        return pi0

    @property
    def beta(self) -> float:
        c = self.driver.c
        return 16.0 * c * c * (self.delays.L + 1.0)


@dataclass
class IterationReport:
    beta: float
    diff_norms: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iterations(self) -> int:
        return len(self.diff_norms)

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.diff_norms, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = d[1:] / d[:-1]
        # two exact zeros in a row mean the map stopped moving
        return np.where((d[:-1] == 0) & (d[1:] == 0), 0.0, r)

    def to_csv(self, path) -> None:
        ratios = self.ratios
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "diff_norm", "ratio", "beta", "converged"])
            for k, d in enumerate(self.diff_norms):
                r = f"{ratios[k - 1]:.17g}" if k > 0 else ""
                w.writerow([k + 1, f"{d:.17g}", r, f"{self.beta:.17g}", int(self.converged)])


# --------------------------------------------------------------------------
# solver internals


@dataclass(frozen=True, eq=False)
class _Layout:
    """Grid bookkeeping shared by the sweeps of one solve."""

    grid: Grid
    substeps: int
    n_T: int          # node index of T
    pi_nodes: np.ndarray  # (n_T + 1, N) state law at nodes in [t_start, T]
    y_times: np.ndarray   # (2 n_T s + 1,) anticipated time for every stage
    z_times: np.ndarray
    y_trans: np.ndarray   # (2 n_T s + 1, N, N) exp(A delta)
    z_trans: np.ndarray
    xi_at_y: np.ndarray   # (2 n_T s + 1, N) xi at anticipated times >= T (nan below)
    eta_at_z: np.ndarray  # (2 n_T s + 1, N, N)
    tail_u: np.ndarray    # terminal segment on nodes n_T..n
    tail_z: np.ndarray


def _layout(problem: AnticipatedProblem, A: RateMatrix, grid: Grid,
            substeps: int | None = None) -> _Layout:
    T = problem.T
    n_T = round((T - grid.t_start) / grid.h)
    if n_T < 1 or abs(grid.t_start + n_T * grid.h - T) > NODE_TOL * max(1.0, abs(T)):
        raise GridError(f"T = {T} is not an interior grid node")
    if grid.t_end < T + problem.delays.K - NODE_TOL * max(1.0, T + problem.delays.K):
        raise GridError(f"grid ends at {grid.t_end}, before T+K = {T + problem.delays.K}")
    problem.delays.validate(T, grid)

    n = A.n_states
    sub = substeps_for(A, grid.h) if substeps is None else int(substeps)
    s = grid.t_start + (grid.h / (2 * sub)) * np.arange(2 * n_T * sub + 1)
    dy = np.array([problem.delays.delta(x) for x in s], dtype=float)
    dz = np.array([problem.delays.zeta(x) for x in s], dtype=float)
    positive = np.concatenate([dy[dy > 0], dz[dz > 0]])
    if positive.size and grid.h > positive.min() + NODE_TOL:
        warnings.warn(f"grid step {grid.h:.3g} exceeds the smallest nonzero delay "
                      f"{positive.min():.3g}", RuntimeWarning, stacklevel=3)

    cache: dict = {}

    def trans(d):
        if d not in cache:
            cache[d] = transition_matrix(A, d)
        return cache[d]

    y_t, z_t = s + dy, s + dz
    at_end = T - NODE_TOL * max(1.0, abs(T))
    xi_y = np.full((s.size, n), np.nan)
    eta_z = np.full((s.size, n, n), np.nan)
    for m in range(s.size):
        if y_t[m] >= at_end:
            xi_y[m] = problem.terminal.xi_vector(max(y_t[m], T), n)
        if z_t[m] >= at_end:
            eta_z[m] = problem.terminal.eta_projected(max(z_t[m], T), A)

    nodes = grid.nodes
    tail_u = np.stack([problem.terminal.xi_vector(t, n) for t in nodes[n_T:]])
    tail_z = np.stack([problem.terminal.eta_projected(t, A) for t in nodes[n_T:]])
    if not (np.all(np.isfinite(tail_u)) and np.all(np.isfinite(tail_z))):
        raise ValidationError("terminal segment is not finite on the extended grid")

    step = transition_matrix(A, grid.h)
    pi = np.empty((n_T + 1, n))
    pi[0] = problem.initial_law(n)
    for k in range(n_T):
        pi[k + 1] = step @ pi[k]

    return _Layout(grid, sub, n_T, pi, y_t, z_t,
                   np.stack([trans(float(d)) for d in dy]), np.stack([trans(float(d)) for d in dz]),
                   xi_y, eta_z, tail_u, tail_z)


def _interp_nodes(values: np.ndarray, grid: Grid, n_T: int, times: np.ndarray) -> np.ndarray:
    """Linear interpolation of node values on ``[t_start, T]`` (leading axis) at ``times``."""
    x = (times - grid.t_start) / grid.h
    k = np.clip(np.floor(x).astype(int), 0, n_T - 1)
    w = np.clip(x - k, 0.0, 1.0)
    w = w.reshape(w.shape + (1,) * (values.ndim - 1))
    return (1.0 - w) * values[k] + w * values[k + 1]


def _anticipated_inputs(lay: _Layout, u: np.ndarray, z: np.ndarray):
    """``(y_hat, z_hat)`` at every stage time of ``[t_start, T]``."""
    below_y = np.isnan(lay.xi_at_y[:, 0])
    below_z = np.isnan(lay.eta_at_z[:, 0, 0])
    u_bar = lay.xi_at_y.copy()
    z_bar = lay.eta_at_z.copy()
    if below_y.any():
        u_bar[below_y] = _interp_nodes(u[:lay.n_T + 1], lay.grid, lay.n_T, lay.y_times[below_y])
    if below_z.any():
        z_bar[below_z] = _interp_nodes(z[:lay.n_T + 1], lay.grid, lay.n_T, lay.z_times[below_z])
    y_hat = np.einsum("mji,mj->mi", lay.y_trans, u_bar)
    z_hat = np.einsum("mji,mjk->mik", lay.z_trans, z_bar)
    return y_hat, z_hat


def _sweep(problem: AnticipatedProblem, A: RateMatrix, lay: _Layout, u: np.ndarray, z: np.ndarray):
    y_hat, z_hat = _anticipated_inputs(lay, u, z)
    f = problem.driver.eval
    states = range(A.n_states)

    def values(m, t, v, zz):
        yh, zh = y_hat[m], z_hat[m]
        return [f(t, v[i], zz[i], yh[i], zh[i], i) for i in states]

    head = integrate_backward(lay.grid, A, lay.tail_u[0], values, last_node=lay.n_T,
                              substeps=lay.substeps)
    u_new = np.concatenate([head, lay.tail_u[1:]])
    z_new = np.concatenate([project(A, head), lay.tail_z[1:]])
    return u_new, z_new


def _beta_norm(lay: _Layout, A: RateMatrix, beta: float, du: np.ndarray, dz: np.ndarray) -> float:
    n_T = lay.n_T
    t = lay.grid.nodes[:n_T]
    sq = du[:n_T] ** 2 + seminorms(A, dz[:n_T]) ** 2
    return float(np.sqrt(np.sum(lay.grid.h * np.exp(beta * t) * np.sum(lay.pi_nodes[:n_T] * sq, axis=1))))


def _initial_iterate(lay: _Layout, A: RateMatrix):
    n = A.n_states
    u = np.concatenate([np.zeros((lay.n_T, n)), lay.tail_u])
    z = np.concatenate([np.zeros((lay.n_T, n, n)), lay.tail_z])
    return u, z


# --------------------------------------------------------------------------
# public API


def beta_norm(problem: AnticipatedProblem, A: RateMatrix, grid: Grid, du, dz) -> float:
    """Discrete ``(E int_0^T e^{beta s} (|du|^2 + ||dz||_X^2) ds)^{1/2}`` with left-point weights."""
    return _beta_norm(_layout(problem, A, grid, 1), A, problem.beta, np.asarray(du), np.asarray(dz))


def solve_anticipated(problem: AnticipatedProblem, A: RateMatrix, grid: Grid,
                      tol: float = 1e-9, max_iter: int = 60, substeps: int | None = None):
    """Picard iteration to the fixed point; returns ``(surface, report)`` on ``grid``.

    The iterate starts at zero on ``[t_start, T)`` with the terminal segment
    spliced on ``[T, T+K]``. Raises :class:`ConvergenceError` (with the
    report attached) when ``max_iter`` sweeps do not reach ``tol``.
    """
    lay = _layout(problem, A, grid, substeps)
    check_step_size(grid.h / lay.substeps, 2 * problem.driver.c1, 2 * problem.driver.c2, A)
    beta = problem.beta
    report = IterationReport(beta)
    u, z = _initial_iterate(lay, A)
    for _ in range(max_iter):
        u_new, z_new = _sweep(problem, A, lay, u, z)
        d = _beta_norm(lay, A, beta, u_new - u, z_new - z)
        if not math.isfinite(d):
            raise ConvergenceError(f"non-finite iterate difference at sweep {report.n_iterations + 1}",
                                   report)
        report.diff_norms.append(d)
        u, z = u_new, z_new
        if d < tol:
            report.converged = True
            return SolutionSurface(grid, u, z), report
    raise ConvergenceError(f"no convergence after {max_iter} sweeps "
                           f"(last difference {report.diff_norms[-1]:.3g})", report)


def picard_sweep(problem: AnticipatedProblem, A: RateMatrix, surface: SolutionSurface,
                 substeps: int | None = None) -> SolutionSurface:
    """One application of the contraction map to ``surface``."""
    lay = _layout(problem, A, surface.grid, substeps)
    u, z = _sweep(problem, A, lay, surface.u, surface.z)
    return SolutionSurface(surface.grid, u, z)


def anticipated_values(problem: AnticipatedProblem, A: RateMatrix, surface: SolutionSurface):
    """``(y_hat, z_hat)`` built from ``surface`` at the nodes of ``[t_start, T]``."""
    lay = _layout(problem, A, surface.grid, 1)
    y_hat, z_hat = _anticipated_inputs(lay, surface.u, surface.z)
    return y_hat[::2], z_hat[::2]


def surface_beta_distance(problem: AnticipatedProblem, A: RateMatrix,
                          s1: SolutionSurface, s2: SolutionSurface) -> float:
    return beta_norm(problem, A, s1.grid, s1.u - s2.u, s1.z - s2.z)


@dataclass(frozen=True)
class ContractionDiagnostics:
    ratios: np.ndarray
    bound: float
    flagged: tuple

    @property
    def ok(self) -> bool:
        return not self.flagged


def contraction_diagnostics(report: IterationReport, slack: float = 0.1) -> ContractionDiagnostics:
    """Successive-difference ratios and the indices exceeding ``1/sqrt(2) + slack``.

    Needs at least two recorded differences (three iterates counting the
    initial guess).
    """
    if report.n_iterations < 2:
        raise ValidationError(f"need at least 2 recorded differences, got {report.n_iterations}")
    r = report.ratios
    if not np.all(np.isfinite(r)):
        raise ValidationError("ratios are not finite")
    bound = CONTRACTION_BOUND + slack
    return ContractionDiagnostics(r, bound, tuple(int(k) for k in np.nonzero(r > bound)[0]))


def projection_check(surface: SolutionSurface, A: RateMatrix) -> float:
    """``max |z - Psi Psi^+ z|`` over nodes and states, Euclidean norm.

    The seminorm vanishes on the null space of ``Psi`` and so cannot see
    exactly the corruption this check exists to catch.
    """
    if surface.z.size == 0:
        return 0.0
    back = np.einsum("ijk,nik->nij", A.projections, surface.z)
    return float(np.max(np.linalg.norm(surface.z - back, axis=-1)))


# --------------------------------------------------------------------------
# a-priori estimate


def apriori_constant(c1: float, c2: float, L: float, K: float, T: float) -> float:
    """Constant ``C`` of the estimate, chained through the proof's steps.

    ``beta = 3c + 3c^2 + 3c^2 L + cL + 1`` and ``G = 15(2 + T c^2 (1 + L))``.
    The absorption weight is ``alpha = 1 / (6 G e^{beta T})``: the extra
    ``e^{beta T}`` is needed to absorb the ``alpha e^{beta T} E sup|Y|^2`` term.
    """
    c = max(c1, c2)
    beta = 3 * c + 3 * c * c + 3 * c * c * L + c * L + 1
    g = 15.0 * (2.0 + T * c * c * (1.0 + L))
    b = max(3 * c + 3 * c * c + 3 * c * c * L + c * L, 2.0 / 3.0)
    e_t = math.exp(beta * T)
    e_tk = math.exp(beta * (T + K))
    alpha = 1.0 / (6.0 * g * e_t)
    # E sup |Y|^2 <= s1 D1 + s2 D2 + s3 D3
    s1 = 2.0 * (3.0 + 3.0 * g * e_t)
    s2 = 2.0 * (15.0 * T * c * c * L + 3.0 * g * b) * e_tk
    s3 = 2.0 * (15.0 + 18.0 * g * g * e_t * e_t)
    # E int ||Z||^2 <= 3 [e^{bT} D1 + alpha e^{bT} S + e^{bT}/alpha D3 + B e^{b(T+K)} D2]
    q1 = 3.0 * e_t + 3.0 * alpha * e_t * s1
    q2 = 3.0 * b * e_tk + 3.0 * alpha * e_t * s2
    q3 = 3.0 * e_t / alpha + 3.0 * alpha * e_t * s3
    return max(s1 + q1, s2 + q2, s3 + q3)


@dataclass(frozen=True)
class EstimateCheck:
    lhs: float
    rhs: float
    C: float
    holds: bool
    sup_term: float
    sup_std_error: float
    z_term: float
    data_terms: tuple  # (D1, D2, D3)


def _trapezoid_weights(n_nodes: int, h: float) -> np.ndarray:
    w = np.full(n_nodes, h)
    w[0] = w[-1] = 0.5 * h
    return w


def apriori_estimate_check(problem: AnticipatedProblem, surface: SolutionSurface, A: RateMatrix,
                           grid: Grid | None = None, n_paths: int = 10_000,
                           rng_seed: int = 0) -> EstimateCheck:
    """Compare ``E[sup|Y|^2 + int ||Z||^2]`` against ``C`` times the data terms.

    The sup term is a Monte-Carlo average over ``n_paths`` chain paths
    started from ``pi0``; everything else is exact through the state law
    ``pi(s) = exp(A s) pi0`` and trapezoid quadrature on the grid.
    """
    grid = surface.grid if grid is None else grid
    lay = _layout(problem, A, grid, 1)
    n_T, n = lay.n_T, A.n_states
    h = grid.h
    nodes = grid.nodes
    pi_all = np.empty((grid.n_steps + 1, n))
    pi_all[: n_T + 1] = lay.pi_nodes
    step = transition_matrix(A, h)
    for k in range(n_T, grid.n_steps):
        pi_all[k + 1] = step @ pi_all[k]

    # data terms
    xi_T = lay.tail_u[0]
    d1 = float(pi_all[n_T] @ xi_T ** 2)
    tail = lay.tail_u ** 2 + seminorms(A, lay.tail_z) ** 2
    d2 = 0.0
    if tail.shape[0] > 1:
        d2 = float(_trapezoid_weights(tail.shape[0], h) @ np.sum(pi_all[n_T:] * tail, axis=1))
    f = problem.driver.eval
    zero = np.zeros(n)
    g = np.array([[abs(f(t, 0.0, zero, 0.0, zero, i)) for i in range(n)] for t in nodes[: n_T + 1]])
    w = _trapezoid_weights(n_T + 1, h)
    acc = np.zeros(n)  # sum_{b >= a} w_b E[g_b(X_b) | X_a = .]
    d3 = 0.0
    for a in range(n_T, -1, -1):
        acc = w[a] * g[a] + step.T @ acc
        d3 += w[a] * float(pi_all[a] @ (g[a] * (2.0 * acc - w[a] * g[a])))

    c = apriori_constant(problem.driver.c1, problem.driver.c2, problem.delays.L,
                         problem.delays.K, problem.T)
    rhs = c * (d1 + d2 + d3)

    # Z term exact, sup term by simulation
    zq = seminorms(A, surface.z[: n_T + 1]) ** 2
    z_term = float(w @ np.sum(pi_all[: n_T + 1] * zq, axis=1))
    batch = simulate_paths(A, problem.initial_law(n), problem.T, n_paths, rng_seed, start=grid.t_start)
    states = batch.states_at(nodes[: n_T + 1])
    y = surface.u[np.arange(n_T + 1)[None, :], states]
    sup2 = np.max(y * y, axis=1)
    sup_term = float(sup2.mean())
    se = float(sup2.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    lhs = sup_term + z_term
    return EstimateCheck(lhs, rhs, c, bool(lhs <= rhs), sup_term, se, z_term, (d1, d2, d3))
