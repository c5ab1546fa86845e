"""Classical BSDEs on a finite-state chain, solved through ``Y_t = u(t)' X_t``.

With chain-Markovian data the solution has the form ``Y_t = u(t, X_t)``,
``Z_t = Psi Psi^+ u(t)``, and the BSDE collapses to the backward system

    du_i/dt = -f(t, u_i, z(t, i), i) - (A' u)_i,    u(T) = xi,

integrated here with classical RK4. Each grid cell is split into enough
equal RK4 sub-steps that ``h_sub * 2 max_i q_i <= 0.03`` (``q_i`` the exit
rates), which bounds the generator's contribution to the error well below
1e-8 on desk-scale chains; outputs live on the grid nodes only.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chain import ChainPath, PathBatch, RateMatrix
from .errors import GridError, NumericalError, ValidationError

NODE_TOL = 1e-9
STIFFNESS_TARGET = 0.03


@dataclass(frozen=True)
class Grid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise GridError(f"t_end must exceed t_start ({self.t_end} <= {self.t_start})")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def with_step(cls, t_start, t_end, h) -> "Grid":
        n = round((t_end - t_start) / h)
        if n < 1 or abs(t_start + n * h - t_end) > NODE_TOL * max(1.0, abs(t_end)):
            raise GridError(f"step {h} does not divide [{t_start}, {t_end}]")
        return cls(t_start, t_end, n)

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + self.h * np.arange(self.n_steps + 1)

    def stage_time(self, m: int, substeps: int = 1) -> float:
        """Time of stage index ``m``, counted in units of ``h / (2 substeps)``."""
        return self.t_start + m * (self.h / (2 * substeps))

    def node_index(self, t: float) -> int:
        """Index of the node at ``t``; raises if ``t`` is not a node."""
        k = round((t - self.t_start) / self.h)
        if k < 0 or k > self.n_steps or abs(self.t_start + k * self.h - t) > NODE_TOL * max(1.0, abs(t)):
            raise GridError(f"time {t} is not a grid node")
        return int(k)

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.t_start, self.t_end, self.n_steps * factor)


@dataclass(frozen=True)
class ClassicDriver:
    """``f(t, y, z, state)`` with Lipschitz constants ``l1`` (in y) and ``l2`` (seminorm in z)."""

    eval: Callable
    l1: float = 0.0
    l2: float = 0.0


ZERO_DRIVER = ClassicDriver(lambda t, y, z, state: 0.0)


@dataclass(frozen=True, eq=False)
class SolutionSurface:
    grid: Grid
    u: np.ndarray  # (n_nodes, N)
    z: np.ndarray  # (n_nodes, N, N); z[k, i] = Psi_i Psi_i^+ u[k]

    @property
    def n_states(self) -> int:
        return self.u.shape[1]

    def restrict(self, n_nodes: int) -> "SolutionSurface":
        """Leading ``n_nodes`` nodes as a surface on the shorter grid."""
        g = Grid(self.grid.t_start, self.grid.t_start + (n_nodes - 1) * self.grid.h, n_nodes - 1)
        return SolutionSurface(g, self.u[:n_nodes], self.z[:n_nodes])

    def to_csv(self, path) -> None:
        n = self.n_states
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "state", "u"] + [f"z_{j + 1}" for j in range(n)])
            for k, t in enumerate(self.grid.nodes):
                for i in range(n):
                    w.writerow([f"{t:.17g}", i, f"{self.u[k, i]:.17g}"]
                               + [f"{v:.17g}" for v in self.z[k, i]])


def project(A: RateMatrix, u: np.ndarray) -> np.ndarray:
    """``z[..., i, :] = Psi_i Psi_i^+ u[...]`` for every state ``i``."""
    return np.einsum("ijk,...k->...ij", A.projections, u)


def substeps_for(A: RateMatrix, h: float) -> int:
    """RK4 sub-steps per grid cell so that ``h_sub * 2 max q <= STIFFNESS_TARGET``."""
    rho = 2.0 * float(A.exit_rates.max()) if A.n_states > 1 else 0.0
    return max(1, math.ceil(h * rho / STIFFNESS_TARGET - 1e-9))


def check_step_size(h, l1, l2, A: RateMatrix) -> None:
    stiff = h * (l1 + l2 * math.sqrt(3 * A.m_bound) + A.m_bound)
    if stiff > 0.5:
        warnings.warn(f"step size h={h:.3g} is large for the problem (h*L = {stiff:.3g} > 0.5)",
                      RuntimeWarning, stacklevel=3)


def integrate_backward(grid: Grid, A: RateMatrix, terminal, driver_values: Callable,
                       last_node: int | None = None, substeps: int = 1) -> np.ndarray:
    """RK4 for ``du/dt = -f - A'u`` from ``u(t_last) = terminal`` down to ``t_start``.

    ``driver_values(m, t, u, z)`` returns the driver for every state at
    stage index ``m`` (units of ``h / (2 substeps)``, so node ``k`` is
    ``m = 2 k substeps``); ``z`` is the projected ``u``. Returns ``u`` on
    nodes ``0..last_node``.
    """
    n = grid.n_steps if last_node is None else last_node
    s = int(substeps)
    h = grid.h / s
    at = A.entries.T
    proj = A.projections

    def rhs(m, v):
        z = proj @ v
        return -np.asarray(driver_values(m, grid.stage_time(m, s), v, z), dtype=float) - at @ v

    u = np.empty((n + 1, A.n_states))
    u[n] = terminal
    if not np.all(np.isfinite(u[n])):
        raise NumericalError(f"non-finite terminal value at node {n}")
    for k in range(n - 1, -1, -1):
        v = u[k + 1]
        for j in range(s - 1, -1, -1):
            m = 2 * (k * s + j)
            k1 = rhs(m + 2, v)
            k2 = rhs(m + 1, v - 0.5 * h * k1)
            k3 = rhs(m + 1, v - 0.5 * h * k2)
            k4 = rhs(m, v - h * k3)
            v = v - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        u[k] = v
        if not np.all(np.isfinite(u[k])):
            raise NumericalError(f"non-finite value at node {k} (t={grid.t_start + k * h:.6g})")
    return u


def solve_classical(terminal, driver: ClassicDriver, A: RateMatrix, grid: Grid,
                    substeps: int | None = None) -> SolutionSurface:
    """Solve ``Y_t = xi + int_t^T f(s, Y_s, Z_s) ds - int_t^T Z_s' dM_s`` with ``T = grid.t_end``.

    ``terminal[i]`` is the value of ``xi`` when ``X_T = e_i``. ``substeps``
    defaults to :func:`substeps_for`.
    """
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (A.n_states,):
        raise ValidationError(f"terminal must have length {A.n_states}, got shape {terminal.shape}")
    s = substeps_for(A, grid.h) if substeps is None else int(substeps)
    check_step_size(grid.h / s, driver.l1, driver.l2, A)
    states = range(A.n_states)
    f = driver.eval

    def values(m, t, v, z):
        return [f(t, v[i], z[i], i) for i in states]

    u = integrate_backward(grid, A, terminal, values, substeps=s)
    return SolutionSurface(grid, u, project(A, u))


def evaluate_along_path(surface: SolutionSurface, path: ChainPath) -> np.ndarray:
    """``Y`` at the grid nodes along one path (right-continuous in ``t``)."""
    if path.horizon < surface.grid.t_end - NODE_TOL:
        raise ValidationError("path horizon ends before the surface grid")
    nodes = surface.grid.nodes
    return surface.u[np.arange(nodes.size), path.state_at(nodes)]


def evaluate_along_paths(surface: SolutionSurface, batch: PathBatch, n_nodes: int | None = None) -> np.ndarray:
    """Batch version of :func:`evaluate_along_path`; shape (n_paths, n_nodes)."""
    nodes = surface.grid.nodes[:n_nodes]
    states = batch.states_at(nodes)
    return surface.u[np.arange(nodes.size)[None, :], states]
