"""Forward delayed equation dual to the linear anticipated BSDE.

For ``s >= t0``

    dXh_s = (a_s Xh_s + mu_{s-th} Xh_{s-th}) ds
            + (Xh_{s-} b_{s-} + Xh_{(s-th)-} sigma_{(s-th)-}) (Psi_s^+)' dM_s,

with ``Xh = 0`` on ``[t0-th, t0)`` and ``Xh_{t0} = 1``. The linear
anticipated BSDE with driver

    a y + mu E_t[y_{t+th}] + b z + sigma E_t[z_{t+th}] + phi

and terminal data ``(U, V)`` on ``[T, T+th]`` then satisfies

    Y_{t0} = E[Xh_T U_T + int_{t0}^T Xh phi ds
               + int_T^{T+th} (mu_{s-th} U_s + sigma_{s-th} V_s) Xh_{s-th} ds].

Paths are integrated one at a time by a compiled kernel. Every path gets
its own mesh: the uniform grid plus the chain's jump times and the same
jump times shifted by ``th`` (where the delayed term jumps). On each mesh
interval the drift is linear in ``Xh`` with a frozen rate and a delayed
forcing that is linear in time, which an exponential integrator handles
to second order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numba
import numpy as np

from .abse import AnticipatedDriver, AnticipatedProblem, DelaySpec, TerminalSegment
from .bsde import NODE_TOL, Grid
from .chain import ChainPath, PathBatch, RateMatrix, simulate_paths
from .errors import GridError, NumericalError, ValidationError

_NODE, _JUMP, _SHIFT = 0, 1, 2


@dataclass(frozen=True)
class SDDECoefficients:
    """Coefficients ``a, mu, phi: (t, state) -> float`` and ``b, sigma: (t, state) -> row``."""

    a: Callable
    mu: Callable
    b: Callable
    sigma: Callable
    phi: Callable
    theta: float
    bounds: dict | None = None  # declared sup-norms keyed "a", "mu", "b", "sigma"

    def __post_init__(self):
        if not self.theta > 0 or not math.isfinite(self.theta):
            raise ValidationError(f"theta must be positive, got {self.theta}")

    @classmethod
    def constant(cls, a, mu, b, sigma, phi, theta, bounds=None) -> "SDDECoefficients":
        """State-dependent but time-constant coefficients.

        Scalars broadcast over states; ``b`` and ``sigma`` are one row per
        state (or a single row shared by all states).
        """
        a, mu, phi = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (a, mu, phi))
        b, sigma = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (b, sigma))
        pick = lambda arr, i: arr[i if arr.shape[0] > 1 else 0]  # noqa: E731
        return cls(lambda t, i: float(pick(a, i)), lambda t, i: float(pick(mu, i)),
                   lambda t, i: pick(b, i), lambda t, i: pick(sigma, i),
                   lambda t, i: float(pick(phi, i)), float(theta), bounds)

    def tabulate(self, nodes: np.ndarray, n_states: int):
        """Coefficient tables at ``nodes``: ``a, mu, phi`` (n, N) and ``b, sigma`` (n, N, N)."""
        tab = {}
        for name in ("a", "mu", "phi"):
            fn = getattr(self, name)
            tab[name] = np.array([[fn(t, i) for i in range(n_states)] for t in nodes], dtype=float)
        for name in ("b", "sigma"):
            fn = getattr(self, name)
            tab[name] = np.array([[np.asarray(fn(t, i), dtype=float) for i in range(n_states)]
                                  for t in nodes], dtype=float)
            if tab[name].shape != (nodes.size, n_states, n_states):
                raise ValidationError(f"{name} must return a length-{n_states} row")
        for name, arr in tab.items():
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"coefficient {name} is not finite on the grid")
        if self.bounds:
            for name, bound in self.bounds.items():
                arr = tab[name]
                sup = np.abs(arr).max() if arr.ndim == 2 else np.linalg.norm(arr, axis=-1).max()
                if sup > bound * (1 + 1e-12):
                    raise ValidationError(f"coefficient {name} exceeds its declared bound {bound}")
        return tab


@dataclass(frozen=True, eq=False)
class SDDEPath:
    times: np.ndarray
    xhat: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "xhat"])
            for t, x in zip(self.times, self.xhat):
                w.writerow([f"{t:.17g}", f"{x:.17g}"])


class DualityEstimate(NamedTuple):
    estimate: float
    std_error: float
    n_paths: int


# --------------------------------------------------------------------------
# compiled kernel


@numba.njit(cache=True)
def _phis(z):
    """``e^z``, ``(e^z - 1)/z`` and ``(e^z - 1 - z)/z^2``."""
    if abs(z) < 1e-3:
        z2 = z * z
        p1 = 1.0 + z / 2.0 + z2 / 6.0 + z2 * z / 24.0 + z2 * z2 / 120.0
        p2 = 0.5 + z / 6.0 + z2 / 24.0 + z2 * z / 120.0 + z2 * z2 / 720.0
        return math.exp(z), p1, p2
    em1 = math.expm1(z)
    return em1 + 1.0, em1 / z, (em1 - z) / (z * z)


@numba.njit(cache=True)
def _lerp(tab, c, i, f):
    return tab[c, i] + (tab[c + 1, i] - tab[c, i]) * f


@numba.njit(cache=True)
def _lerp3(tab, c, i, k, f):
    return tab[c, i, k] + (tab[c + 1, i, k] - tab[c, i, k]) * f


@numba.njit(cache=True)
def _delayed(s, q_hi, mt, xl, xr, after):
    """Right value and state of ``Xh`` at ``s`` by interpolation over mesh points ``< q_hi``."""
    r = np.searchsorted(mt[:q_hi], s, side="right") - 1
    if r < 0:
        return 0.0, 0
    if r + 1 >= q_hi:
        return xr[r], after[r]
    w = (s - mt[r]) / (mt[r + 1] - mt[r]) if mt[r + 1] > mt[r] else 0.0
    return xr[r] + (xl[r + 1] - xr[r]) * w, after[r]


@numba.njit(cache=True)
def _dual_kernel(t0, h, m, n_fw, n_T, init, offsets, jt, js,
                 a_tab, mu_tab, phi_tab, b_tab, sig_tab, psd, vdir,
                 u_tab, v_tab, trace):
    n_paths = init.shape[0]
    n_states = a_tab.shape[1]
    theta = m * h
    t_end = t0 + n_fw * h
    out = np.empty(n_paths)
    for p in range(n_paths):
        lo = offsets[p]
        hi = offsets[p + 1]
        nj = 0
        while lo + nj < hi and jt[lo + nj] < t_end:
            nj += 1
        ns = 0
        while ns < nj and jt[lo + ns] + theta < t_end:
            ns += 1
        npts = n_fw + 1 + nj + ns
        mt = np.empty(npts)
        kind = np.empty(npts, np.int64)
        ref = np.empty(npts, np.int64)
        after = np.empty(npts, np.int64)
        gp = np.empty(n_fw + 1, np.int64)
        jp = np.empty(max(nj, 1), np.int64)
        i_n = 0
        i_j = 0
        i_s = 0
        state = init[p]
        for q in range(npts):
            tn = t0 + i_n * h if i_n <= n_fw else np.inf
            tj = jt[lo + i_j] if i_j < nj else np.inf
            ts = jt[lo + i_s] + theta if i_s < ns else np.inf
            if tn <= tj and tn <= ts:
                mt[q] = tn
                kind[q] = _NODE
                ref[q] = i_n
                gp[i_n] = q
                i_n += 1
            elif tj <= ts:
                mt[q] = tj
                kind[q] = _JUMP
                ref[q] = i_j
                jp[i_j] = q
                state = js[lo + i_j]
                i_j += 1
            else:
                mt[q] = ts
                kind[q] = _SHIFT
                ref[q] = i_s
                i_s += 1
            after[q] = state

        xl = np.empty(npts)
        xr = np.empty(npts)
        xl[0] = 0.0
        xr[0] = 1.0
        total = 0.0
        cell = 0
        bad = False
        for q in range(npts - 1):
            if kind[q] == _NODE:
                cell = min(ref[q], n_fw - 1)
            ta = mt[q]
            tb = mt[q + 1]
            dt = tb - ta
            i = after[q]
            kd = cell - m
            xa = 0.0
            xb = 0.0
            sd = 0
            if kd >= 0:
                if kind[q] == _NODE:
                    r = gp[ref[q] - m]
                    xa = xr[r]
                    sd = after[r]
                elif kind[q] == _SHIFT:
                    r = jp[ref[q]]
                    xa = xr[r]
                    sd = after[r]
                else:
                    xa, sd = _delayed(ta - theta, q, mt, xl, xr, after)
                if kind[q + 1] == _NODE:
                    xb = xl[gp[ref[q + 1] - m]]
                elif kind[q + 1] == _SHIFT:
                    xb = xl[jp[ref[q + 1]]]
                else:
                    xb, _ = _delayed(tb - theta, q + 1, mt, xl, xr, after)
            # coefficients are linear inside a cell; the rate is taken at the midpoint
            c0 = t0 + cell * h
            fa = (ta - c0) / h
            fb = (tb - c0) / h
            fm = 0.5 * (fa + fb)
            rate = _lerp(a_tab, cell, i, fm)
            for k in range(n_states):
                rate -= _lerp3(b_tab, cell, i, k, fm) * vdir[i, k]
            ga = 0.0
            gb = 0.0
            if kd >= 0:
                ca = _lerp(mu_tab, kd, sd, fa)
                cb = _lerp(mu_tab, kd, sd, fb)
                for k in range(n_states):
                    ca -= _lerp3(sig_tab, kd, sd, k, fa) * vdir[i, k]
                    cb -= _lerp3(sig_tab, kd, sd, k, fb) * vdir[i, k]
                ga = ca * xa
                gb = cb * xb
            e, p1, p2 = _phis(rate * dt)
            xl[q + 1] = e * xr[q] + dt * (p1 * ga + p2 * (gb - ga))

            if cell < n_T:
                pa = phi_tab[cell, i] + (phi_tab[cell + 1, i] - phi_tab[cell, i]) * fa
                pb = phi_tab[cell, i] + (phi_tab[cell + 1, i] - phi_tab[cell, i]) * fb
                total += 0.5 * dt * (pa * xr[q] + pb * xl[q + 1])
            elif kd >= 0:
                ua = u_tab[cell, i] + (u_tab[cell + 1, i] - u_tab[cell, i]) * fa
                ub = u_tab[cell, i] + (u_tab[cell + 1, i] - u_tab[cell, i]) * fb
                sva = 0.0
                svb = 0.0
                for k in range(n_states):
                    sva += _lerp3(sig_tab, kd, sd, k, fa) * _lerp3(v_tab, cell, i, k, fa)
                    svb += _lerp3(sig_tab, kd, sd, k, fb) * _lerp3(v_tab, cell, i, k, fb)
                total += 0.5 * dt * ((_lerp(mu_tab, kd, sd, fa) * ua + sva) * xa
                                     + (_lerp(mu_tab, kd, sd, fb) * ub + svb) * xb)

            if kind[q + 1] == _JUMP:
                to = after[q + 1]
                jump = 0.0
                for k in range(n_states):
                    jump += _lerp3(b_tab, cell, i, k, fb) * (psd[i, k, to] - psd[i, k, i])
                dx = xl[q + 1] * jump
                if kd >= 0:
                    xd, sdj = _delayed(tb - theta, q + 1, mt, xl, xr, after)
                    jump = 0.0
                    for k in range(n_states):
                        jump += _lerp3(sig_tab, kd, sdj, k, fb) * (psd[i, k, to] - psd[i, k, i])
                    dx += xd * jump
                xr[q + 1] = xl[q + 1] + dx
            else:
                xr[q + 1] = xl[q + 1]
            if not math.isfinite(xr[q + 1]):
                bad = True
                break
        if bad:
            out[p] = np.nan
            continue
        qT = gp[n_T]
        total += xr[qT] * u_tab[n_T, after[qT]]
        out[p] = total
        if p < trace.shape[0]:
            for l in range(n_fw + 1):
                trace[p, l] = xr[gp[l]]
    return out


# --------------------------------------------------------------------------
# python front end


@dataclass(frozen=True, eq=False)
class _Setup:
    t0: float
    T: float
    h: float
    m: int
    n_fw: int
    n_T: int
    tables: dict
    u_tab: np.ndarray
    v_tab: np.ndarray


def _steps_per_delay(theta: float, h: float) -> int:
    m = round(theta / h)
    if m < 1 or abs(m * h - theta) > NODE_TOL * max(1.0, theta):
        raise GridError(f"grid step {h} does not divide the delay {theta}")
    return int(m)


def _setup(coeffs: SDDECoefficients, A: RateMatrix, t0: float, T: float, h: float,
           U: Callable | None = None, V: Callable | None = None) -> _Setup:
    m = _steps_per_delay(coeffs.theta, h)
    n_T = round((T - t0) / h)
    if n_T < 1 or abs(t0 + n_T * h - T) > NODE_TOL * max(1.0, abs(T)):
        raise GridError(f"grid step {h} does not divide [t0, T] = [{t0}, {T}]")
    n_fw = n_T + m
    n = A.n_states
    nodes = t0 + h * np.arange(n_fw + 1)
    tables = coeffs.tabulate(nodes, n)
    u_tab = np.zeros((n_fw + 1, n))
    v_tab = np.zeros((n_fw + 1, n, n))
    if U is not None:
        u_tab[n_T:] = [[U(t, i) for i in range(n)] for t in nodes[n_T:]]
    if V is not None:
        raw = np.array([[np.asarray(V(t, i), dtype=float) for i in range(n)] for t in nodes[n_T:]])
        v_tab[n_T:] = np.einsum("ijk,lik->lij", A.projections, raw)
    if not (np.all(np.isfinite(u_tab)) and np.all(np.isfinite(v_tab))):
        raise ValidationError("terminal data U, V must be finite on [T, T+theta]")
    return _Setup(t0, T, h, m, n_fw, n_T, tables, u_tab, v_tab)


def _run(setup: _Setup, A: RateMatrix, batch: PathBatch, n_trace: int = 0):
    tb = setup.tables
    pd = A.psi_dagger_stack
    vdir = np.einsum("ijk,ki->ij", pd, A.entries)  # Psi_i^+ A e_i
    trace = np.zeros((n_trace, setup.n_fw + 1))
    vals = _dual_kernel(setup.t0, setup.h, setup.m, setup.n_fw, setup.n_T,
                        batch.initial_states.astype(np.int64), batch.offsets.astype(np.int64),
                        batch.jump_times.astype(float), batch.jump_states.astype(np.int64),
                        tb["a"], tb["mu"], tb["phi"], tb["b"], tb["sigma"],
                        np.ascontiguousarray(pd), vdir, setup.u_tab, setup.v_tab, trace)
    if not np.all(np.isfinite(vals)):
        bad = int(np.nonzero(~np.isfinite(vals))[0][0])
        raise NumericalError(f"non-finite SDDE value on path {bad}")
    return vals, trace


def _single_batch(path: ChainPath) -> PathBatch:
    return PathBatch(np.array([path.initial_state], dtype=np.int64),
                     np.array([0, path.n_jumps], dtype=np.int64),
                     path.jump_times, path.post_jump_states, path.horizon, path.start)


def simulate_sdde(path: ChainPath, coeffs: SDDECoefficients, A: RateMatrix, t0: float,
                  grid: Grid) -> SDDEPath:
    """``Xh`` on the nodes of ``grid``, which must span ``[t0 - theta, T + theta]``.

    Values on the history window are exactly zero except ``Xh(t0) = 1``.
    """
    h = grid.h
    m = _steps_per_delay(coeffs.theta, h)
    if abs(grid.t_start - (t0 - coeffs.theta)) > NODE_TOL * max(1.0, abs(t0)):
        raise GridError("grid must start at t0 - theta")
    T = grid.t_end - coeffs.theta
    if path.horizon < grid.t_end - NODE_TOL or path.start > t0 + NODE_TOL:
        raise ValidationError("path does not cover [t0, T + theta]")
    if path.state_at(t0) != path.initial_state:
        raise ValidationError("path must not jump before t0")
    setup = _setup(coeffs, A, t0, T, h)
    _, trace = _run(setup, A, _single_batch(path), n_trace=1)
    xhat = np.concatenate([np.zeros(m), trace[0]])
    return SDDEPath(grid.nodes, xhat)


def duality_estimate(coeffs: SDDECoefficients, U: Callable, V: Callable, A: RateMatrix,
                     t0: float, n_paths: int, rng_seed: int, *, T: float, initial_state: int,
                     steps_per_delay: int = 25, paths: PathBatch | None = None) -> DualityEstimate:
    """Monte-Carlo value of the dual functional for the chain started at ``initial_state``.

    ``U(t, i)`` and ``V(t, i)`` give the terminal data on ``[T, T+theta]``.
    The grid step is ``theta / steps_per_delay``. Passing ``paths`` reuses a
    previously simulated batch (it must start at ``t0`` in ``initial_state``).
    """
    if n_paths < 2 and paths is None:
        raise ValidationError("need at least two paths for a standard error")
    h = coeffs.theta / steps_per_delay
    setup = _setup(coeffs, A, t0, T, h, U, V)
    horizon = t0 + setup.n_fw * h
    if paths is None:
        paths = simulate_paths(A, initial_state, horizon, n_paths, rng_seed, start=t0)
    elif paths.horizon < horizon - NODE_TOL or np.any(paths.initial_states != initial_state):
        raise ValidationError("supplied paths do not match the requested start or horizon")
    vals, _ = _run(setup, A, paths)
    n = vals.size
    return DualityEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n)), n)


# --------------------------------------------------------------------------
# matching anticipated problem


def row_lipschitz(rows: np.ndarray, A: RateMatrix) -> float:
    """``max_i sqrt(w Psi_i^+ w')`` over the tabulated rows ``w`` (shape (k, N, N))."""
    q = np.einsum("kij,ijl,kil->ki", rows, A.psi_dagger_stack, rows)
    return float(np.sqrt(np.clip(q, 0.0, None)).max()) if q.size else 0.0


def anticipated_problem(coeffs: SDDECoefficients, U: Callable, V: Callable, A: RateMatrix,
                        T: float, grid: Grid, pi0=None) -> AnticipatedProblem:
    """Linear anticipated problem whose solution the dual functional represents.

    Driver ``a y + mu y_ant + b.z + sigma.z_ant + phi``; ``c2`` is the
    largest ``sqrt(w Psi^+ w')`` over tabulated ``b`` and ``sigma`` rows,
    the Lipschitz constant on projected arguments.
    """
    theta = coeffs.theta
    tab = coeffs.tabulate(grid.nodes, A.n_states)
    c1 = float(max(np.abs(tab["a"]).max(), np.abs(tab["mu"]).max()))
    c2 = max(row_lipschitz(tab["b"], A), row_lipschitz(tab["sigma"], A))
    a, mu, b, sg, phi = coeffs.a, coeffs.mu, coeffs.b, coeffs.sigma, coeffs.phi

    def f(t, y, z, ya, za, i):
        return (a(t, i) * y + mu(t, i) * ya + float(np.dot(b(t, i), z))
                + float(np.dot(sg(t, i), za)) + phi(t, i))

    return AnticipatedProblem(AnticipatedDriver(f, c1, c2), DelaySpec.constant(theta),
                              TerminalSegment(U, V), T, pi0)
