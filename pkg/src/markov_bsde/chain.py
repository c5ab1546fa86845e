"""Finite-state continuous-time Markov chains in unit-vector form.

States are the unit vectors e_0..e_{N-1} of R^N and the chain is written

    X_t = X_0 + int_0^t A X_s ds + M_t,

with a constant generator ``A`` in column form: ``A[j, i]`` is the jump
rate from state ``i`` to state ``j`` and every column sums to zero.
This module holds path simulation, the martingale ``M``, transition
matrices, the quadratic-variation density ``Psi`` with its pseudoinverse
and the induced seminorm, and the stochastic exponential driven by ``M``.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .errors import ValidationError

DEFAULT_PINV_TOL = 1e-10

# Gauss-Legendre nodes on [0, 1] for per-segment drift quadrature.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, path_index)``."""
    return np.random.default_rng([int(seed), int(path_index)])


# --------------------------------------------------------------------------
# generator


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Constant generator in column form (columns sum to zero)."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ValidationError(f"rate matrix must be square and non-empty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("rate matrix has non-finite entries")
        scale = max(1.0, float(np.abs(a).max()))
        off = a - np.diag(np.diag(a))
        if off.min() < -1e-12 * scale:
            raise ValidationError("off-diagonal rates must be nonnegative")
        colsum = a.sum(axis=0)
        if np.abs(colsum).max() > 1e-10 * scale:
            raise ValidationError(f"columns must sum to zero, got column sums {colsum}")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @classmethod
    def from_offdiagonal(cls, rates) -> "RateMatrix":
        """Build from off-diagonal rates; the diagonal is filled in."""
        r = np.array(rates, dtype=float)
        np.fill_diagonal(r, 0.0)
        np.fill_diagonal(r, -r.sum(axis=0))
        return cls(r)

    @classmethod
    def random(cls, n_states, rng, low=0.1, high=2.0, sparsity=0.0) -> "RateMatrix":
        """Random generator with off-diagonal rates in ``[low, high]``.

        Each off-diagonal entry is zeroed with probability ``sparsity``.
        """
        r = rng.uniform(low, high, size=(n_states, n_states))
        if sparsity > 0:
            r[rng.random((n_states, n_states)) < sparsity] = 0.0
        return cls.from_offdiagonal(r)

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def m_bound(self) -> float:
        """Frobenius norm of ``A``."""
        return float(np.linalg.norm(self.entries, "fro"))

    @cached_property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.entries).copy()

    @cached_property
    def psi_ops(self) -> tuple:
        return tuple(psi(self, i) for i in range(self.n_states))

    @cached_property
    def projections(self) -> np.ndarray:
        """``Psi(e_i) Psi(e_i)^+`` stacked over states, shape (N, N, N)."""
        return np.stack([op.psi @ op.psi_dagger for op in self.psi_ops])

    @cached_property
    def psi_stack(self) -> np.ndarray:
        return np.stack([op.psi for op in self.psi_ops])

    @cached_property
    def psi_dagger_stack(self) -> np.ndarray:
        return np.stack([op.psi_dagger for op in self.psi_ops])

    @cached_property
    def _jump_tables(self):
        tables = []
        for i in range(self.n_states):
            targets = [j for j in range(self.n_states) if j != i and self.entries[j, i] > 0]
            cum = np.cumsum([self.entries[j, i] for j in targets]).tolist()
            tables.append((targets, cum))
        return tables

    def check_state(self, state) -> int:
        if isinstance(state, (bool, np.bool_)) or int(state) != state:
            raise ValidationError(f"state index must be an integer, got {state!r}")
        state = int(state)
        if not 0 <= state < self.n_states:
            raise ValidationError(f"state index {state} outside [0, {self.n_states})")
        return state


def transition_matrix(A: RateMatrix, dt: float) -> np.ndarray:
    """``exp(A dt)``; column ``i`` is the law of ``X_{t+dt}`` given ``X_t = e_i``."""
    if dt < 0:
        raise ValidationError(f"dt must be nonnegative, got {dt}")
    if dt == 0:
        return np.eye(A.n_states)
    return expm(A.entries * dt)


def state_distribution(A: RateMatrix, pi0, times) -> np.ndarray:
    """``pi(t) = exp(A t) pi0`` for each ``t`` in ``times``; shape (len(times), N)."""
    pi0 = np.asarray(pi0, dtype=float)
    return np.stack([transition_matrix(A, float(t)) @ pi0 for t in np.atleast_1d(times)])


# --------------------------------------------------------------------------
# paths


@dataclass(frozen=True, eq=False)
class ChainPath:
    initial_state: int
    jump_times: np.ndarray
    post_jump_states: np.ndarray
    horizon: float
    start: float = 0.0

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        js = np.asarray(self.post_jump_states, dtype=np.int64)
        if jt.shape != js.shape:
            raise ValidationError("jump_times and post_jump_states differ in length")
        if jt.size:
            if np.any(np.diff(jt) <= 0):
                raise ValidationError("jump times must be strictly increasing")
            if jt[0] <= self.start or jt[-1] > self.horizon:
                raise ValidationError("jump times must lie in (start, horizon]")
            prev = np.concatenate([[self.initial_state], js[:-1]])
            if np.any(prev == js):
                raise ValidationError("consecutive post-jump states must differ")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "post_jump_states", js)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    @property
    def states(self) -> np.ndarray:
        """Visited states, initial state first."""
        return np.concatenate([[self.initial_state], self.post_jump_states]).astype(np.int64)

    def state_at(self, t):
        """Right-continuous state at time(s) ``t``."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def segments(self):
        """``(start, end, state)`` arrays of the holding intervals."""
        starts = np.concatenate([[self.start], self.jump_times])
        ends = np.concatenate([self.jump_times, [self.horizon]])
        return starts, ends, self.states

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "state"])
            for t, s in zip(np.concatenate([[self.start], self.jump_times]), self.states):
                w.writerow([f"{t:.17g}", int(s)])


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many paths stored flat: path ``p`` owns ``jump_*[offsets[p]:offsets[p+1]]``."""

    initial_states: np.ndarray
    offsets: np.ndarray
    jump_times: np.ndarray
    jump_states: np.ndarray
    horizon: float
    start: float = 0.0

    def __len__(self):
        return self.initial_states.size

    @property
    def n_jumps(self) -> np.ndarray:
        return np.diff(self.offsets)

    def path(self, p: int) -> ChainPath:
        lo, hi = self.offsets[p], self.offsets[p + 1]
        return ChainPath(int(self.initial_states[p]), self.jump_times[lo:hi],
                         self.jump_states[lo:hi], self.horizon, self.start)

    def final_states(self) -> np.ndarray:
        out = self.initial_states.copy()
        has = self.n_jumps > 0
        out[has] = self.jump_states[self.offsets[1:][has] - 1]
        return out

    def pre_jump_states(self) -> np.ndarray:
        prev = np.empty_like(self.jump_states)
        if prev.size:
            prev[1:] = self.jump_states[:-1]
            firsts = self.offsets[:-1][self.n_jumps > 0]
            prev[firsts] = self.initial_states[self.n_jumps > 0]
        return prev

    def jump_path_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.n_jumps)

    def segments(self):
        """Holding intervals of every path: ``(path, start, end, state)``."""
        n = len(self)
        counts = self.n_jumps + 1
        total = int(counts.sum())
        first = self.offsets[:-1] + np.arange(n)
        last = self.offsets[1:] + np.arange(n)
        is_first = np.zeros(total, dtype=bool)
        is_first[first] = True
        seg_start = np.empty(total)
        seg_state = np.empty(total, dtype=np.int64)
        seg_start[is_first] = self.start
        seg_start[~is_first] = self.jump_times
        seg_state[is_first] = self.initial_states
        seg_state[~is_first] = self.jump_states
        seg_end = np.empty(total)
        seg_end[:-1] = seg_start[1:]
        seg_end[last] = self.horizon
        return np.repeat(np.arange(n), counts), seg_start, seg_end, seg_state

    def states_at(self, times) -> np.ndarray:
        """Right-continuous states, shape (n_paths, len(times))."""
        times = np.asarray(times, dtype=float)
        out = np.empty((len(self), times.size), dtype=np.int64)
        for p in range(len(self)):
            lo, hi = self.offsets[p], self.offsets[p + 1]
            idx = np.searchsorted(self.jump_times[lo:hi], times, side="right")
            visited = np.concatenate([[self.initial_states[p]], self.jump_states[lo:hi]])
            out[p] = visited[idx]
        return out

    def occupation(self, n_states: int) -> np.ndarray:
        """Time spent in each state by each path, shape (n_paths, N)."""
        path, s, e, st = self.segments()
        flat = np.bincount(path * n_states + st, weights=e - s, minlength=len(self) * n_states)
        return flat.reshape(len(self), n_states)


def _run_chain(A: RateMatrix, state: int, start: float, horizon: float, rng):
    tables = A._jump_tables
    q = A.exit_rates
    t = start
    times, states = [], []
    while True:
        rate = q[state]
        if rate <= 0:
            break
        t += rng.standard_exponential() / rate
        if t > horizon:
            break
        targets, cum = tables[state]
        k = bisect.bisect_right(cum, rng.random() * cum[-1])
        state = targets[min(k, len(targets) - 1)]
        times.append(t)
        states.append(state)
    return times, states


def _draw_initial(A: RateMatrix, initial, rng) -> int:
    if np.ndim(initial) == 0:
        return A.check_state(initial)
    pi0 = np.asarray(initial, dtype=float)
    if pi0.shape != (A.n_states,) or pi0.min() < 0 or abs(pi0.sum() - 1) > 1e-9:
        raise ValidationError("initial distribution must be a probability vector of length N")
    return min(bisect.bisect_right(np.cumsum(pi0).tolist(), rng.random()), A.n_states - 1)


def simulate_path(A: RateMatrix, initial_state, horizon: float, rng_seed: int,
                  path_index: int = 0, start: float = 0.0) -> ChainPath:
    """One trajectory on ``[start, horizon]`` from the ``(rng_seed, path_index)`` stream.

    ``initial_state`` is a state index, or a probability vector to sample from.
    """
    if not horizon > start:
        raise ValidationError(f"horizon must exceed start, got {horizon} <= {start}")
    rng = path_rng(rng_seed, path_index)
    s0 = _draw_initial(A, initial_state, rng)
    times, states = _run_chain(A, s0, start, horizon, rng)
    return ChainPath(s0, np.array(times), np.array(states, dtype=np.int64), float(horizon), float(start))


def simulate_paths(A: RateMatrix, initial_state, horizon: float, n_paths: int, rng_seed: int,
                   start: float = 0.0, first_index: int = 0) -> PathBatch:
    """``n_paths`` trajectories; path ``p`` uses stream ``(rng_seed, first_index + p)``.

    Identical to calling :func:`simulate_path` once per index.
    """
    if not horizon > start:
        raise ValidationError(f"horizon must exceed start, got {horizon} <= {start}")
    init = np.empty(n_paths, dtype=np.int64)
    offsets = np.zeros(n_paths + 1, dtype=np.int64)
    all_t, all_s = [], []
    for p in range(n_paths):
        rng = path_rng(rng_seed, first_index + p)
        s0 = _draw_initial(A, initial_state, rng)
        times, states = _run_chain(A, s0, start, horizon, rng)
        init[p] = s0
        all_t.extend(times)
        all_s.extend(states)
        offsets[p + 1] = len(all_t)
    return PathBatch(init, offsets, np.array(all_t, dtype=float),
                     np.array(all_s, dtype=np.int64), float(horizon), float(start))


# --------------------------------------------------------------------------
# martingale part


@dataclass(frozen=True, eq=False)
class MartingaleIncrementSample:
    times: np.ndarray
    values: np.ndarray  # (len(times), N)


def _occupation_until(path: ChainPath, n_states: int, times) -> np.ndarray:
    s, e, st = path.segments()
    times = np.asarray(times, dtype=float)
    overlap = np.clip(np.minimum(e[None, :], times[:, None]) - s[None, :], 0.0, None)
    occ = np.zeros((times.size, n_states))
    for k in range(n_states):
        occ[:, k] = overlap[:, st == k].sum(axis=1)
    return occ


def martingale_increments(path: ChainPath, A: RateMatrix, grid) -> MartingaleIncrementSample:
    """``M_t = X_t - X_0 - int A X_s ds`` on ``grid``, integrated exactly per segment."""
    times = np.asarray(grid, dtype=float)
    if times.min() < path.start - 1e-12 or times.max() > path.horizon + 1e-12:
        raise ValidationError("grid must lie inside the path's time window")
    n = A.n_states
    eye = np.eye(n)
    x_t = eye[path.state_at(times)]
    x_0 = eye[path.initial_state]
    occ = _occupation_until(path, n, times)
    values = x_t - x_0[None, :] - occ @ A.entries.T
    return MartingaleIncrementSample(times, values)


def terminal_martingale(batch: PathBatch, A: RateMatrix) -> np.ndarray:
    """``M`` at the horizon for every path, shape (n_paths, N)."""
    eye = np.eye(A.n_states)
    occ = batch.occupation(A.n_states)
    return eye[batch.final_states()] - eye[batch.initial_states] - occ @ A.entries.T


def _cell_index(nodes, t):
    """Cell ``k`` with ``t`` in ``(nodes[k], nodes[k+1]]``."""
    return np.searchsorted(nodes, t, side="left") - 1


def stochastic_integrals(batch: PathBatch, A: RateMatrix, nodes, z_cells):
    """Pathwise ``int Z' dM`` and ``int ||Z||_X^2 ds`` for a step integrand.

    ``Z(s) = z_cells[k]`` on ``(nodes[k], nodes[k+1]]`` and zero outside
    the grid. The integral is split into its jump sum and its
    ``-int Z' A X ds`` compensator; both drift integrals are exact because
    ``Z`` and ``X`` are piecewise constant.

    Returns two arrays of length ``n_paths``.
    """
    nodes = np.asarray(nodes, dtype=float)
    z = np.asarray(z_cells, dtype=float)
    h = np.diff(nodes)
    n = A.n_states
    path, s, e, st = batch.segments()
    s = np.clip(s, nodes[0], nodes[-1])
    e = np.clip(e, nodes[0], nodes[-1])
    comp = np.zeros(len(s))
    qv = np.zeros(len(s))
    for i in range(n):
        mask = st == i
        if not mask.any():
            continue
        drift_rate = z @ A.entries[:, i]
        qv_rate = np.einsum("kj,jl,kl->k", z, A.psi_stack[i], z)
        g = np.concatenate([[0.0], np.cumsum(h * drift_rate)])
        q = np.concatenate([[0.0], np.cumsum(h * qv_rate)])
        comp[mask] = np.interp(e[mask], nodes, g) - np.interp(s[mask], nodes, g)
        qv[mask] = np.interp(e[mask], nodes, q) - np.interp(s[mask], nodes, q)

    jt = batch.jump_times
    inside = (jt > nodes[0]) & (jt <= nodes[-1])
    cell = _cell_index(nodes, jt[inside])
    frm = batch.pre_jump_states()[inside]
    to = batch.jump_states[inside]
    jumps = z[cell, to] - z[cell, frm]
    jump_sum = np.bincount(batch.jump_path_index()[inside], weights=jumps, minlength=len(batch))
    integral = jump_sum - np.bincount(path, weights=comp, minlength=len(batch))
    return integral, np.bincount(path, weights=qv, minlength=len(batch))


# --------------------------------------------------------------------------
# Psi calculus


@dataclass(frozen=True, eq=False)
class PsiOperator:
    state: int
    psi: np.ndarray
    psi_dagger: np.ndarray
    rank_tolerance: float = DEFAULT_PINV_TOL

    @property
    def projection(self) -> np.ndarray:
        return self.psi @ self.psi_dagger


def psi_matrix(A: RateMatrix, state: int) -> np.ndarray:
    """``diag(A x) - diag(x) A' - A diag(x)`` at ``x = e_state``."""
    state = A.check_state(state)
    a = A.entries
    x = np.zeros(A.n_states)
    x[state] = 1.0
    return np.diag(a @ x) - np.diag(x) @ a.T - a @ np.diag(x)


def psi(A: RateMatrix, state: int, tol: float = DEFAULT_PINV_TOL) -> PsiOperator:
    m = psi_matrix(A, state)
    return PsiOperator(int(state), m, pseudoinverse(m, tol), tol)


def pseudoinverse(q, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix by eigendecomposition.

    Eigenvalues with ``|lambda| <= tol * max|lambda|`` are treated as zero.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {q.shape}")
    asym = np.linalg.norm(q - q.T, "fro")
    if asym > tol * max(1.0, np.linalg.norm(q, "fro")):
        raise ValidationError(f"matrix is not symmetric (asymmetry {asym:.3g})")
    lam, vec = np.linalg.eigh(0.5 * (q + q.T))
    top = np.abs(lam).max() if lam.size else 0.0
    if top == 0.0:
        return np.zeros_like(q)
    keep = np.abs(lam) > tol * top
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / lam[keep]
    return (vec * inv) @ vec.T


def penrose_residuals(q, qd):
    """Frobenius residuals of the four Penrose identities."""
    fro = lambda m: float(np.linalg.norm(m, "fro"))  # noqa: E731
    qqd = q @ qd
    qdq = qd @ q
    return (fro(qqd @ q - q), fro(qdq @ qd - qd), fro(qqd.T - qqd), fro(qdq.T - qdq))


def seminorm(c, psi_op, tol: float = 1e-10) -> float:
    """``sqrt(Tr(C' Psi C))`` for a vector or ``N x K`` matrix ``C``."""
    m = psi_op.psi if isinstance(psi_op, PsiOperator) else np.asarray(psi_op, dtype=float)
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] != m.shape[0]:
        raise ValidationError(f"dimension mismatch: C has {c.shape[0]} rows, Psi is {m.shape}")
    tr = float(np.trace(c.T @ m @ c))
    if tr < 0:
        if tr < -tol * max(1.0, np.linalg.norm(m, "fro") * float(np.sum(c * c))):
            raise ValidationError(f"negative trace {tr:.3g}: Psi is not positive semidefinite")
        return 0.0
    return float(np.sqrt(tr))


def seminorms(A: RateMatrix, z: np.ndarray) -> np.ndarray:
    """Seminorm of ``z[..., i, :]`` under ``Psi(e_i)``, vectorized over leading axes."""
    quad = np.einsum("...ij,ijk,...ik->...i", z, A.psi_stack, z)
    return np.sqrt(np.clip(quad, 0.0, None))


# --------------------------------------------------------------------------
# stochastic exponential


def doleans_exponential(path: ChainPath, a: Callable, b: Callable, A: RateMatrix,
                        t0: float, grid) -> np.ndarray:
    """Solution of ``dU = U a ds + U_- b_- (Psi^+)' dM``, ``U_{t0} = 1``, on ``grid``.

    ``a(t, state)`` is scalar and ``b(t, state)`` a length-N row. Between
    jumps ``U`` grows by ``exp(int a - b Psi^+ A X ds)`` (Gauss-Legendre per
    segment); a jump ``i -> j`` at ``tau`` multiplies by
    ``1 + b(tau, i) Psi_i^+ (e_j - e_i)``. ``Psi^+`` is taken at the
    pre-jump state, so the integrand is predictable.
    """
    grid = np.asarray(grid, dtype=float)
    if abs(grid[0] - t0) > 1e-12:
        raise ValidationError("grid must start at t0")
    pd = A.psi_dagger_stack
    drift_dir = np.stack([pd[i] @ A.entries[:, i] for i in range(A.n_states)])

    jt = path.jump_times
    sel = (jt > t0) & (jt <= grid[-1])
    # jumps sort before a grid node at the same instant: U is right-continuous
    events = [(float(t), 0, k) for k, t in zip(np.nonzero(sel)[0], jt[sel])]
    events += [(float(t), 1, k) for k, t in enumerate(grid)]
    events.sort()

    out = np.empty(grid.size)
    u = 1.0
    t = float(t0)
    state = int(path.state_at(t0))
    for when, kind, k in events:
        if when > t:
            width = when - t
            r = t + width * _GL_X
            rate = sum(w * (a(ri, state) - float(np.dot(b(ri, state), drift_dir[state])))
                       for ri, w in zip(r, _GL_W))
            u *= np.exp(width * rate)
            t = when
        if kind == 0:
            new = int(path.post_jump_states[k])
            dx = -pd[state][:, state] + pd[state][:, new]
            u *= 1.0 + float(np.dot(b(when, state), dx))
            state = new
        else:
            out[k] = u
    return out
