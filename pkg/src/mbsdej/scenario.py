"""Stochastic inputs on a time grid.

Two interchangeable noise models:

* :func:`simulate_paths` draws a Monte Carlo :class:`PathEnsemble` of Brownian
  increments and Poisson jump counts, with counter-based per-path RNG streams.
* :func:`build_tree` builds an exact finite :class:`ScenarioTree` whose
  conditional expectations are plain weighted sums, usable as a brute-force
  oracle at desk scale.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BudgetExceeded

__all__ = [
    "TimeGrid",
    "MarkSpace",
    "PathEnsemble",
    "ScenarioTree",
    "MartingaleReport",
    "simulate_paths",
    "build_tree",
    "martingale_check",
]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid t_0 = 0 < ... < t_N = T."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("grid needs at least two time points")
        if times[0] != 0.0:
            raise ValueError("grid must start at t = 0")
        if not np.all(np.diff(times) > 0):
            raise ValueError("grid times must be strictly increasing")

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        return cls(np.linspace(0.0, float(horizon), n_steps + 1))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def refined(self, factor: int = 2) -> "TimeGrid":
        """Grid with each step split into `factor` equal substeps."""
        pieces = [
            np.linspace(self.times[i], self.times[i + 1], factor, endpoint=False)
            for i in range(self.n_steps)
        ]
        return TimeGrid(np.append(np.concatenate(pieces), self.horizon))


@dataclass(frozen=True)
class MarkSpace:
    """Finite jump-mark set with intensities.

    ``values`` are the numeric mark values, ``intensities`` the point masses
    lambda_j = pi({e_j}) > 0, and ``vartheta`` the per-mark bounds used by the
    driver's jump-monotonicity structure.  An empty mark space (m = 0) models
    the no-jump case.
    """

    values: np.ndarray
    intensities: np.ndarray
    vartheta: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        lam = np.atleast_1d(np.asarray(self.intensities, dtype=float))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "intensities", lam)
        if values.shape != lam.shape:
            raise ValueError("values and intensities must have equal length")
        if values.size and len(set(values.tolist())) != values.size:
            raise ValueError("mark values must be distinct")
        if np.any(lam <= 0):
            raise ValueError("intensities must be positive")
        if self.vartheta is None:
            vt = np.abs(values) + 1.0
        else:
            vt = np.atleast_1d(np.asarray(self.vartheta, dtype=float))
        object.__setattr__(self, "vartheta", vt)
        if vt.shape != values.shape or np.any(vt < 0):
            raise ValueError("vartheta must be nonnegative, one per mark")

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @property
    def n_marks(self) -> int:
        return self.values.size

    def norm_pi_sq(self, phi: np.ndarray) -> np.ndarray:
        """||phi||_pi^2 = sum_j phi(e_j)^2 lambda_j along the last axis."""
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-1] != self.n_marks:
            raise ValueError("phi must have one entry per mark")
        return phi**2 @ self.intensities


def _path_generator(seed: int, path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(path,))
    return np.random.Generator(np.random.Philox(ss))


class PathEnsemble:
    """Monte Carlo increments: dW (n_paths, N) and dN (n_paths, N, m)."""

    def __init__(self, grid: TimeGrid, marks: MarkSpace, dW: np.ndarray,
                 dN: np.ndarray, seed: int):
        self.grid = grid
        self.marks = marks
        self.dW = dW
        self.dN = dN
        self.seed = seed
        self.n_paths = dW.shape[0]

    @cached_property
    def dN_tilde(self) -> np.ndarray:
        """Compensated increments dN_i(e_j) - lambda_j * dt_i."""
        comp = np.outer(self.grid.steps, self.marks.intensities)
        return self.dN - comp[None, :, :]

    @cached_property
    def w_levels(self) -> np.ndarray:
        """Brownian levels W_{t_i}, shape (n_paths, N+1), W_0 = 0."""
        levels = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.dW, axis=1, out=levels[:, 1:])
        return levels

    @cached_property
    def count_levels(self) -> np.ndarray:
        """Cumulative jump counts per mark, shape (n_paths, N+1, m)."""
        m = self.marks.n_marks
        levels = np.zeros((self.n_paths, self.grid.n_steps + 1, m))
        if m:
            np.cumsum(self.dN, axis=1, out=levels[:, 1:, :])
        return levels

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_paths, 1.0 / self.n_paths)

    def subset(self, rows) -> "PathEnsemble":
        """Ensemble restricted to a slice or index array of paths."""
        return PathEnsemble(self.grid, self.marks, self.dW[rows],
                            self.dN[rows], self.seed)

    def write_csv(self, path) -> None:
        """Debug export: one row per (path, step) with dW and dN_1..dN_m."""
        m = self.marks.n_marks
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "step", "dW"] + [f"dN_{j + 1}" for j in range(m)])
            for p in range(self.n_paths):
                for i in range(self.grid.n_steps):
                    row = [p, i, f"{self.dW[p, i]:.17g}"]
                    row += [str(int(self.dN[p, i, j])) for j in range(m)]
                    writer.writerow(row)


def simulate_paths(grid: TimeGrid, marks: MarkSpace, n_paths: int, seed: int,
                   workers: int = 1) -> PathEnsemble:
    """Draw an ensemble of Brownian and Poisson increments.

    dW_i ~ Gaussian(0, dt_i) and dN_i(e_j) ~ Poisson(lambda_j dt_i), mutually
    independent across steps, marks and paths.  Each path owns a Philox stream
    keyed by (seed, path index), so the result is bit-identical for a fixed
    seed and path count regardless of ``workers``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n_steps = grid.n_steps
    m = marks.n_marks
    dt = grid.steps
    sqrt_dt = np.sqrt(dt)
    lam_dt = np.outer(dt, marks.intensities)  # (N, m)

    dW = np.empty((n_paths, n_steps))
    dN = np.zeros((n_paths, n_steps, m))

    def fill(lo: int, hi: int) -> None:
        for p in range(lo, hi):
            rng = _path_generator(seed, p)
            dW[p] = rng.normal(0.0, sqrt_dt)
            if m:
                dN[p] = rng.poisson(lam_dt)

    if workers > 1 and n_paths > 1:
        chunk = -(-n_paths // workers)
        bounds = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: fill(*b), bounds))
    else:
        fill(0, n_paths)
    return PathEnsemble(grid, marks, dW, dN, seed)


class ScenarioTree:
    """Full tree over the grid with exact transition probabilities.

    Per step i each node has B = 2 * 2^m children: a two-point Brownian
    branch +-sqrt(dt_i) (probability 1/2 each), crossed with an independent
    {0,1} jump count per mark (count 1 with probability p_j = 1-exp(-lam_j
    dt_i)).  Compensated jump values carry dN - lam_j dt_i; their conditional
    mean p_j - lam_j dt_i <= 0 is the tree's compensator bias, reported via
    :attr:`bias`.

    Branch index layout: b = w_branch * 2^m + jump bits, where bit j of the
    jump part is mark j's count.
    """

    def __init__(self, grid: TimeGrid, marks: MarkSpace):
        self.grid = grid
        self.marks = marks
        m = marks.n_marks
        self.branching = 2 * (1 << m)
        n = grid.n_steps
        B = self.branching

        self.probs = np.empty((n, B))        # per-step branch probabilities
        self.dW = np.empty((n, B))           # branch Brownian increments
        self.dN = np.zeros((n, B, m))        # branch jump counts in {0,1}
        self.dN_tilde = np.zeros((n, B, m))  # dN - lam*dt
        self.bias = np.zeros((n, m))         # E[dN_tilde] = p - lam*dt
        self.var_dnt = np.zeros((n, m))      # Var[dN_tilde]

        jump_bits = (np.arange(1 << m)[:, None] >> np.arange(m)[None, :]) & 1
        for i in range(n):
            dt = grid.steps[i]
            p_jump = -np.expm1(-marks.intensities * dt)  # 1 - exp(-lam dt)
            w_sign = np.repeat([1.0, -1.0], 1 << m)
            self.dW[i] = w_sign * np.sqrt(dt)
            bits = np.tile(jump_bits, (2, 1)).astype(float)
            self.dN[i] = bits
            self.dN_tilde[i] = bits - marks.intensities * dt
            pj = np.where(jump_bits == 1, p_jump, 1.0 - p_jump)
            self.probs[i] = 0.5 * np.tile(np.prod(pj, axis=1), 2)
            self.bias[i] = p_jump - marks.intensities * dt
            # exact two-point variance of dN (shift-invariant for dN_tilde)
            self.var_dnt[i] = p_jump * (1.0 - p_jump)

        # node states per level, built forward
        self.w_nodes = [np.zeros(1)]
        self.count_nodes = [np.zeros((1, m))]
        for i in range(n):
            w = (self.w_nodes[i][:, None] + self.dW[i][None, :]).ravel()
            self.w_nodes.append(w)
            c = (self.count_nodes[i][:, None, :] + self.dN[i][None, :, :])
            self.count_nodes.append(c.reshape(w.size, m))

    @property
    def n_leaves(self) -> int:
        return self.branching**self.grid.n_steps

    def level_size(self, i: int) -> int:
        return self.branching**i

    @cached_property
    def leaf_probs(self) -> np.ndarray:
        probs = np.ones(1)
        for i in range(self.grid.n_steps):
            probs = (probs[:, None] * self.probs[i][None, :]).ravel()
        return probs

    def condexp_level(self, i: int, next_values: np.ndarray) -> np.ndarray:
        """E[. | F_{t_i}] of level-(i+1) node values; exact weighted sums."""
        return next_values.reshape(self.level_size(i), self.branching) @ self.probs[i]

    def tail_weights(self, i: int) -> np.ndarray:
        """Probabilities of the branch suffixes from level i to the leaves."""
        w = np.ones(1)
        for k in range(self.grid.n_steps - 1, i - 1, -1):
            w = (self.probs[k][:, None] * w[None, :]).ravel()
        return w

    def condexp_leaves(self, i: int, leaf_values: np.ndarray) -> np.ndarray:
        """E[. | F_{t_i}] of a leaf function, returned per leaf."""
        tail = self.tail_weights(i)
        grouped = leaf_values.reshape(self.level_size(i), tail.size)
        node_vals = grouped @ tail
        return np.repeat(node_vals, tail.size)

    def expand_to_leaves(self, i: int, node_values: np.ndarray) -> np.ndarray:
        """Broadcast level-i node values onto all leaf paths."""
        reps = self.branching ** (self.grid.n_steps - i)
        return np.repeat(node_values, reps, axis=0)

    def leaf_increments(self) -> tuple[np.ndarray, np.ndarray]:
        """Per leaf-path (dW, dN) arrays shaped like a PathEnsemble's."""
        n, m = self.grid.n_steps, self.marks.n_marks
        dW = np.empty((self.n_leaves, n))
        dN = np.zeros((self.n_leaves, n, m))
        for i in range(n):
            reps = self.branching ** (n - i - 1)
            tiles = self.level_size(i)
            dW[:, i] = np.tile(np.repeat(self.dW[i], reps), tiles)
            for j in range(m):
                dN[:, i, j] = np.tile(np.repeat(self.dN[i, :, j], reps), tiles)
        return dW, dN


def build_tree(grid: TimeGrid, marks: MarkSpace,
               node_budget: int = 10**6) -> ScenarioTree:
    """Build the exact scenario tree, guarding the total node count."""
    B = 2 * (1 << marks.n_marks)
    total = 1
    level = 1
    for _ in range(grid.n_steps):
        level *= B
        total += level
        if total > node_budget:
            raise BudgetExceeded(
                f"tree needs > {node_budget} nodes "
                f"(branching {B}, {grid.n_steps} steps)")
    return ScenarioTree(grid, marks)


@dataclass
class MartingaleReport:
    """z-scores of the empirical means of dW and dN_tilde, per step/mark."""

    z_brownian: np.ndarray          # (N,)
    z_jumps: np.ndarray             # (N, m)
    z_variance: np.ndarray = field(default=None)  # (N,) variance-of-dW gate
    threshold: float = 4.0

    @property
    def passed(self) -> bool:
        worst = self.worst_abs_z
        return bool(worst <= self.threshold)

    @property
    def worst_abs_z(self) -> float:
        zs = [np.abs(self.z_brownian)]
        if self.z_jumps.size:
            zs.append(np.abs(self.z_jumps).ravel())
        return float(max(z.max() for z in zs)) if zs else 0.0


def martingale_check(ensemble: PathEnsemble, threshold: float = 4.0) -> MartingaleReport:
    """Sanity gate: per step and mark, mean increments should be ~0.

    Standard errors use the model values (sd(dW_i) = sqrt(dt_i),
    sd(dNtilde_ij) = sqrt(lambda_j dt_i)), so the check stays meaningful when
    the empirical spread degenerates (e.g. a single path, or no observed
    jumps).  With one path the z-scores are 0 by convention.
    """
    n = ensemble.n_paths
    dt = ensemble.grid.steps
    if n < 2:
        m = ensemble.marks.n_marks
        zeros = np.zeros_like(dt)
        return MartingaleReport(zeros, np.zeros((dt.size, m)), zeros, threshold)

    se_w = np.sqrt(dt / n)
    z_w = ensemble.dW.mean(axis=0) / se_w
    lam_dt = np.outer(dt, ensemble.marks.intensities)
    if ensemble.marks.n_marks:
        se_n = np.sqrt(lam_dt / n)
        z_n = ensemble.dN_tilde.mean(axis=0) / se_n
    else:
        z_n = np.zeros((dt.size, 0))
    # variance gate: Var(dW_i) should be dt_i; se of the sample variance of a
    # Gaussian sample is dt*sqrt(2/(n-1))
    var_w = ensemble.dW.var(axis=0, ddof=1)
    z_var = (var_w - dt) / (dt * np.sqrt(2.0 / (n - 1)))
    return MartingaleReport(z_w, z_n, z_var, threshold)
