"""Discrete backward solver for Lipschitz BSDEs with jumps.

The scheme is implicit in y and explicit in (z, psi).  Conditional
expectations come from a pluggable backend: exact weighted sums on a
:class:`~mbsdej.scenario.ScenarioTree`, or ridge-regularized polynomial
least squares on a :class:`~mbsdej.scenario.PathEnsemble` (Longstaff-Schwartz
style).  An optional structured penalty term -k_n(t, y) is integrated exactly
through the resolvent identity, which keeps the implicit step stable no matter
how large the penalization level is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ContractionFailure, RegressionRankDeficiency
from .monotone import PenalizedOperator, resolvent_ordinate
from .scenario import MarkSpace, PathEnsemble, ScenarioTree, TimeGrid

__all__ = [
    "ForwardState",
    "DriverSpec",
    "TerminalSpec",
    "CEBackend",
    "SolutionGrid",
    "ResidualReport",
    "solve_bsde",
    "condexp",
    "residual_check",
]


@dataclass(frozen=True)
class ForwardState:
    """Markov state carried by the regression basis and user evaluators."""

    t: float
    w: np.ndarray              # (n,) Brownian level
    counts: np.ndarray         # (n, m) cumulative jump counts per mark
    marks: MarkSpace
    grid: TimeGrid

    @property
    def ntilde(self) -> np.ndarray:
        """Compensated jump levels N_j(t) - lambda_j * t."""
        return self.counts - self.marks.intensities * self.t


@dataclass(frozen=True)
class DriverSpec:
    """Structured driver f(t, x, y, z, psi) = h(t, x, y, z, q).

    psi enters only through the scalar aggregate
    q = sum_j psi(e_j) gamma_j lambda_j with gamma_j in [-1, vartheta_j] and h
    nondecreasing in q, which realizes the jump-monotonicity assumption and
    keeps the comparison theorem applicable.
    """

    shape: Callable
    gamma: np.ndarray
    lipschitz_c: float
    monotone_in_q: bool = True
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gamma",
                           np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        if not self.monotone_in_q:
            raise ValueError("drivers must be nondecreasing in the jump aggregate")
        if self.lipschitz_c < 0:
            raise ValueError("lipschitz_c must be nonnegative")

    def check_against(self, marks: MarkSpace) -> None:
        if self.gamma.shape != (marks.n_marks,):
            raise ValueError("gamma needs one weight per mark")
        if np.any(self.gamma < -1.0):
            raise ValueError("gamma weights must be >= -1")
        if np.any(np.abs(self.gamma) > marks.vartheta + 1e-12):
            raise ValueError("|gamma_j| must not exceed vartheta_j")

    def q_weights(self, marks: MarkSpace) -> np.ndarray:
        return self.gamma * marks.intensities

    def q_of(self, psi: np.ndarray, marks: MarkSpace) -> np.ndarray:
        return psi @ self.q_weights(marks)

    def f(self, t, state, y, z, psi, marks) -> np.ndarray:
        """Full driver value from the per-mark control psi."""
        return self.shape(t, state, y, z, self.q_of(psi, marks))

    def shifted(self, amount: float) -> "DriverSpec":
        """Driver h - amount, used by the truncation-concatenation loop."""
        base = self.shape

        def shape(t, state, y, z, q, _b=base, _a=float(amount)):
            return _b(t, state, y, z, q) - _a

        return replace(self, shape=shape,
                       name=f"{self.name or 'driver'}-{amount:g}")


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition xi as a function of the terminal forward state."""

    evaluator: Callable[[ForwardState], np.ndarray]
    lower_bound_check: bool = False
    name: str = ""

    def __call__(self, state: ForwardState) -> np.ndarray:
        xi = np.asarray(self.evaluator(state), dtype=float)
        xi = np.broadcast_to(xi, state.w.shape).astype(float)
        if not np.all(np.isfinite(xi)):
            raise ValueError("terminal condition produced non-finite values")
        return xi


@dataclass(frozen=True)
class CEBackend:
    """Conditional-expectation backend spec."""

    kind: str = "tree"
    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("tree", "regression"):
            raise ValueError("backend kind must be 'tree' or 'regression'")
        if self.degree < 0 or self.ridge < 0:
            raise ValueError("degree and ridge must be nonnegative")


@dataclass
class SolutionGrid:
    """Discrete (Y, Z, psi, K) per path per grid time.

    Y and K have one column per grid point; Z and psi one column per step.
    ``weights`` are the path probabilities (uniform for ensembles, leaf
    probabilities for trees).
    """

    grid: TimeGrid
    marks: MarkSpace
    Y: np.ndarray
    Z: np.ndarray
    psi: np.ndarray
    K: np.ndarray
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    def y0(self) -> float:
        return float(self.weights @ self.Y[:, 0])

    def k_terminal_mean(self) -> float:
        return float(self.weights @ self.K[:, -1])

    def validate(self, tol: float = 1e-12) -> None:
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.Z))
                and np.all(np.isfinite(self.psi)) and np.all(np.isfinite(self.K))):
            raise ValueError("solution contains non-finite entries")
        if np.any(np.abs(self.K[:, 0]) > tol):
            raise ValueError("K must start at 0")
        if np.any(np.diff(self.K, axis=1) < -tol):
            raise ValueError("K must be nondecreasing per path")

    def write_csv(self, path) -> None:
        """One row per (path, step); terminal row pads controls with 0."""
        m = self.marks.n_marks
        n_steps = self.grid.n_steps
        with open(path, "w", newline="") as fh:
            cols = ["path", "step", "Y", "Z"] + \
                [f"psi_{j + 1}" for j in range(m)] + ["K"]
            fh.write(",".join(cols) + "\n")
            for p in range(self.n_paths):
                for i in range(n_steps + 1):
                    z = self.Z[p, i] if i < n_steps else 0.0
                    psis = self.psi[p, i] if i < n_steps else np.zeros(m)
                    cells = [str(p), str(i), f"{self.Y[p, i]:.17g}", f"{z:.17g}"]
                    cells += [f"{v:.17g}" for v in psis]
                    cells.append(f"{self.K[p, i]:.17g}")
                    fh.write(",".join(cells) + "\n")


# -- implicit step -----------------------------------------------------------


def _implicit_step(driver, t, state, target, z, q, dt, penalty,
                   substep_budget, fp_tol, max_fp_iter):
    """Solve y = target + dt*(h(t,x,y,z,q) - k_n(t,y)) vectorized over paths.

    The penalty is resolved exactly per fixed-point sweep via the identity
    (I + dt*k_n)^{-1}(w) = w - dt*k_{n'}(w) with n' = n/(1 + dt*n); only the
    driver's own y-dependence iterates, with contraction factor dt*L < 1
    enforced by automatic sub-stepping.

    Returns the solved y and the integral of k_n(t, y) over the step (zero
    without a penalty).
    """
    L = driver.lipschitz_c
    nsub = 1
    if dt * L >= 0.9:
        nsub = math.ceil(dt * L / 0.45)
        if nsub > substep_budget:
            raise ContractionFailure(
                f"dt*L = {dt * L:.3g} needs {nsub} substeps > budget {substep_budget}")
    dts = dt / nsub
    slope = None
    if penalty is not None:
        n = float(penalty.level)
        slope = n / (1.0 + dts * n)

    y = np.array(target, dtype=float, copy=True)
    pen_integral = np.zeros_like(y)
    for _ in range(nsub):
        right = y
        yy = np.array(right, copy=True)
        w = right
        for it in range(max_fp_iter):
            w = right + dts * np.asarray(driver.shape(t, state, yy, z, q), dtype=float)
            w = np.broadcast_to(w, yy.shape).astype(float)
            if penalty is not None:
                kv = resolvent_ordinate(penalty.family, t, w, slope,
                                        penalty.root_tolerance,
                                        penalty.search_radius)
                y_new = w - dts * kv
            else:
                y_new = w
            if np.max(np.abs(y_new - yy)) <= fp_tol * (1.0 + np.max(np.abs(y_new))):
                yy = y_new
                break
            yy = y_new
        else:
            raise ContractionFailure("implicit step did not converge")
        if penalty is not None:
            pen_integral += w - yy   # = dts * k_n(t, y*)
        y = yy
    return y, pen_integral, nsub


# -- regression machinery ----------------------------------------------------


def _monomial_exponents(n_vars: int, degree: int) -> list[tuple[int, ...]]:
    exps = [()]
    for _ in range(n_vars):
        exps = [e + (d,) for e in exps for d in range(degree + 1)]
    return [e for e in exps if sum(e) <= degree]


def basis_size(n_vars: int, degree: int) -> int:
    return math.comb(n_vars + degree, degree)


def _design_matrix(w: np.ndarray, counts: np.ndarray, degree: int) -> np.ndarray:
    cols = [w] + [counts[:, j] for j in range(counts.shape[1])]
    exps = _monomial_exponents(len(cols), degree)
    A = np.empty((w.size, len(exps)))
    for k, e in enumerate(exps):
        col = np.ones_like(w)
        for v, d in zip(cols, e):
            if d:
                col = col * v**d
        A[:, k] = col
    return A


def _ridge_predict(A: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """Fitted values of a ridge LS projection, one column per target."""
    scale = np.sqrt(np.mean(A**2, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    G = As.T @ As
    lam = ridge * np.trace(G) / G.shape[0]
    M = G + lam * np.eye(G.shape[0])
    if np.linalg.cond(M) > 1e14:
        raise RegressionRankDeficiency(
            "normal equations numerically singular; raise ridge or shrink basis")
    try:
        coef = np.linalg.solve(M, As.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise RegressionRankDeficiency(str(exc)) from exc
    return As @ coef


# -- main solver --------------------------------------------------------------


def solve_bsde(driver: DriverSpec, terminal: TerminalSpec, scenario,
               grid: TimeGrid, marks: MarkSpace, backend: CEBackend,
               penalty: Optional[PenalizedOperator] = None,
               substep_budget: int = 4096, fp_tol: float = 1e-13,
               max_fp_iter: int = 200) -> SolutionGrid:
    """Backward recursion for the discrete BSDE with jumps.

    Y_N = xi; then per step Z_i and psi_i are conditional projections of
    Y_{i+1} against the Brownian and compensated jump increments, and Y_i
    solves the implicit-in-y equation with the driver (and, when given, the
    structured penalty -k_n, whose integral fills K by the left-endpoint
    rule).  Without a penalty K is identically zero.
    """
    driver.check_against(marks)
    if isinstance(scenario, ScenarioTree) and backend.kind == "tree":
        return _solve_tree(driver, terminal, scenario, grid, marks, penalty,
                           substep_budget, fp_tol, max_fp_iter)
    if isinstance(scenario, PathEnsemble) and backend.kind == "regression":
        return _solve_regression(driver, terminal, scenario, grid, marks,
                                 backend, penalty, substep_budget, fp_tol,
                                 max_fp_iter)
    raise ValueError("backend kind does not match the scenario type "
                     f"({backend.kind} vs {type(scenario).__name__})")


def _solve_tree(driver, terminal, tree, grid, marks, penalty,
                substep_budget, fp_tol, max_fp_iter):
    n_steps = grid.n_steps
    m = marks.n_marks
    B = tree.branching
    qw = driver.q_weights(marks)

    state = ForwardState(grid.horizon, tree.w_nodes[n_steps],
                         tree.count_nodes[n_steps], marks, grid)
    y = terminal(state)

    y_levels = [None] * (n_steps + 1)
    z_levels = [None] * n_steps
    psi_levels = [None] * n_steps
    pen_levels = [None] * n_steps
    y_levels[n_steps] = y
    max_substeps = 1

    for i in reversed(range(n_steps)):
        dt = grid.steps[i]
        t = float(grid.times[i])
        V = y.reshape(-1, B)
        p = tree.probs[i]
        ey = V @ p
        z = V @ (p * tree.dW[i]) / dt
        if m:
            centered = tree.dN_tilde[i] - tree.bias[i]
            psi = (V @ (p[:, None] * centered)) / tree.var_dnt[i]
        else:
            psi = np.zeros((ey.size, 0))
        q = psi @ qw
        state = ForwardState(t, tree.w_nodes[i], tree.count_nodes[i], marks, grid)
        y, pen_int, nsub = _implicit_step(driver, t, state, ey, z, q, dt,
                                          penalty, substep_budget, fp_tol,
                                          max_fp_iter)
        max_substeps = max(max_substeps, nsub)
        y_levels[i], z_levels[i], psi_levels[i], pen_levels[i] = y, z, psi, pen_int

    k_levels = [np.zeros(1)]
    for i in range(n_steps):
        k_levels.append(np.repeat(k_levels[i] - pen_levels[i], B))

    n_leaves = tree.n_leaves
    Y = np.empty((n_leaves, n_steps + 1))
    K = np.empty((n_leaves, n_steps + 1))
    Z = np.empty((n_leaves, n_steps))
    psi_full = np.empty((n_leaves, n_steps, m))
    for i in range(n_steps + 1):
        Y[:, i] = tree.expand_to_leaves(i, y_levels[i])
        K[:, i] = tree.expand_to_leaves(i, k_levels[i])
    for i in range(n_steps):
        Z[:, i] = tree.expand_to_leaves(i, z_levels[i])
        psi_full[:, i, :] = tree.expand_to_leaves(i, psi_levels[i])

    meta = {"backend": "tree", "max_substeps": max_substeps,
            "penalty_level": None if penalty is None else penalty.level,
            "y0_targets": tree.expand_to_leaves(1, y_levels[1]) if n_steps else Y[:, 0]}
    return SolutionGrid(grid, marks, Y, Z, psi_full, K, tree.leaf_probs, meta)


def _solve_regression(driver, terminal, ensemble, grid, marks, backend,
                      penalty, substep_budget, fp_tol, max_fp_iter):
    n_steps = grid.n_steps
    m = marks.n_marks
    n = ensemble.n_paths
    p_basis = basis_size(1 + m, backend.degree)
    if n < 10 * p_basis:
        raise ValueError(f"regression needs n_paths >= 10 x basis size "
                         f"({10 * p_basis}), got {n}")
    qw = driver.q_weights(marks)
    W = ensemble.w_levels
    C = ensemble.count_levels
    lam_dt = np.outer(grid.steps, marks.intensities)  # (N, m)

    Y = np.empty((n, n_steps + 1))
    Z = np.empty((n, n_steps))
    psi = np.empty((n, n_steps, m))
    dK = np.empty((n, n_steps))
    state = ForwardState(grid.horizon, W[:, n_steps], C[:, n_steps], marks, grid)
    Y[:, n_steps] = terminal(state)
    max_substeps = 1

    for i in reversed(range(n_steps)):
        dt = grid.steps[i]
        t = float(grid.times[i])
        A = _design_matrix(W[:, i], C[:, i], backend.degree)
        y_next = Y[:, i + 1]
        targets = np.empty((n, 2 + m))
        targets[:, 0] = y_next
        targets[:, 1] = y_next * ensemble.dW[:, i]
        for j in range(m):
            targets[:, 2 + j] = y_next * ensemble.dN_tilde[:, i, j]
        preds = _ridge_predict(A, targets, backend.ridge)
        ey = preds[:, 0]
        z = preds[:, 1] / dt
        psi_i = preds[:, 2:] / lam_dt[i] if m else np.zeros((n, 0))
        q = psi_i @ qw
        state = ForwardState(t, W[:, i], C[:, i], marks, grid)
        y, pen_int, nsub = _implicit_step(driver, t, state, ey, z, q, dt,
                                          penalty, substep_budget, fp_tol,
                                          max_fp_iter)
        max_substeps = max(max_substeps, nsub)
        Y[:, i], Z[:, i], psi[:, i, :], dK[:, i] = y, z, psi_i, -pen_int

    K = np.zeros((n, n_steps + 1))
    np.cumsum(dK, axis=1, out=K[:, 1:])
    meta = {"backend": "regression", "max_substeps": max_substeps,
            "penalty_level": None if penalty is None else penalty.level,
            "seed": ensemble.seed, "y0_targets": Y[:, 1].copy()}
    return SolutionGrid(grid, marks, Y, Z, psi, K,
                        np.full(n, 1.0 / n), meta)


def condexp(backend: CEBackend, scenario, i: int, values: np.ndarray) -> np.ndarray:
    """E[values | F_{t_i}] under the chosen backend, returned per path.

    Tree: exact probability-weighted sums over the subtree below each time-i
    node.  Regression: ridge LS projection onto the polynomial basis in the
    time-i forward state.
    """
    values = np.asarray(values, dtype=float)
    if backend.kind == "tree":
        if not isinstance(scenario, ScenarioTree):
            raise ValueError("tree backend needs a ScenarioTree")
        return scenario.condexp_leaves(i, values)
    if not isinstance(scenario, PathEnsemble):
        raise ValueError("regression backend needs a PathEnsemble")
    A = _design_matrix(scenario.w_levels[:, i], scenario.count_levels[:, i],
                       backend.degree)
    return _ridge_predict(A, values[:, None], backend.ridge)[:, 0]


# -- residuals ----------------------------------------------------------------


@dataclass
class ResidualReport:
    """Per-step statistics of the discrete dynamics residual."""

    mean_abs: np.ndarray          # (N,) weighted mean |residual|
    max_abs: np.ndarray           # (N,)
    cond_mean_abs: np.ndarray     # (N,) worst conditional-mean residual
    kind: str                     # "tree" (exact) or "ensemble" (statistical)
    cond_mean_z: np.ndarray | None = None  # (N,) z-scores, ensemble only

    def passed(self, tol: float = 1e-10, z_gate: float = 4.0) -> bool:
        if self.kind == "tree":
            return bool(np.all(self.cond_mean_abs <= tol))
        return bool(np.all(np.abs(self.cond_mean_z) <= z_gate))


def residual_check(solution: SolutionGrid, driver: DriverSpec, scenario,
                   grid: TimeGrid, marks: MarkSpace) -> ResidualReport:
    """Check the discretized dynamics step by step.

    The jump increments are centered with the scenario's own compensator (the
    tree's two-point branch mean, or lambda*dt for a Poisson ensemble), so
    that on the exact tree the conditional-mean residual of a solver output is
    zero to machine precision.
    """
    n_steps = grid.n_steps
    m = marks.n_marks
    if isinstance(scenario, ScenarioTree):
        dW, dN = scenario.leaf_increments()
        centered = np.empty_like(dN)
        for i in range(n_steps):
            # center with the tree's exact per-step jump probabilities
            pj = scenario.probs[i] @ scenario.dN[i]
            centered[:, i, :] = dN[:, i, :] - pj
        kind = "tree"
    else:
        dW = scenario.dW
        centered = scenario.dN_tilde
        kind = "ensemble"

    w = solution.weights
    mean_abs = np.empty(n_steps)
    max_abs = np.empty(n_steps)
    cond_mean = np.empty(n_steps)
    zscores = np.empty(n_steps)
    if isinstance(scenario, ScenarioTree):
        w_levels = np.stack([scenario.expand_to_leaves(i, scenario.w_nodes[i])
                             for i in range(n_steps + 1)], axis=1)
        c_levels = np.stack([scenario.expand_to_leaves(i, scenario.count_nodes[i])
                             for i in range(n_steps + 1)], axis=1)
    else:
        w_levels = scenario.w_levels
        c_levels = scenario.count_levels

    for i in range(n_steps):
        dt = grid.steps[i]
        t = float(grid.times[i])
        state = ForwardState(t, w_levels[:, i], c_levels[:, i], marks, grid)
        fval = driver.f(t, state, solution.Y[:, i], solution.Z[:, i],
                        solution.psi[:, i, :], marks)
        jump_part = np.einsum("pj,pj->p", solution.psi[:, i, :], centered[:, i, :]) \
            if m else 0.0
        resid = solution.Y[:, i] - (
            solution.Y[:, i + 1] + dt * np.asarray(fval)
            - solution.Z[:, i] * dW[:, i] - jump_part
            + (solution.K[:, i + 1] - solution.K[:, i]))
        mean_abs[i] = float(w @ np.abs(resid))
        max_abs[i] = float(np.max(np.abs(resid)))
        if kind == "tree":
            cm = scenario.condexp_leaves(i, resid)
            cond_mean[i] = float(np.max(np.abs(cm)))
            zscores[i] = 0.0
        else:
            # The per-path residuals share the fitted regression functions, so
            # the naive std(resid)/sqrt(n) understates the fluctuation of the
            # mean; gauge it against the projected martingale increments.
            mu = float(resid.mean())
            mart = solution.Z[:, i] * dW[:, i] + jump_part
            scale = max(float(resid.std(ddof=1)), float(np.std(mart, ddof=1))) \
                if resid.size > 1 else 0.0
            se = scale / np.sqrt(resid.size)
            cond_mean[i] = abs(mu)
            zscores[i] = mu / se if se > 0 else 0.0

    return ResidualReport(mean_abs, max_abs, cond_mean, kind,
                          zscores if kind == "ensemble" else None)
