import numpy as np
import pytest

from mbsdej import (CEBackend, ContractionFailure, DriverSpec, MarkSpace,
                    RegressionRankDeficiency, TerminalSpec, TimeGrid,
                    build_tree, condexp, residual_check, simulate_paths,
                    solve_bsde)
from mbsdej.registry import make_driver, make_terminal


class TestMartingaleRepresentation:
    def test_brownian_terminal(self, grid6, marks1, tree6_jumps, tree_backend):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        assert np.abs(sol.Z - 1.0).max() <= 1e-10
        assert np.abs(sol.psi).max() <= 1e-10
        assert np.abs(sol.K).max() == 0.0
        # Y reproduces the Brownian levels exactly
        w_levels = np.stack([tree6_jumps.expand_to_leaves(i, tree6_jumps.w_nodes[i])
                             for i in range(7)], axis=1)
        assert np.abs(sol.Y - w_levels).max() <= 1e-12

    def test_compensated_jump_terminal(self, grid6, marks1, tree6_jumps,
                                       tree_backend):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("compensated_jumps", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        assert np.abs(sol.psi - 1.0).max() <= 1e-10
        assert np.abs(sol.Z).max() <= 1e-10

    def test_constant_driver_integrates(self, grid6, marks1, tree6_jumps,
                                        tree_backend):
        drv = make_driver("constant", {"c": 0.7}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        # E[xi] = 0 and f integrates to c*T
        assert sol.y0() == pytest.approx(0.7, abs=1e-12)


class TestLinearDriver:
    def linear_y0(self, grid, tree, a, b):
        drv = make_driver("linear", {"a": a, "b": b}, MarkSpace.empty())
        term = make_terminal("brownian", {}, MarkSpace.empty(), grid)
        sol = solve_bsde(drv, term, tree, grid, MarkSpace.empty(),
                         CEBackend(kind="tree"))
        return sol

    def test_discrete_recursion_identity(self):
        grid = TimeGrid.uniform(1.0, 5)
        tree = build_tree(grid, MarkSpace.empty())
        a, b = 0.8, -0.3
        sol = self.linear_y0(grid, tree, a, b)
        # implicit recursion: Y_i = (E_i[Y_{i+1}] + dt*b) / (1 - dt*a) exactly
        B = tree.branching
        y = sol.Y[:, :]
        for i in reversed(range(5)):
            y_next = sol.Y[::B**(4 - i), i + 1] if i < 4 else sol.Y[:, 5]
        # direct recomputation from leaf level
        v = tree.w_nodes[5].copy()
        dt = grid.steps[0]
        for i in reversed(range(5)):
            v = (v.reshape(-1, B) @ tree.probs[i] + dt * b) / (1.0 - dt * a)
        assert sol.y0() == pytest.approx(float(v[0]), abs=1e-12)

    def test_refinement_approaches_exponential_limit(self):
        # Y_0 -> e^{aT} E[xi] + b (e^{aT} - 1)/a as the grid refines
        a, b = 0.8, -0.3
        target = b * (np.exp(a) - 1.0) / a   # E[W_T] = 0
        errors = []
        for n_steps in (4, 8, 16):
            grid = TimeGrid.uniform(1.0, n_steps)
            tree = build_tree(grid, MarkSpace.empty())
            errors.append(abs(self.linear_y0(grid, tree, a, b).y0() - target))
        assert errors[1] < errors[0] and errors[2] < errors[1]
        # first-order scheme: halving the step roughly halves the error
        assert errors[2] < 0.6 * errors[1]


class TestImplicitStep:
    def test_substepping_on_stiff_driver(self):
        # dt*L = 25 forces automatic sub-division; the composed implicit
        # steps approximate the exponential decay e^{aT}
        grid = TimeGrid.uniform(1.0, 2)
        tree = build_tree(grid, MarkSpace.empty())
        marks = MarkSpace.empty()
        drv = make_driver("linear", {"a": -50.0, "b": 0.0}, marks)
        term = TerminalSpec(lambda s: np.ones_like(s.w), name="one")
        sol = solve_bsde(drv, term, tree, grid, marks, CEBackend(kind="tree"))
        assert sol.meta["max_substeps"] > 1
        assert sol.y0() == pytest.approx(np.exp(-50.0), abs=1e-4)

    def test_contraction_failure_on_budget(self):
        grid = TimeGrid.uniform(1.0, 1)
        tree = build_tree(grid, MarkSpace.empty())
        marks = MarkSpace.empty()
        drv = make_driver("linear", {"a": -50.0, "b": 0.0}, marks)
        term = make_terminal("brownian", {}, marks, grid)
        with pytest.raises(ContractionFailure):
            solve_bsde(drv, term, tree, grid, marks, CEBackend(kind="tree"),
                       substep_budget=3)


class TestCondexp:
    def test_constant_values_fixed_point(self, grid6, marks1, tree6_jumps,
                                         ensemble_small, tree_backend,
                                         reg_backend):
        v_tree = np.full(tree6_jumps.n_leaves, 3.25)
        out = condexp(tree_backend, tree6_jumps, 2, v_tree)
        assert np.allclose(out, 3.25, atol=1e-14)
        v_reg = np.full(ensemble_small.n_paths, 3.25)
        out = condexp(reg_backend, ensemble_small, 2, v_reg)
        assert np.allclose(out, 3.25, atol=1e-9)

    def test_regression_recovers_linear_signal(self, grid6, marks1,
                                               ensemble_small, reg_backend):
        # y = 2 w + noise: fitted coefficients on (1, w) must be ~(0, 2)
        rng = np.random.default_rng(5)
        w = ensemble_small.w_levels[:, 3]
        n = w.size
        sigma = 0.1
        y = 2.0 * w + rng.normal(0, sigma, n)
        preds = condexp(reg_backend, ensemble_small, 3, y)
        A1 = np.column_stack([np.ones_like(w), w])
        coef, *_ = np.linalg.lstsq(A1, preds, rcond=None)
        se_slope = sigma / (np.sqrt(n) * w.std())
        se_icept = sigma / np.sqrt(n)
        assert abs(coef[0]) <= 4 * se_icept
        assert abs(coef[1] - 2.0) <= 4 * se_slope
        # and the fit agrees with the closed-form LS on the same basis
        counts = ensemble_small.count_levels[:, 3]
        A2 = np.column_stack([np.ones_like(w), counts[:, 0], counts[:, 0]**2,
                              w, w * counts[:, 0], w**2])
        full, *_ = np.linalg.lstsq(A2, y, rcond=None)
        assert np.abs(preds - A2 @ full).max() <= 1e-6

    def test_rank_deficiency_without_ridge(self, grid6, marks1):
        # at step 0 every state column is identically zero
        ens = simulate_paths(grid6, marks1, 200, seed=3)
        with pytest.raises(RegressionRankDeficiency):
            condexp(CEBackend(kind="regression", degree=2, ridge=0.0),
                    ens, 0, np.ones(200))

    def test_backend_scenario_mismatch(self, tree6_jumps):
        with pytest.raises(ValueError):
            condexp(CEBackend(kind="regression"), tree6_jumps, 0,
                    np.ones(tree6_jumps.n_leaves))


class TestBackendAgreement:
    def test_y0_within_mc_error(self, grid6, marks1, tree6_jumps, tree_backend,
                                reg_backend):
        drv = make_driver("mixed", {"a": 0.5, "bz": 0.3, "qc": 0.5,
                                    "gamma": 0.5}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        exact = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        ens = simulate_paths(grid6, marks1, 20_000, seed=101)
        mc = solve_bsde(drv, term, ens, grid6, marks1, reg_backend)
        targets = mc.meta["y0_targets"]
        se = targets.std(ddof=1) / np.sqrt(targets.size)
        # tree carries its own O(dt) discretization bias versus the ensemble,
        # so allow the bias floor plus 4 standard errors
        dt = grid6.steps[0]
        assert abs(mc.y0() - exact.y0()) <= 4 * se + 2 * dt**1.5


class TestComparisonPlainLevel:
    def test_shifted_terminal_and_dominated_driver(self, grid6, marks1,
                                                   tree6_jumps, tree_backend):
        term = make_terminal("brownian", {}, marks1, grid6)
        term_lo = make_terminal("brownian", {"shift": -0.5}, marks1, grid6)
        drv = make_driver("mixed", {"a": 0.4, "bz": 0.2, "qc": 0.3,
                                    "gamma": 0.5}, marks1)
        sol_hi = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        sol_lo = solve_bsde(drv, term_lo, tree6_jumps, grid6, marks1,
                            tree_backend)
        assert np.all(sol_lo.Y <= sol_hi.Y + 1e-12)
        sol_dom = solve_bsde(drv.shifted(1.0), term, tree6_jumps, grid6, marks1,
                             tree_backend)
        assert np.all(sol_dom.Y <= sol_hi.Y + 1e-12)


class TestResidual:
    def test_tree_solution_exact(self, grid6, marks1, tree6_jumps, tree_backend):
        drv = make_driver("mixed", {"a": 0.4, "bz": 0.2, "qc": 0.3,
                                    "gamma": 0.5}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        report = residual_check(sol, drv, tree6_jumps, grid6, marks1)
        assert report.kind == "tree"
        assert report.cond_mean_abs.max() <= 1e-10
        assert report.passed()

    def test_regression_statistical(self, grid6, marks1, ensemble_small,
                                    reg_backend):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, ensemble_small, grid6, marks1, reg_backend)
        report = residual_check(sol, drv, ensemble_small, grid6, marks1)
        assert report.passed()

    def test_corruption_detected(self, grid6, marks1, tree6_jumps, tree_backend):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        sol.Y[:, 5] += 1.0
        report = residual_check(sol, drv, tree6_jumps, grid6, marks1)
        assert not report.passed()
        assert report.mean_abs[5] >= 1.0 - 1e-6


class TestSpecs:
    def test_driver_sampled_invariants(self, grid6, marks1):
        # Lipschitz in (y, z) with the declared constant, nondecreasing in q
        drv = make_driver("mixed", {"a": 0.4, "bz": 0.2, "qc": 0.3,
                                    "gamma": 0.5}, marks1)
        rng = np.random.default_rng(4)
        state = None  # registry drivers ignore the forward state
        for _ in range(200):
            t = rng.uniform(0, 1)
            y, y2, z, z2, q = rng.normal(0, 2, 5)
            gap = abs(drv.shape(t, state, y, z, q) - drv.shape(t, state, y2, z2, q))
            assert gap <= drv.lipschitz_c * (abs(y - y2) + abs(z - z2)) + 1e-12
            q2 = q + rng.uniform(0, 3)
            assert drv.shape(t, state, y, z, q2) >= drv.shape(t, state, y, z, q)

    def test_driver_gamma_bounds(self, marks1):
        with pytest.raises(ValueError):
            DriverSpec(shape=lambda t, s, y, z, q: y, gamma=[-1.5],
                       lipschitz_c=1.0).check_against(marks1)
        with pytest.raises(ValueError):
            # vartheta for mark value 1.0 defaults to 2.0
            DriverSpec(shape=lambda t, s, y, z, q: y, gamma=[5.0],
                       lipschitz_c=1.0).check_against(marks1)

    def test_driver_must_be_monotone_in_q(self):
        with pytest.raises(ValueError):
            DriverSpec(shape=lambda t, s, y, z, q: y, gamma=[],
                       lipschitz_c=0.0, monotone_in_q=False)

    def test_terminal_rejects_non_finite(self, grid6, marks1, tree6_jumps,
                                         tree_backend):
        drv = make_driver("zero", {}, marks1)
        bad = TerminalSpec(lambda s: np.where(s.w > 0, np.inf, 0.0))
        with pytest.raises(ValueError):
            solve_bsde(drv, bad, tree6_jumps, grid6, marks1, tree_backend)

    def test_solution_csv_layout(self, grid6, marks1, tree6_jumps,
                                 tree_backend, tmp_path):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        sol = solve_bsde(drv, term, tree6_jumps, grid6, marks1, tree_backend)
        out = tmp_path / "solution.csv"
        sol.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "path,step,Y,Z,psi_1,K"
        assert len(lines) == 1 + sol.n_paths * (grid6.n_steps + 1)

    def test_backend_mismatch_raises(self, grid6, marks1, tree6_jumps):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        with pytest.raises(ValueError):
            solve_bsde(drv, term, tree6_jumps, grid6, marks1,
                       CEBackend(kind="regression"))

    def test_regression_needs_enough_paths(self, grid6, marks1, reg_backend):
        drv = make_driver("zero", {}, marks1)
        term = make_terminal("brownian", {}, marks1, grid6)
        ens = simulate_paths(grid6, marks1, 30, seed=1)
        with pytest.raises(ValueError):
            solve_bsde(drv, term, ens, grid6, marks1, reg_backend)
