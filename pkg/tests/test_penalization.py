import numpy as np
import pytest
from dataclasses import replace

from mbsdej import (MarkSpace, PenalizationSchedule, Problem, TimeGrid,
                    build_tree, residual_check, simulate_paths, solve_mbsde,
                    solve_penalized, solve_unbounded, stopping_times)
from mbsdej.registry import (make_driver, make_envelope, make_family,
                             make_terminal)

from conftest import projection_value


class TestSolvePenalized:
    def test_slack_constraint_leaves_plain_solution(self, slack_problem, tree6,
                                                    tree_backend):
        for level in (1, 64):
            sol = solve_penalized(slack_problem, level, tree6, tree_backend)
            assert np.abs(sol.K).max() <= 1e-12
            assert np.min(sol.Y) >= 1.0 - 1e-12  # Y = E_i[xi] >= 1

    def test_constant_family_closed_form(self, grid6, no_marks, tree6,
                                         tree_backend):
        # k == -1: f_n = f - k_n = 1 for every level, so Y_i = T - t_i, K_T = T
        prob = Problem(grid6, no_marks,
                       make_driver("zero", {}, no_marks),
                       make_terminal("zero", {}, no_marks, grid6),
                       family=make_family("constant", {"c": -1.0}, grid6))
        for level in (1, 2, 32):
            sol = solve_penalized(prob, level, tree6, tree_backend)
            assert np.abs(sol.Y - (1.0 - grid6.times)[None, :]).max() <= 1e-10
            assert sol.k_terminal_mean() == pytest.approx(1.0, abs=1e-10)

    def test_reflection_high_level_near_projection(self, reflected_problem,
                                                   tree6, tree_backend):
        sol = solve_penalized(reflected_problem, 2**10, tree6, tree_backend)
        proj = projection_value(tree6, tree6.w_nodes[6], barrier=0.0)
        assert abs(sol.y0() - proj) <= 1e-2

    def test_real_valued_family_rejected(self, grid6, no_marks, tree6,
                                         tree_backend):
        prob = Problem(grid6, no_marks,
                       make_driver("zero", {}, no_marks),
                       make_terminal("brownian", {}, no_marks, grid6),
                       family=make_family("linear_decay", {}, grid6))
        with pytest.raises(ValueError):
            solve_penalized(prob, 4, tree6, tree_backend)

    def test_terminal_lower_bound_guard(self, grid6, no_marks, tree6,
                                        tree_backend):
        from mbsdej import ValidationError
        prob = Problem(grid6, no_marks,
                       make_driver("zero", {}, no_marks),
                       make_terminal("brownian",
                                     {"lower_bound_check": True},
                                     no_marks, grid6),
                       family=make_family("reflect_at", {"a": 0.0}, grid6))
        with pytest.raises(ValidationError):
            solve_penalized(prob, 4, tree6, tree_backend)


class TestSolveMbsde:
    def test_slack_problem_converges_immediately(self, slack_problem, tree6,
                                                 tree_backend):
        sched = PenalizationSchedule(levels=(1, 2, 4), stop_tolerance=1e-8)
        sol, report = solve_mbsde(slack_problem, sched, tree6, tree_backend)
        assert report.converged
        assert len(report.rows) == 2          # stops at the first level pair
        assert sol.k_terminal_mean() == pytest.approx(0.0, abs=1e-12)

    def test_reflected_monotone_increase_and_limit(self, reflected_problem,
                                                   tree6, tree_backend,
                                                   full_schedule):
        sol, report = solve_mbsde(reflected_problem, full_schedule, tree6,
                                  tree_backend)
        y0s = [r.y0 for r in report.rows]
        assert all(b >= a - 1e-9 for a, b in zip(y0s, y0s[1:]))
        assert max(r.mono_violation for r in report.rows) <= 1e-9
        proj = projection_value(tree6, tree6.w_nodes[6], barrier=0.0)
        assert abs(sol.y0() - proj) <= 2e-2
        assert sol.k_terminal_mean() > 0.0

    def test_non_convergence_reported_not_raised(self, reflected_problem,
                                                 tree6, tree_backend):
        sched = PenalizationSchedule(levels=(1, 2), stop_tolerance=1e-12)
        sol, report = solve_mbsde(reflected_problem, sched, tree6, tree_backend)
        assert sol is not None
        assert not report.converged
        assert "delta" in report.reason

    def test_max_level_caps_schedule(self, reflected_problem, tree6,
                                     tree_backend):
        sched = PenalizationSchedule(levels=(1, 2, 4, 8, 16),
                                     stop_tolerance=1e-12, max_level=4)
        _, report = solve_mbsde(reflected_problem, sched, tree6, tree_backend)
        assert report.levels == [1, 2, 4]

    def test_k_increments_stable_under_refinement(self, reg_backend):
        # discrete proxy for continuity of K: with the path law held fixed,
        # the largest per-step increment must not blow up as the grid refines
        # (trees are unsuitable here: they explore exponentially deeper
        # states as N grows, which inflates the raw maximum)
        marks = MarkSpace.empty()
        increments = []
        for n_steps in (4, 8, 16):
            grid = TimeGrid.uniform(1.0, n_steps)
            ens = simulate_paths(grid, marks, 4000, seed=77)
            prob = Problem(grid, marks, make_driver("zero", {}, marks),
                           make_terminal("brownian", {}, marks, grid),
                           family=make_family("reflect_at", {"a": 0.0}, grid))
            sol = solve_penalized(prob, 256, ens, reg_backend)
            increments.append(np.diff(sol.K, axis=1).max())
        assert increments[1] <= 1.5 * increments[0]
        assert increments[2] <= 1.5 * increments[0]

    def test_solution_grid_invariants(self, reflected_problem, tree6,
                                      tree_backend, full_schedule):
        sol, _ = solve_mbsde(reflected_problem, full_schedule, tree6,
                             tree_backend)
        sol.validate()

    def test_report_json_round_trip(self, slack_problem, tree6, tree_backend,
                                    tmp_path):
        import json
        sched = PenalizationSchedule(levels=(1, 2), stop_tolerance=1e-8)
        _, report = solve_mbsde(slack_problem, sched, tree6, tree_backend)
        path = tmp_path / "report.json"
        report.write_json(path)
        data = json.loads(path.read_text())
        assert data["converged"] is True
        assert [r["level"] for r in data["rows"]] == [1, 2]


class TestStoppingTimes:
    @pytest.fixture()
    def unbounded_setup(self):
        grid = TimeGrid.uniform(1.0, 8)
        marks = MarkSpace([1.0], [1.0])
        ens = simulate_paths(grid, marks, 2000, seed=42)
        prob = Problem(grid, marks,
                       make_driver("zero", {}, marks),
                       make_terminal("brownian", {}, marks, grid),
                       family=make_family("linear_decay", {}, grid),
                       envelope=make_envelope("linear_decay", {}, grid))
        return grid, marks, ens, prob

    def test_huge_level_stops_at_zero(self, unbounded_setup, reg_backend):
        grid, marks, ens, prob = unbounded_setup
        sched = PenalizationSchedule(levels=(1, 4, 16), stop_tolerance=1e-2)
        sol, _ = solve_unbounded(prob, sched, ens, reg_backend,
                                 max_truncation=2)
        big = int(np.ceil(grid.horizon * (1 + np.max(sol.Y.clip(min=0)))) + 1)
        tau = stopping_times(sol, prob.envelope, big, grid)
        assert np.all(tau == 0)

    def test_terminal_always_hits(self, unbounded_setup, reg_backend):
        grid, marks, ens, prob = unbounded_setup
        # even with Y pushed far up, ell(T, .) = 0 <= level catches at T
        sol = solve_penalized(
            replace(prob, family=make_family("reflect_at", {"a": 0.0}, grid)),
            1, ens, reg_backend)
        sol.Y += 1e6
        tau = stopping_times(sol, prob.envelope, 1, grid)
        assert np.all(tau <= grid.n_steps)
        assert np.all(tau == grid.n_steps)

    def test_monotone_in_level(self, unbounded_setup, reg_backend):
        grid, marks, ens, prob = unbounded_setup
        sched = PenalizationSchedule(levels=(1, 4, 16, 64), stop_tolerance=1e-3)
        _, record = solve_unbounded(prob, sched, ens, reg_backend,
                                    max_truncation=6)
        assert np.all(np.diff(record.tau, axis=0) <= 0)
        assert np.all(record.tau[0] == grid.n_steps)   # tau_0 = T anchor


class TestSolveUnbounded:
    def test_guards(self, reflected_problem, tree6, tree_backend):
        sched = PenalizationSchedule()
        with pytest.raises(ValueError):
            solve_unbounded(reflected_problem, sched, tree6, tree_backend)

    def test_missing_envelope(self, grid6, no_marks, tree6, tree_backend):
        prob = Problem(grid6, no_marks, make_driver("zero", {}, no_marks),
                       make_terminal("brownian", {}, no_marks, grid6),
                       family=make_family("linear_decay", {}, grid6))
        with pytest.raises(ValueError):
            solve_unbounded(prob, PenalizationSchedule(), tree6, tree_backend)

    def test_inactive_truncation_levels_agree_exactly(self, tree_backend):
        # k = (T-t) * 0.05 x stays far below both truncation levels on the
        # attained states, so consecutive levels solve the same problem
        grid = TimeGrid.uniform(1.0, 5)
        marks = MarkSpace.empty()
        tree = build_tree(grid, marks)
        prob = Problem(grid, marks, make_driver("zero", {}, marks),
                       make_terminal("brownian", {}, marks, grid),
                       family=make_family("linear_decay", {"scale": 0.05}, grid),
                       envelope=make_envelope("linear_decay", {}, grid))
        sched = PenalizationSchedule(levels=(1, 4, 16, 64, 256, 1024),
                                     stop_tolerance=1e-7)
        # agreement is limited by the finite penalization level reached, not
        # by the stop tolerance, hence the explicit floor
        sol, record = solve_unbounded(prob, sched, tree, tree_backend,
                                      max_truncation=3, overlap_floor=1e-4)
        for overlap in record.overlaps:
            assert overlap.max_y_diff <= 1e-4

    def test_pipeline_on_paper_example(self, reg_backend):
        grid = TimeGrid.uniform(1.0, 8)
        marks = MarkSpace([1.0], [1.0])
        ens = simulate_paths(grid, marks, 4000, seed=42)
        prob = Problem(grid, marks, make_driver("zero", {}, marks),
                       make_terminal("brownian", {}, marks, grid),
                       family=make_family("linear_decay", {}, grid),
                       envelope=make_envelope("linear_decay", {}, grid))
        sched = PenalizationSchedule(levels=(1, 4, 16, 64, 256),
                                     stop_tolerance=1e-3)
        sol, record = solve_unbounded(prob, sched, ens, reg_backend,
                                      max_truncation=6)
        assert record.uncovered_cells == 0
        assert np.all(np.diff(record.tau, axis=0) <= 0)
        # truncation ordering: deeper truncations lower the solution
        assert all(b <= a + 5e-2 for a, b in zip(record.level_y0,
                                                 record.level_y0[1:]))
        # K starts at zero but may decrease (bounded variation after unshift)
        assert np.abs(sol.K[:, 0]).max() == 0.0
        report = residual_check(sol, prob.driver, ens, grid, marks)
        assert report.passed()

    def test_concatenation_csv(self, tree_backend, tmp_path):
        grid = TimeGrid.uniform(1.0, 4)
        marks = MarkSpace.empty()
        tree = build_tree(grid, marks)
        prob = Problem(grid, marks, make_driver("zero", {}, marks),
                       make_terminal("brownian", {}, marks, grid),
                       family=make_family("linear_decay", {}, grid),
                       envelope=make_envelope("linear_decay", {}, grid))
        sched = PenalizationSchedule(levels=(1, 4, 16), stop_tolerance=1e-2)
        _, record = solve_unbounded(prob, sched, tree, tree_backend,
                                    max_truncation=2)
        path = tmp_path / "concat.csv"
        record.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "path,level,tau_index"
        assert len(lines) == 1 + 3 * tree.n_leaves  # anchor + 2 levels
