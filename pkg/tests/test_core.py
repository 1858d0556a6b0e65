"""Core types, trajectory validation, and the allocation solvers."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probid.auction import MarketModel, run_episode, smooth_day_profile
from probid.core import (AllocationInstance, CampaignConfig, InstanceTooLargeError,
                         Step, Trajectory, make_trajectory, solve_allocation_exact,
                         solve_allocation_greedy, validate_trajectory)


def _step(i, action=0.5, reward=1.0, cost=0.1, state=None):
    return Step(index=i, state=tuple(state or [0.0] * 16), action=action,
                reward=reward, cost=cost)


def _campaign(**kw):
    defaults = dict(budget=10.0, cpa_target=0.5, horizon=8, reward_mode="dense")
    defaults.update(kw)
    return CampaignConfig(**defaults)


class TestValidateTrajectory:
    def test_empty_trajectory_flagged(self):
        traj = Trajectory(campaign=_campaign(), steps=(), total_reward=0.0,
                          total_cost=0.0)
        result = validate_trajectory(traj)
        assert not result
        assert any("empty" in v for v in result.violations)

    def test_budget_exceeded_flagged(self):
        cfg = _campaign(budget=1.0, horizon=4)
        steps = [_step(i + 1, cost=1.000001 / 4) for i in range(4)]
        traj = make_trajectory(cfg, steps)
        result = validate_trajectory(traj)
        assert any("budget exceeded" in v for v in result.violations)

    def test_wrong_state_width_flagged(self):
        traj = make_trajectory(_campaign(), [_step(1, state=[0.0] * 7)])
        assert any("features" in v for v in validate_trajectory(traj).violations)

    def test_generated_trajectory_is_valid(self):
        cfg = _campaign(budget=30.0, cpa_target=0.3, horizon=48)
        market = MarketModel(lwc_profile=smooth_day_profile(48), seed=11)
        traj = run_episode(lambda s, ep: 0.4, cfg, market)
        assert len(traj) == 48
        assert validate_trajectory(traj)

    def test_total_mismatch_flagged(self):
        traj = Trajectory(campaign=_campaign(), steps=(_step(1),),
                          total_reward=999.0, total_cost=0.1)
        assert any("total_reward" in v for v in validate_trajectory(traj).violations)


def _enumerate_oracle(inst: AllocationInstance):
    """Independent brute force over itertools combinations."""
    n = len(inst)
    best_value, best_bits = 0.0, (0,) * n
    for r in range(n + 1):
        for combo in itertools.combinations(range(n), r):
            cost = sum(inst.costs[i] for i in combo)
            conv = sum(inst.conversions[i] for i in combo)
            if cost > inst.budget or cost > inst.ratio_cap * conv:
                continue
            value = sum(inst.values[i] for i in combo)
            bits = tuple(int(i in combo) for i in range(n))
            if value > best_value or (value == best_value and bits < best_bits):
                best_value, best_bits = value, bits
    return best_bits, best_value


class TestExactSolver:
    def test_worked_example(self):
        inst = AllocationInstance(values=(1.0, 2.0), costs=(1.0, 3.0),
                                  conversions=(1.0, 1.0), budget=3.0, ratio_cap=2.0)
        selection, value = solve_allocation_exact(inst)
        assert selection == (1, 0)
        assert value == 1.0

    def test_zero_cost_item_always_selected(self):
        inst = AllocationInstance(values=(1.0,), costs=(0.0,), conversions=(0.0,),
                                  budget=5.0, ratio_cap=0.1)
        assert solve_allocation_exact(inst) == ((1,), 1.0)

    def test_zero_budget_forces_empty(self):
        inst = AllocationInstance(values=(1.0, 1.0), costs=(0.5, 0.2),
                                  conversions=(1.0, 1.0), budget=0.0, ratio_cap=9.0)
        assert solve_allocation_exact(inst) == ((0, 0), 0.0)

    def test_size_limit(self):
        n = 25
        inst = AllocationInstance(values=(1.0,) * n, costs=(1.0,) * n,
                                  conversions=(1.0,) * n, budget=1.0, ratio_cap=2.0)
        with pytest.raises(InstanceTooLargeError):
            solve_allocation_exact(inst)

    def test_matches_independent_enumeration(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            n = int(rng.integers(1, 11))
            inst = AllocationInstance(
                values=tuple(rng.uniform(0, 1, n)),
                costs=tuple(rng.uniform(0, 0.5, n)),
                conversions=tuple(rng.uniform(0, 1, n)),
                budget=float(rng.uniform(0.1, 1.5)),
                ratio_cap=float(rng.uniform(0.1, 1.0)))
            got_sel, got_val = solve_allocation_exact(inst)
            exp_sel, exp_val = _enumerate_oracle(inst)
            assert got_val == pytest.approx(exp_val, abs=1e-12)
            assert got_sel == exp_sel


class TestGreedySolver:
    def test_matches_exact_on_worked_example(self):
        inst = AllocationInstance(values=(1.0, 2.0), costs=(1.0, 3.0),
                                  conversions=(1.0, 1.0), budget=3.0, ratio_cap=2.0)
        assert solve_allocation_greedy(inst) == solve_allocation_exact(inst)

    def test_identical_items_fill_budget(self):
        inst = AllocationInstance(values=(1.0,) * 10, costs=(1.0,) * 10,
                                  conversions=(1.0,) * 10, budget=5.0, ratio_cap=2.0)
        selection, value = solve_allocation_greedy(inst)
        assert sum(selection) == 5
        assert value == 5.0

    def test_single_feasible_item_selected(self):
        inst = AllocationInstance(values=(0.7,), costs=(0.3,), conversions=(1.0,),
                                  budget=1.0, ratio_cap=1.0)
        assert solve_allocation_greedy(inst) == ((1,), 0.7)


@st.composite
def instances(draw, max_n=12):
    n = draw(st.integers(1, max_n))
    f = st.floats(0.0, 1.0, allow_nan=False)
    return AllocationInstance(
        values=tuple(draw(st.lists(f, min_size=n, max_size=n))),
        costs=tuple(draw(st.lists(st.floats(0.0, 0.6), min_size=n, max_size=n))),
        conversions=tuple(draw(st.lists(f, min_size=n, max_size=n))),
        budget=draw(st.floats(0.0, 2.0)),
        ratio_cap=draw(st.floats(0.0, 1.5)))


def _feasible(inst, selection):
    cost = sum(c for c, x in zip(inst.costs, selection) if x)
    conv = sum(p for p, x in zip(inst.conversions, selection) if x)
    return cost <= inst.budget and cost <= inst.ratio_cap * conv


class TestSolverProperties:
    @given(instances())
    @settings(max_examples=60, deadline=None)
    def test_exact_dominates_greedy_and_both_feasible(self, inst):
        sel_e, val_e = solve_allocation_exact(inst)
        sel_g, val_g = solve_allocation_greedy(inst)
        assert _feasible(inst, sel_e)
        assert _feasible(inst, sel_g)
        assert val_e >= val_g - 1e-12

    @given(instances(max_n=8), st.randoms())
    @settings(max_examples=40, deadline=None)
    def test_permutation_leaves_value_unchanged(self, inst, rnd):
        _, val = solve_allocation_exact(inst)
        order = list(range(len(inst)))
        rnd.shuffle(order)
        permuted = AllocationInstance(
            values=tuple(inst.values[i] for i in order),
            costs=tuple(inst.costs[i] for i in order),
            conversions=tuple(inst.conversions[i] for i in order),
            budget=inst.budget, ratio_cap=inst.ratio_cap)
        sel_p, val_p = solve_allocation_exact(permuted)
        assert val_p == pytest.approx(val, abs=1e-12)
        # un-permuted selection remains feasible with the same value
        sel_back = [0] * len(inst)
        for pos, i in enumerate(order):
            sel_back[i] = sel_p[pos]
        assert _feasible(inst, sel_back)
        assert sum(v * x for v, x in zip(inst.values, sel_back)) == pytest.approx(val, abs=1e-12)

    @given(instances(max_n=8))
    @settings(max_examples=40, deadline=None)
    def test_scaling_by_two_preserves_selection(self, inst):
        sel, _ = solve_allocation_exact(inst)
        scaled = AllocationInstance(
            values=tuple(2.0 * v for v in inst.values),
            costs=tuple(2.0 * c for c in inst.costs),
            conversions=inst.conversions,
            budget=2.0 * inst.budget, ratio_cap=2.0 * inst.ratio_cap)
        sel_s, _ = solve_allocation_exact(scaled)
        assert sel_s == sel
