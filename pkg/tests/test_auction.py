"""Auction market: state features, step mechanics, episode contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probid.auction import (MarketModel, _Batch, build_state, new_episode,
                            run_episode, smooth_day_profile, step)
from probid.core import CampaignConfig, validate_trajectory


def _cfg(**kw):
    defaults = dict(budget=30.0, cpa_target=0.3, horizon=48, reward_mode="dense")
    defaults.update(kw)
    return CampaignConfig(**defaults)


def _market(seed=0, horizon=48, **kw):
    return MarketModel(lwc_profile=smooth_day_profile(horizon), seed=seed, **kw)


class TestBuildState:
    def test_fresh_episode(self):
        cfg = _cfg()
        ep = new_episode(cfg, _market(seed=3))
        s = build_state(ep)
        assert s[0] == cfg.horizon           # time_left
        assert s[1] == cfg.budget            # budget_left
        assert all(s[i] == 0.0 for i in (2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 15))
        assert s[8] == pytest.approx(np.mean(ep.current_batch.values))
        assert s[13] == len(ep.current_batch)

    def test_historical_mean_of_per_step_bid_means(self):
        ep = new_episode(_cfg(), _market(seed=3))
        ep.bid_means = [2.0, 4.0]
        assert build_state(ep)[2] == pytest.approx(3.0)

    def test_window_mean_uses_last_three(self):
        ep = new_episode(_cfg(), _market(seed=3))
        ep.bid_means = [1.0, 2.0, 3.0, 4.0]
        ep.t = 5
        assert build_state(ep)[3] == pytest.approx((2 + 3 + 4) / 3)

    def test_win_rate_is_ratio_of_totals(self):
        ep = new_episode(_cfg(), _market(seed=3))
        ep.total_wins, ep.total_participations = 3, 12
        ep.win_history, ep.participation_history = [1, 2], [2, 10]
        s = build_state(ep)
        assert s[11] == pytest.approx(3 / 12)
        assert s[12] == pytest.approx(3 / 12)


def _manual_batch(ep, values, lwcs, draws=None):
    ep.current_batch = _Batch(values=np.array(values, dtype=float),
                              lwcs=np.array(lwcs, dtype=float),
                              draws=np.array(draws if draws is not None
                                             else [1.0] * len(values)))


class TestStep:
    def test_zero_multiplier_wins_nothing(self):
        ep = new_episode(_cfg(), _market(seed=1))
        budget = ep.budget_left
        reward, cost = step(ep, 0.0)
        assert reward == 0.0 and cost == 0.0
        assert ep.budget_left == budget

    def test_single_auction_hand_check(self):
        ep = new_episode(_cfg(), _market(seed=1))
        _manual_batch(ep, values=[0.5], lwcs=[0.3])
        reward, cost = step(ep, 1.0)
        assert reward == pytest.approx(0.5)
        assert cost == pytest.approx(0.3)

    def test_loss_when_bid_below_clearing_price(self):
        ep = new_episode(_cfg(), _market(seed=1))
        _manual_batch(ep, values=[0.5], lwcs=[0.6])
        assert step(ep, 1.0) == (0.0, 0.0)

    def test_budget_truncation_forfeits_win(self):
        ep = new_episode(_cfg(budget=0.1), _market(seed=1))
        _manual_batch(ep, values=[0.9], lwcs=[0.3])
        reward, cost = step(ep, 1.0)
        assert (reward, cost) == (0.0, 0.0)
        assert ep.budget_left == 0.1

    def test_truncation_keeps_sweeping(self):
        ep = new_episode(_cfg(budget=0.25), _market(seed=1))
        _manual_batch(ep, values=[0.9, 0.8], lwcs=[0.3, 0.2])
        reward, cost = step(ep, 1.0)
        assert cost == pytest.approx(0.2)       # first win forfeited, second paid
        assert reward == pytest.approx(0.8)

    def test_sparse_reward_counts_conversions(self):
        ep = new_episode(_cfg(reward_mode="sparse"), _market(seed=1))
        _manual_batch(ep, values=[0.5, 0.5], lwcs=[0.1, 0.1], draws=[0.4, 0.6])
        reward, cost = step(ep, 1.0)
        assert reward == 1.0                     # only the 0.4 draw converts
        assert cost == pytest.approx(0.2)


class TestRunEpisode:
    def test_zero_policy_all_zero(self):
        traj = run_episode(lambda s, ep: 0.0, _cfg(), _market(seed=5))
        assert traj.total_reward == 0.0
        assert traj.total_cost == 0.0

    def test_budget_safety_under_huge_bids(self):
        for seed in range(100):
            traj = run_episode(lambda s, ep: 50.0, _cfg(), _market(seed=seed))
            assert traj.total_cost <= traj.campaign.budget
            assert validate_trajectory(traj)

    def test_deterministic_given_seed(self):
        a = run_episode(lambda s, ep: 0.4, _cfg(), _market(seed=9))
        b = run_episode(lambda s, ep: 0.4, _cfg(), _market(seed=9))
        assert a == b

    def test_truncated_episode_length(self):
        traj = run_episode(lambda s, ep: 0.4, _cfg(), _market(seed=9), n_steps=7)
        assert len(traj) == 7

    def test_profile_horizon_mismatch_rejected(self):
        with pytest.raises(ValueError):
            new_episode(_cfg(horizon=10), _market(seed=0, horizon=48))


class TestMarketProperties:
    @given(st.integers(0, 500), st.floats(0.1, 1.5), st.floats(0.1, 1.5))
    @settings(max_examples=30, deadline=None)
    def test_threshold_win_count_monotone_without_budget_pressure(self, seed, lam_a, lam_b):
        lo, hi = sorted((lam_a, lam_b))
        cfg = _cfg(budget=1e9, horizon=8)
        market = _market(seed=seed, horizon=8)
        wins = []
        for lam in (lo, hi):
            ep = new_episode(cfg, market)
            step(ep, lam)
            wins.append(ep.total_wins)
        assert wins[1] >= wins[0]

    def test_same_seed_same_batches_regardless_of_policy(self):
        cfg = _cfg(horizon=8)
        market = _market(seed=77, horizon=8)
        ep_a, ep_b = new_episode(cfg, market), new_episode(cfg, market)
        for lam_a, lam_b in [(0.1, 1.0), (0.9, 0.0), (0.3, 2.0)]:
            assert np.array_equal(ep_a.current_batch.values, ep_b.current_batch.values)
            assert np.array_equal(ep_a.current_batch.lwcs, ep_b.current_batch.lwcs)
            step(ep_a, lam_a)
            step(ep_b, lam_b)

    def test_dense_dominates_sparse_within_three_standard_errors(self):
        # paired episodes: conversion draws shared, so the per-episode
        # difference (dense - sparse) has mean >= 0
        diffs = []
        horizon = 12
        market = MarketModel(lwc_profile=smooth_day_profile(horizon))
        for seed in range(1000):
            m = market.with_seed(seed)
            dense = run_episode(lambda s, ep: 0.5, _cfg(horizon=horizon), m)
            sparse = run_episode(lambda s, ep: 0.5,
                                 _cfg(horizon=horizon, reward_mode="sparse"), m)
            assert dense.total_cost == sparse.total_cost
            diffs.append(dense.total_reward - sparse.total_reward)
        diffs = np.array(diffs)
        se = diffs.std(ddof=1) / np.sqrt(len(diffs))
        assert diffs.mean() >= -3 * se
