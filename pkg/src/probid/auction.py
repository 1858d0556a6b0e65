"""Stochastic single-agent auction market.

Each episode runs a fixed number of decision steps. At every step a batch of
impressions arrives (count, predicted values, market clearing prices all drawn
from the market model), the policy picks a single bid multiplier, and every
impression is bid value * multiplier. Wins pay the clearing price, processed
in batch order with hard budget truncation: a win the remaining budget cannot
pay for is forfeited and the sweep continues.

The 16-feature state vector is built before the action is chosen, from the
current batch plus running histories of past steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import STATE_DIM, CampaignConfig, Step, Trajectory, make_trajectory


def smooth_day_profile(horizon: int, amplitude: float = 0.5) -> tuple[float, ...]:
    """Unimodal intraday competition curve, peaking mid-horizon, all > 0."""
    if horizon == 1:
        return (1.0,)
    return tuple(1.0 + amplitude * math.sin(math.pi * t / (horizon - 1))
                 for t in range(horizon))


@dataclass(frozen=True)
class MarketModel:
    """Parameters of the impression stream.

    Impression counts use a gamma-Poisson mixture (dispersion 1 = Poisson,
    clamped to >= 1); values are Beta-distributed in [0, 1]; clearing prices
    are lognormal scaled by the intraday profile.
    """

    imps_per_step_mean: float = 24.0
    imps_per_step_dispersion: float = 1.5
    value_alpha: float = 2.0
    value_beta: float = 6.0
    lwc_median: float = 0.08
    lwc_sigma: float = 0.6
    lwc_profile: tuple[float, ...] = smooth_day_profile(48)
    seed: int = 0

    def __post_init__(self):
        if self.imps_per_step_mean <= 0:
            raise ValueError("imps_per_step_mean must be positive")
        if self.imps_per_step_dispersion < 1.0:
            raise ValueError("imps_per_step_dispersion must be >= 1")
        if min(self.lwc_profile) <= 0:
            raise ValueError("lwc_profile entries must be > 0")

    def with_seed(self, seed: int) -> "MarketModel":
        return replace(self, seed=seed)


@dataclass
class _Batch:
    values: np.ndarray
    lwcs: np.ndarray
    draws: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class EpisodeState:
    """Mutable per-episode simulator state. Single caller per instance."""

    campaign: CampaignConfig
    market: MarketModel
    rng: np.random.Generator
    t: int = 1
    running_cost: float = 0.0
    running_reward: float = 0.0
    total_wins: int = 0
    total_participations: int = 0
    # per completed step
    bid_means: list = None
    lwc_means: list = None
    value_means: list = None
    reward_history: list = None
    win_history: list = None
    participation_history: list = None
    pv_counts: list = None
    current_batch: _Batch = None

    def __post_init__(self):
        for name in ("bid_means", "lwc_means", "value_means", "reward_history",
                     "win_history", "participation_history", "pv_counts"):
            if getattr(self, name) is None:
                setattr(self, name, [])
        if self.current_batch is None:
            self.current_batch = _draw_batch(self)

    @property
    def budget_left(self) -> float:
        return self.campaign.budget - self.running_cost

    @property
    def active(self) -> bool:
        return self.t <= self.campaign.horizon


def new_episode(cfg: CampaignConfig, market: MarketModel) -> EpisodeState:
    if len(market.lwc_profile) != cfg.horizon:
        raise ValueError(f"lwc_profile length {len(market.lwc_profile)} != horizon {cfg.horizon}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(market.seed)))
    return EpisodeState(campaign=cfg, market=market, rng=rng)


def _draw_batch(ep: EpisodeState) -> _Batch:
    m = ep.market
    if m.imps_per_step_dispersion == 1.0:
        lam = m.imps_per_step_mean
    else:
        # gamma-Poisson: mean m, variance m * dispersion
        shape = m.imps_per_step_mean / (m.imps_per_step_dispersion - 1.0)
        scale = m.imps_per_step_dispersion - 1.0
        lam = ep.rng.gamma(shape, scale)
    count = max(1, int(ep.rng.poisson(lam)))
    values = ep.rng.beta(m.value_alpha, m.value_beta, size=count)
    mult = m.lwc_profile[ep.t - 1]
    lwcs = ep.rng.lognormal(math.log(m.lwc_median), m.lwc_sigma, size=count) * mult
    draws = ep.rng.uniform(0.0, 1.0, size=count)
    return _Batch(values=values, lwcs=lwcs, draws=draws)


def _window_mean(series: Sequence[float], k: int = 3) -> float:
    if not series:
        return 0.0
    w = series[-k:]
    return float(sum(w) / len(w))


def _mean(series: Sequence[float]) -> float:
    return float(sum(series) / len(series)) if series else 0.0


def build_state(ep: EpisodeState) -> np.ndarray:
    """16 features, fixed order: remaining time and budget, then historical /
    recent-window stats of bids, clearing prices, values, conversions, win
    rates, and impression volume."""
    if not ep.active:
        raise ValueError("episode finished")
    b = ep.current_batch
    last3_wins = sum(ep.win_history[-3:])
    last3_parts = sum(ep.participation_history[-3:])
    feats = np.array([
        ep.campaign.horizon - ep.t + 1,                       # time_left
        ep.budget_left,                                       # budget_left
        _mean(ep.bid_means),                                  # historical_bid_mean
        _window_mean(ep.bid_means),                           # last_three_bid_mean
        _mean(ep.lwc_means),                                  # historical_lwc_mean
        _window_mean(ep.lwc_means),                           # last_three_lwc_mean
        _mean(ep.value_means),                                # historical_pvalues_mean
        _window_mean(ep.value_means),                         # last_three_pvalues_mean
        float(np.mean(b.values)),                             # current_pvalues_mean
        _mean(ep.reward_history),                             # historical_conversion_mean
        _window_mean(ep.reward_history),                      # last_three_conversion_mean
        ep.total_wins / ep.total_participations if ep.total_participations else 0.0,
        last3_wins / last3_parts if last3_parts else 0.0,     # last_three_xi_mean
        float(len(b)),                                        # current_pv_num
        float(sum(ep.pv_counts[-3:])),                        # last_three_pv_num_total
        float(sum(ep.pv_counts)),                             # historical_pv_num_total
    ], dtype=np.float64)
    assert feats.shape == (STATE_DIM,)
    return feats


def step(ep: EpisodeState, lam: float) -> tuple[float, float]:
    """Resolve the current step's auctions at bid multiplier `lam`.

    Returns (reward, cost) and advances the episode in place. The budget
    check recomputes the cumulative cost in the exact association the
    trajectory validator uses, so total cost <= budget holds bit-exactly.
    """
    if lam < 0:
        raise ValueError("bid multiplier must be >= 0")
    if not ep.active:
        raise ValueError("episode finished")
    b = ep.current_batch
    bids = lam * b.values
    dense = ep.campaign.reward_mode == "dense"

    won = bids >= b.lwcs
    all_cost = float(np.sum(b.lwcs[won]))
    if ep.running_cost + all_cost <= ep.campaign.budget:
        # budget cannot truncate this step: settle the whole batch at once
        step_cost = all_cost
        wins = int(np.count_nonzero(won))
        if dense:
            reward = float(np.sum(b.values[won]))
        else:
            reward = float(np.count_nonzero(won & (b.draws < b.values)))
    else:
        step_cost = 0.0
        reward = 0.0
        wins = 0
        for i in range(len(b)):
            if won[i]:
                pay = float(b.lwcs[i])
                if ep.running_cost + (step_cost + pay) > ep.campaign.budget:
                    continue  # forfeited; keep sweeping
                step_cost += pay
                wins += 1
                if dense:
                    reward += float(b.values[i])
                elif b.draws[i] < b.values[i]:
                    reward += 1.0

    ep.bid_means.append(float(np.mean(bids)))
    ep.lwc_means.append(float(np.mean(b.lwcs)))
    ep.value_means.append(float(np.mean(b.values)))
    ep.reward_history.append(reward)
    ep.win_history.append(wins)
    ep.participation_history.append(len(b))
    ep.pv_counts.append(len(b))
    ep.total_wins += wins
    ep.total_participations += len(b)
    ep.running_cost += step_cost
    ep.running_reward += reward
    ep.t += 1
    if ep.active:
        ep.current_batch = _draw_batch(ep)
    return reward, step_cost


PolicyFn = Callable[[np.ndarray, EpisodeState], float]


def run_episode(policy: PolicyFn, cfg: CampaignConfig, market: MarketModel,
                n_steps: int | None = None) -> Trajectory:
    """Run an episode end to end under a policy callback.

    `policy(state, episode)` returns the bid multiplier for the current step.
    `n_steps` truncates the episode early (used for behavior logs with
    varying lengths); defaults to the full horizon.
    """
    limit = cfg.horizon if n_steps is None else min(n_steps, cfg.horizon)
    if limit < 1:
        raise ValueError("n_steps must be >= 1")
    ep = new_episode(cfg, market)
    steps = []
    for t in range(1, limit + 1):
        state = build_state(ep)
        lam = float(policy(state, ep))
        reward, cost = step(ep, lam)
        steps.append(Step(index=t, state=tuple(state.tolist()), action=lam,
                          reward=reward, cost=cost))
    return make_trajectory(cfg, steps)
