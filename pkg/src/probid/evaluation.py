"""Closed-loop pacing inference and the Value / AR / ER / Score harness.

At episode start the conditioning tokens are seeded from the campaign: the
allowable-cost token gets the full budget, the required-value token gets
budget / target ratio. After every step both tokens are decremented by the
realized reward and cost; negative values pass through untouched so the model
sees overdelivery. Actions are the deterministic policy mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .auction import EpisodeState, MarketModel, build_state, new_episode, step
from .core import CampaignConfig
from .model import PolicyModel

SCORE_GAMMA = 2.0  # severity of the overspend penalty in Score


@dataclass
class PacingState:
    """Rolling inference context for one episode; single caller.

    Tokens are held as (initial value, consumed running sum) so the
    telescoping identity token_{T+1} = token_1 - sum(feedback) is bit-exact;
    the running sums accumulate in arrival order like the trajectory totals.
    """

    horizon: int
    rtg_init: float
    ctg_init: float
    reward_consumed: float = 0.0
    cost_consumed: float = 0.0
    rtg_hist: list = field(default_factory=list)
    ctg_hist: list = field(default_factory=list)
    state_hist: list = field(default_factory=list)
    action_hist: list = field(default_factory=list)
    pending_action: float | None = None

    @property
    def rtg_token(self) -> float:
        return self.rtg_init - self.reward_consumed

    @property
    def ctg_token(self) -> float:
        return self.ctg_init - self.cost_consumed

    @property
    def t(self) -> int:
        return len(self.action_hist) + 1


def init_pacing(cfg: CampaignConfig) -> PacingState:
    return PacingState(horizon=cfg.horizon, rtg_init=cfg.budget / cfg.cpa_target,
                       ctg_init=cfg.budget)


def _context_tensors(pacing: PacingState, window: int, dtype: torch.dtype):
    """Stack the last `window` steps (current step included, action slot of
    the current step is a placeholder zero)."""
    n = len(pacing.rtg_hist)
    lo = max(0, n - window)
    rtg = torch.tensor([pacing.rtg_hist[lo:]], dtype=dtype)
    ctg = torch.tensor([pacing.ctg_hist[lo:]], dtype=dtype)
    states = torch.tensor([pacing.state_hist[lo:]], dtype=dtype)
    actions = torch.tensor([pacing.action_hist[lo:] + [0.0]], dtype=dtype)
    timesteps = torch.arange(lo + 1, n + 1).unsqueeze(0)
    return rtg, ctg, states, actions, timesteps


def act(model: PolicyModel, pacing: PacingState, state: np.ndarray) -> float:
    """Append the current tokens, run the model, return the mean action."""
    if pacing.t > pacing.horizon:
        raise ValueError("episode horizon exhausted")
    pacing.rtg_hist.append(pacing.rtg_token)
    pacing.ctg_hist.append(pacing.ctg_token)
    pacing.state_hist.append([float(x) for x in state])

    with torch.no_grad():
        rtg, ctg, states, actions, ts = _context_tensors(
            pacing, model.config.context_steps, model.config.torch_dtype)
        policy, _ = model(rtg, ctg, states, actions, ts)
    lam = float(policy.mu[0, -1])
    pacing.pending_action = lam
    return lam


def observe(pacing: PacingState, reward: float, cost: float) -> PacingState:
    """Commit realized feedback: decrement both tokens (possibly below zero)
    and append the action just taken to the context."""
    if pacing.pending_action is None:
        raise ValueError("observe() called before act()")
    pacing.reward_consumed += reward
    pacing.cost_consumed += cost
    pacing.action_hist.append(pacing.pending_action)
    pacing.pending_action = None
    return pacing


@dataclass(frozen=True)
class EpisodeReport:
    value: float
    realized_cpa: float  # inf when no value collected
    ar: float            # realized cpa / target; inf when no value
    exceeded: bool
    score: float


def episode_report(value: float, cost: float, cpa_target: float) -> EpisodeReport:
    if value <= 0.0:
        return EpisodeReport(value=0.0, realized_cpa=math.inf, ar=math.inf,
                             exceeded=True, score=0.0)
    cpa = cost / value
    ar = cpa / cpa_target
    score = value * min(1.0, (1.0 / ar) ** SCORE_GAMMA) if ar > 0 else value
    return EpisodeReport(value=value, realized_cpa=cpa, ar=ar,
                         exceeded=ar > 1.0, score=score)


def aggregate_reports(reports: list[EpisodeReport], cpa_target: float,
                      costs: list[float]) -> dict:
    """Per-episode means plus the pooled alternative for the ratio metric.

    Mean AR covers only episodes that collected value (AR is infinite
    otherwise); those episodes still count toward the exceed rate.
    """
    values = [r.value for r in reports]
    finite_ar = [r.ar for r in reports if math.isfinite(r.ar)]
    total_v, total_c = sum(values), sum(costs)
    pooled_ar = (total_c / total_v) / cpa_target if total_v > 0 else math.inf
    return {
        "episodes": len(reports),
        "value_mean": float(np.mean(values)),
        "ar_mean": float(np.mean(finite_ar)) if finite_ar else math.inf,
        "ar_pooled": pooled_ar,
        "exceed_rate": float(np.mean([r.exceeded for r in reports])),
        "score_mean": float(np.mean([r.score for r in reports])),
    }


def evaluate(model: PolicyModel, market: MarketModel, cfg: CampaignConfig,
             n_episodes: int, seed: int = 0,
             budget_scale: float = 1.0) -> tuple[dict, list[EpisodeReport]]:
    """Run seeded closed-loop episodes in lockstep and aggregate the metrics.

    Episodes share the campaign but draw independent markets. All episodes
    advance together so the model forward is batched across them; a batch of
    one is bit-identical to the single-episode act/observe loop.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if budget_scale != 1.0:
        cfg = CampaignConfig(budget=cfg.budget * budget_scale,
                             cpa_target=cfg.cpa_target, horizon=cfg.horizon,
                             reward_mode=cfg.reward_mode)
    seeds = [int(s) for s in
             np.random.SeedSequence(seed).generate_state(n_episodes, np.uint64)]
    episodes = [new_episode(cfg, market.with_seed(s)) for s in seeds]
    pacings = [init_pacing(cfg) for _ in episodes]
    dtype = model.config.torch_dtype
    window = model.config.context_steps

    with torch.no_grad():
        for t in range(1, cfg.horizon + 1):
            for p, ep in zip(pacings, episodes):
                p.rtg_hist.append(p.rtg_token)
                p.ctg_hist.append(p.ctg_token)
                p.state_hist.append([float(x) for x in build_state(ep)])
            lo = max(0, t - window)
            rtg = torch.tensor([p.rtg_hist[lo:] for p in pacings], dtype=dtype)
            ctg = torch.tensor([p.ctg_hist[lo:] for p in pacings], dtype=dtype)
            states = torch.tensor([p.state_hist[lo:] for p in pacings], dtype=dtype)
            actions = torch.tensor([p.action_hist[lo:] + [0.0] for p in pacings],
                                   dtype=dtype)
            ts = torch.arange(lo + 1, t + 1).unsqueeze(0).expand(n_episodes, -1)
            policy, _ = model(rtg, ctg, states, actions, ts)
            lams = policy.mu[:, -1].tolist()
            for p, ep, lam in zip(pacings, episodes, lams):
                reward, cost = step(ep, lam)
                p.pending_action = lam
                observe(p, reward, cost)

    reports = [episode_report(ep.running_reward, ep.running_cost, cfg.cpa_target)
               for ep in episodes]
    agg = aggregate_reports(reports, cfg.cpa_target,
                            [ep.running_cost for ep in episodes])
    return agg, reports


def cpa_sensitivity_sweep(model: PolicyModel, market: MarketModel,
                          cfg: CampaignConfig, targets: list[float],
                          n_episodes: int, seed: int = 0) -> list[dict]:
    """Evaluate one checkpoint across ratio targets; only the required-value
    initialization and the scoring target change."""
    rows = []
    for tgt in targets:
        if tgt <= 0:
            raise ValueError("targets must be positive")
        swept = CampaignConfig(budget=cfg.budget, cpa_target=float(tgt),
                               horizon=cfg.horizon, reward_mode=cfg.reward_mode)
        agg, _ = evaluate(model, market, swept, n_episodes, seed=seed)
        rows.append({"target": float(tgt), "value": agg["value_mean"],
                     "ar": agg["ar_mean"], "er": agg["exceed_rate"],
                     "score": agg["score_mean"]})
    return rows
