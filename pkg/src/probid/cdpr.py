"""Constraint-decoupled context construction and Pareto-prioritized sampling.

Two pieces. First, each trajectory gets a dual conditioning stream: the
remaining value still to collect and the remaining cost still allowed, as
suffix sums updated recursively step by step. Second, trajectories are
weighted for batch sampling by the product of three quality scores: distance
to the empirical (cost, return) Pareto frontier, softness of constraint
violation, and relative length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Trajectory

# Quality floor for trajectories with zero collected value (realized ratio is
# infinite there); keeps every trajectory at nonzero sampling support.
ZERO_VALUE_COMPLIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class DualStreamContext:
    """Per-step conditioning tokens: rtg[t] is the reward suffix sum from t,
    ctg[t] the cost suffix sum; both satisfy x[t] = x[t+1] + inc[t] exactly."""

    rtg: np.ndarray
    ctg: np.ndarray


def build_dual_stream(traj: Trajectory) -> DualStreamContext:
    if len(traj) == 0:
        raise ValueError("cannot build context for an empty trajectory")
    rtg = suffix_sums(traj.rewards())
    ctg = suffix_sums(traj.costs())
    return DualStreamContext(rtg=rtg, ctg=ctg)


def suffix_sums(x: np.ndarray) -> np.ndarray:
    """Exact-recursion suffix sums: out[t] = out[t+1] + x[t], out[-1] = x[-1]."""
    out = np.empty_like(x, dtype=np.float64)
    acc = 0.0
    for i in range(len(x) - 1, -1, -1):
        acc = acc + float(x[i])
        out[i] = acc
    return out


@dataclass(frozen=True)
class ObjectivePoint:
    r: float
    c: float
    r_norm: float
    c_norm: float


@dataclass(frozen=True)
class FilterParams:
    kappa: float = 5.0
    omega: float = 2.0
    t_max: int = 48

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass(frozen=True)
class QualityScore:
    s_eff: float
    s_com: float
    s_len: float
    q: float
    prob: float


def normalize_objectives(rewards: np.ndarray, costs: np.ndarray) -> list[ObjectivePoint]:
    """Min-max normalize the (return, cost) cloud to [0, 1]^2. A degenerate
    axis (all values equal) maps to 0 so dominance on the other axis is
    preserved."""
    r = np.asarray(rewards, dtype=np.float64)
    c = np.asarray(costs, dtype=np.float64)

    def mm(x):
        lo, hi = x.min(), x.max()
        if hi == lo:
            return np.zeros_like(x)
        return (x - lo) / (hi - lo)

    rn, cn = mm(r), mm(c)
    return [ObjectivePoint(r=float(r[i]), c=float(c[i]),
                           r_norm=float(rn[i]), c_norm=float(cn[i]))
            for i in range(len(r))]


def pareto_frontier(points: list[ObjectivePoint]) -> set[int]:
    """Indices of non-dominated points: i is dominated iff some j has
    c_norm <= c_i and r_norm >= r_i with at least one strict inequality.
    Exact duplicates never dominate each other and are all retained."""
    if not points:
        raise ValueError("need at least one point")
    n = len(points)
    c = np.array([p.c_norm for p in points])
    r = np.array([p.r_norm for p in points])
    order = np.lexsort((-r, c))  # cost ascending, return descending

    frontier: set[int] = set()
    best_r_strictly_cheaper = -np.inf
    i = 0
    while i < n:
        j = i
        while j < n and c[order[j]] == c[order[i]]:
            j += 1
        group = order[i:j]
        group_max_r = r[group[0]]  # sorted descending within group
        for idx in group:
            # dominated by a strictly cheaper point with >= return, or by an
            # equal-cost point with strictly more return
            if r[idx] <= best_r_strictly_cheaper or r[idx] < group_max_r:
                continue
            frontier.add(int(idx))
        best_r_strictly_cheaper = max(best_r_strictly_cheaper, group_max_r)
        i = j
    return frontier


def efficiency_score(point: ObjectivePoint, frontier_points: list[ObjectivePoint],
                     params: FilterParams) -> float:
    """exp(-kappa * d) where d is the Euclidean distance (normalized
    coordinates) to the nearest frontier member."""
    if not frontier_points:
        raise ValueError("frontier must be nonempty")
    d2 = min((point.r_norm - f.r_norm) ** 2 + (point.c_norm - f.c_norm) ** 2
             for f in frontier_points)
    return float(np.exp(-params.kappa * np.sqrt(d2)))


def compliance_score(ratio: float, target: float, omega: float) -> float:
    """1 when compliant, (target/ratio)^omega when violating; an infinite
    ratio (zero-value trajectory) gets the positive floor."""
    if target <= 0:
        raise ValueError("target must be > 0")
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if not np.isfinite(ratio):
        return ZERO_VALUE_COMPLIANCE_FLOOR
    if ratio <= target:
        return 1.0
    return float((target / ratio) ** omega)


def richness_score(t_i: int, t_max: int) -> float:
    if not (1 <= t_i <= t_max):
        raise ValueError(f"length {t_i} outside [1, {t_max}]")
    return t_i / t_max


def sampling_distribution(trajs: list[Trajectory],
                          params: FilterParams) -> list[QualityScore]:
    """Score every trajectory and normalize the products into a sampling
    distribution. Raises if all products underflow to zero (degenerate
    dataset)."""
    if not trajs:
        raise ValueError("dataset must be nonempty")
    rewards = np.array([t.total_reward for t in trajs])
    costs = np.array([t.total_cost for t in trajs])
    points = normalize_objectives(rewards, costs)
    frontier_idx = pareto_frontier(points)
    frontier_points = [points[i] for i in sorted(frontier_idx)]

    q = np.empty(len(trajs))
    parts = []
    for i, traj in enumerate(trajs):
        s_eff = efficiency_score(points[i], frontier_points, params)
        s_com = compliance_score(traj.realized_ratio, traj.campaign.cpa_target,
                                 params.omega)
        s_len = richness_score(len(traj), params.t_max)
        parts.append((s_eff, s_com, s_len))
        q[i] = s_eff * s_com * s_len

    total = q.sum()
    if total <= 0.0:
        raise ValueError("all quality scores are zero; dataset is degenerate")
    probs = q / total
    return [QualityScore(s_eff=p[0], s_com=p[1], s_len=p[2], q=float(q[i]),
                         prob=float(probs[i]))
            for i, p in enumerate(parts)]


def weighted_batch_sample(scores: list[QualityScore], batch_size: int,
                          rng: np.random.Generator) -> np.ndarray:
    """IID draws with replacement from the quality distribution."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    probs = np.array([s.prob for s in scores], dtype=np.float64)
    probs = probs / probs.sum()  # guard tiny drift for rng.choice
    return rng.choice(len(scores), size=batch_size, replace=True, p=probs)


def pareto_report(trajs: list[Trajectory], params: FilterParams) -> list[dict]:
    """Joined diagnostic rows for the pareto CSV: objective coordinates,
    frontier membership, and all scoring components."""
    rewards = np.array([t.total_reward for t in trajs])
    costs = np.array([t.total_cost for t in trajs])
    points = normalize_objectives(rewards, costs)
    frontier_idx = pareto_frontier(points)
    scores = sampling_distribution(trajs, params)
    rows = []
    for i, (pt, sc) in enumerate(zip(points, scores)):
        rows.append({
            "r": pt.r, "c": pt.c, "r_norm": pt.r_norm, "c_norm": pt.c_norm,
            "on_frontier": int(i in frontier_idx),
            "s_eff": sc.s_eff, "s_com": sc.s_com, "s_len": sc.s_len,
            "q": sc.q, "prob": sc.prob,
        })
    return rows
