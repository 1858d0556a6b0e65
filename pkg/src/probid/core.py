"""Shared domain records and the exact allocation oracle.

Everything downstream (simulator, dataset, training, evaluation) is expressed
in terms of these types. The allocation solvers exist as ground truth for the
selection problem the bidding policy is implicitly solving: pick a subset of
impressions maximizing value under a budget cap and a cost/conversion ratio
cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STATE_DIM = 16

# Exhaustive search above this instance size is not worth anyone's time.
EXACT_SOLVER_MAX_ITEMS = 24


@dataclass(frozen=True)
class Impression:
    """One auction opportunity: predicted conversion value, clearing price,
    and a pre-sampled uniform draw used to realize sparse conversions."""

    value: float
    least_winning_cost: float
    conversion_draw: float

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"impression value {self.value} outside [0, 1]")
        if self.least_winning_cost < 0.0:
            raise ValueError("least_winning_cost must be >= 0")
        if not (0.0 <= self.conversion_draw <= 1.0):
            raise ValueError("conversion_draw must be in [0, 1]")


@dataclass(frozen=True)
class CampaignConfig:
    budget: float
    cpa_target: float
    horizon: int
    reward_mode: str = "dense"  # "dense" | "sparse"

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.cpa_target <= 0:
            raise ValueError("cpa_target must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.reward_mode not in ("dense", "sparse"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")


@dataclass(frozen=True)
class Step:
    index: int  # 1-based step number within the episode
    state: tuple[float, ...]
    action: float
    reward: float
    cost: float


@dataclass(frozen=True)
class Trajectory:
    campaign: CampaignConfig
    steps: tuple[Step, ...]
    total_reward: float
    total_cost: float

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def realized_ratio(self) -> float:
        """Realized cost-per-unit-value; inf when no value was obtained."""
        if self.total_reward <= 0.0:
            return float("inf")
        return self.total_cost / self.total_reward

    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=np.float64)

    def costs(self) -> np.ndarray:
        return np.array([s.cost for s in self.steps], dtype=np.float64)

    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.float64)

    def states(self) -> np.ndarray:
        return np.array([s.state for s in self.steps], dtype=np.float64)


def make_trajectory(campaign: CampaignConfig, steps: Sequence[Step]) -> Trajectory:
    """Build a Trajectory with totals accumulated in step order (float64)."""
    total_r = 0.0
    total_c = 0.0
    for s in steps:
        total_r += s.reward
        total_c += s.cost
    return Trajectory(campaign=campaign, steps=tuple(steps),
                      total_reward=total_r, total_cost=total_c)


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    violations: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate_trajectory(traj: Trajectory) -> ValidationResult:
    """Check every structural invariant; violations are data, not faults.

    The budget check is cumulative in step order (same accumulation the
    simulator enforces), so a trajectory the simulator produced can never
    fail it by vagaries of float re-association.
    """
    v: list[str] = []
    T = traj.campaign.horizon
    if len(traj.steps) == 0:
        v.append("empty trajectory")
    if len(traj.steps) > T:
        v.append(f"length {len(traj.steps)} exceeds horizon {T}")

    running_cost = 0.0
    running_reward = 0.0
    for i, s in enumerate(traj.steps):
        if s.index != i + 1:
            v.append(f"step {i}: index {s.index}, expected {i + 1}")
        if len(s.state) != STATE_DIM:
            v.append(f"step {i}: state has {len(s.state)} features, expected {STATE_DIM}")
        if s.action < 0:
            v.append(f"step {i}: negative action {s.action}")
        if s.reward < 0:
            v.append(f"step {i}: negative reward {s.reward}")
        if s.cost < 0:
            v.append(f"step {i}: negative cost {s.cost}")
        running_reward += s.reward
        running_cost += s.cost
        if running_cost > traj.campaign.budget:
            v.append(f"step {i}: budget exceeded ({running_cost} > {traj.campaign.budget})")
    if traj.steps and running_reward != traj.total_reward:
        v.append(f"total_reward {traj.total_reward} != step sum {running_reward}")
    if traj.steps and running_cost != traj.total_cost:
        v.append(f"total_cost {traj.total_cost} != step sum {running_cost}")
    return ValidationResult(ok=not v, violations=tuple(v))


@dataclass(frozen=True)
class AllocationInstance:
    """Offline selection problem: impressions (value, cost, conversion),
    a budget cap, and a ratio cap cost <= ratio_cap * conversions."""

    values: tuple[float, ...]
    costs: tuple[float, ...]
    conversions: tuple[float, ...]
    budget: float
    ratio_cap: float

    def __post_init__(self):
        n = len(self.values)
        if n < 1:
            raise ValueError("instance must contain at least one impression")
        if not (len(self.costs) == len(self.conversions) == n):
            raise ValueError("values/costs/conversions length mismatch")
        if any(x < 0 for x in self.values + self.costs + self.conversions):
            raise ValueError("all entries must be nonnegative")
        if self.budget < 0 or self.ratio_cap < 0:
            raise ValueError("budget and ratio_cap must be nonnegative")

    def __len__(self) -> int:
        return len(self.values)


class InstanceTooLargeError(ValueError):
    pass


def _lex_keys(masks: np.ndarray, n: int) -> np.ndarray:
    """Numeric key whose order equals lexicographic order on (x_1..x_n)."""
    keys = np.zeros(len(masks), dtype=np.uint64)
    for i in range(n):
        keys |= (((masks >> np.uint32(i)) & 1).astype(np.uint64)
                 << np.uint64(n - 1 - i))
    return keys


def solve_allocation_exact(inst: AllocationInstance) -> tuple[tuple[int, ...], float]:
    """Enumerate all 2^n selections; return the feasible max-value one.

    Ties broken by lexicographically smallest bit-vector (x_1 first). The
    empty selection is always feasible, so a solution always exists.
    Enumeration is chunked to keep memory flat for n near the limit.
    """
    n = len(inst)
    if n > EXACT_SOLVER_MAX_ITEMS:
        raise InstanceTooLargeError(f"{n} impressions > limit {EXACT_SOLVER_MAX_ITEMS}")

    v = np.asarray(inst.values, dtype=np.float64)
    c = np.asarray(inst.costs, dtype=np.float64)
    p = np.asarray(inst.conversions, dtype=np.float64)
    shifts = np.arange(n, dtype=np.uint32)

    best_value = 0.0  # empty selection
    best_mask = 0
    best_key = 0  # lex key of the empty selection
    chunk = 1 << 18
    for start in range(0, 1 << n, chunk):
        masks = np.arange(start, min(start + chunk, 1 << n), dtype=np.uint32)
        bits = ((masks[:, None] >> shifts) & 1).astype(np.float64)
        cost = bits @ c
        feasible = (cost <= inst.budget) & (cost <= inst.ratio_cap * (bits @ p))
        if not feasible.any():
            continue
        values = bits @ v
        values[~feasible] = -np.inf
        top = values.max()
        if top < best_value:
            continue
        cand = np.flatnonzero(values == top)
        keys = _lex_keys(masks[cand], n)
        j = int(np.argmin(keys))
        if top > best_value or int(keys[j]) < best_key:
            best_value = float(top)
            best_mask = int(masks[cand[j]])
            best_key = int(keys[j])
    selection = tuple(int((best_mask >> i) & 1) for i in range(n))
    return selection, best_value


def solve_allocation_greedy(inst: AllocationInstance) -> tuple[tuple[int, ...], float]:
    """Value-per-cost greedy heuristic; zero-cost items first, infeasible
    items skipped (not a stopping condition). Always returns a feasible
    selection, never better than the exact solver."""
    n = len(inst)
    v = np.asarray(inst.values, dtype=np.float64)
    c = np.asarray(inst.costs, dtype=np.float64)
    p = np.asarray(inst.conversions, dtype=np.float64)

    def sort_key(i: int):
        if c[i] == 0.0:
            return (0, -float(v[i]), i)
        return (1, -(float(v[i]) / float(c[i])), i)

    order = sorted(range(n), key=sort_key)
    taken = np.zeros(n, dtype=np.float64)
    cost = conv = value = 0.0
    for i in order:
        new_cost = cost + c[i]
        new_conv = conv + p[i]
        if new_cost <= inst.budget and new_cost <= inst.ratio_cap * new_conv:
            taken[i] = 1.0
            cost, conv, value = new_cost, new_conv, value + v[i]
    return tuple(int(x) for x in taken), float(value)
