"""Offline log generation and trajectory persistence.

Behavior logs come from a mixture of hand-rolled policies (noisy constants,
a proportional pacer, a random walk) run through the auction simulator with
per-trajectory seeds, so regenerating with the same seed range reproduces the
file byte for byte. Storage is one JSON trajectory per line plus a separate
JSON manifest summarizing the objective-space cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .auction import MarketModel, run_episode
from .core import CampaignConfig, Step, Trajectory, make_trajectory, validate_trajectory

SCHEMA_VERSION = 1
GENERATOR_VERSION = "probid-datagen-1"

POLICY_KINDS = ("constant_lambda", "noisy_pid_pacer", "random_walk_lambda")


@dataclass(frozen=True)
class BehaviorPolicy:
    """A logging policy. `params` are kind-specific:

    constant_lambda:    {"lam": base multiplier}
    noisy_pid_pacer:    {"lam": base, "gain": proportional gain on the
                         deviation of spend from uniform pacing}
    random_walk_lambda: {"lam": start, "walk_scale": per-step drift std}

    Every kind adds N(0, noise_scale) jitter to the emitted multiplier and
    clamps at zero.
    """

    kind: str
    params: dict = field(default_factory=dict)
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if "lam" not in self.params or self.params["lam"] < 0:
            raise ValueError(f"{self.kind} requires nonnegative 'lam' parameter")
        if self.kind == "noisy_pid_pacer" and self.params.get("gain", 0.0) < 0:
            raise ValueError("noisy_pid_pacer requires nonnegative 'gain'")
        if self.kind == "random_walk_lambda" and self.params.get("walk_scale", 0.0) < 0:
            raise ValueError("random_walk_lambda requires nonnegative 'walk_scale'")


def _make_policy_fn(policy: BehaviorPolicy, cfg: CampaignConfig,
                    rng: np.random.Generator):
    lam0 = float(policy.params["lam"])
    if policy.kind == "constant_lambda":
        def fn(state, ep):
            return max(0.0, lam0 + rng.normal(0.0, policy.noise_scale))
    elif policy.kind == "noisy_pid_pacer":
        gain = float(policy.params.get("gain", 1.0))

        def fn(state, ep):
            # positive error: behind uniform pacing plan -> bid harder
            planned = cfg.budget * (ep.t - 1) / cfg.horizon
            err = (planned - ep.running_cost) / cfg.budget
            lam = lam0 * (1.0 + gain * err) + rng.normal(0.0, policy.noise_scale)
            return max(0.0, lam)
    else:  # random_walk_lambda
        walk = float(policy.params.get("walk_scale", 0.1))
        cur = {"lam": lam0}

        def fn(state, ep):
            cur["lam"] = max(0.0, cur["lam"] + rng.normal(0.0, walk))
            return max(0.0, cur["lam"] + rng.normal(0.0, policy.noise_scale))
    return fn


@dataclass(frozen=True)
class DatasetManifest:
    count: int
    horizon: int
    reward_mode: str
    seed_base: int
    seed_min: int
    seed_max: int
    generator_version: str
    total_rewards: tuple[float, ...]
    total_costs: tuple[float, ...]
    ratios: tuple[float, ...]  # inf serialized as null

    def summary(self) -> dict:
        finite = [r for r in self.ratios if np.isfinite(r)]
        return {
            "count": self.count,
            "reward_mean": float(np.mean(self.total_rewards)),
            "cost_mean": float(np.mean(self.total_costs)),
            "ratio_min": min(finite) if finite else None,
            "ratio_max": max(finite) if finite else None,
        }


def generate_dataset(n: int, market: MarketModel, cfg: CampaignConfig,
                     mixture: list[tuple[BehaviorPolicy, float]],
                     seed_base: int = 0,
                     cpa_range: tuple[float, float] | None = None,
                     budget_range: tuple[float, float] | None = None,
                     early_stop_prob: float = 0.0) -> list[Trajectory]:
    """Generate `n` behavior trajectories.

    Per-trajectory campaign targets (and optionally budgets) are sampled
    within the given ranges so the logs cover a spread of constraint
    tightness; `early_stop_prob` geometrically truncates some episodes so
    trajectory lengths vary.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not mixture or any(w <= 0 for _, w in mixture):
        raise ValueError("mixture must be nonempty with positive weights")
    if not (0.0 <= early_stop_prob < 1.0):
        raise ValueError("early_stop_prob must be in [0, 1)")

    weights = np.array([w for _, w in mixture], dtype=np.float64)
    weights /= weights.sum()
    assign_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed_base, 0xA551])))
    assignments = assign_rng.choice(len(mixture), size=n, p=weights)

    trajs = []
    for i in range(n):
        ss = np.random.SeedSequence([seed_base, i])
        market_seed, policy_seed = ss.generate_state(2)
        traj_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed_base, i, 0xB0B])))

        cpa = cfg.cpa_target
        if cpa_range is not None:
            cpa = float(traj_rng.uniform(*cpa_range))
        budget = cfg.budget
        if budget_range is not None:
            budget = float(traj_rng.uniform(*budget_range))
        campaign = CampaignConfig(budget=budget, cpa_target=cpa,
                                  horizon=cfg.horizon, reward_mode=cfg.reward_mode)

        n_steps = cfg.horizon
        if early_stop_prob > 0.0:
            n_steps = min(cfg.horizon, int(traj_rng.geometric(early_stop_prob)))

        policy = mixture[assignments[i]][0]
        policy_rng = np.random.Generator(np.random.PCG64(int(policy_seed)))
        fn = _make_policy_fn(policy, campaign, policy_rng)
        traj = run_episode(fn, campaign, market.with_seed(int(market_seed)),
                           n_steps=n_steps)
        trajs.append(traj)
    return trajs


def build_manifest(trajs: list[Trajectory], seed_base: int) -> DatasetManifest:
    return DatasetManifest(
        count=len(trajs),
        horizon=trajs[0].campaign.horizon,
        reward_mode=trajs[0].campaign.reward_mode,
        seed_base=seed_base,
        seed_min=seed_base,
        seed_max=seed_base + len(trajs) - 1,
        generator_version=GENERATOR_VERSION,
        total_rewards=tuple(t.total_reward for t in trajs),
        total_costs=tuple(t.total_cost for t in trajs),
        ratios=tuple(t.realized_ratio for t in trajs),
    )


def _traj_to_record(traj: Trajectory) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "campaign": {
            "budget": traj.campaign.budget,
            "cpa_target": traj.campaign.cpa_target,
            "horizon": traj.campaign.horizon,
            "reward_mode": traj.campaign.reward_mode,
        },
        "steps": [
            {"t": s.index, "state": list(s.state), "action": s.action,
             "reward": s.reward, "cost": s.cost}
            for s in traj.steps
        ],
    }


def _record_to_traj(rec: dict) -> Trajectory:
    if rec.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported trajectory schema version {rec.get('version')}")
    c = rec["campaign"]
    campaign = CampaignConfig(budget=c["budget"], cpa_target=c["cpa_target"],
                              horizon=c["horizon"], reward_mode=c["reward_mode"])
    steps = [Step(index=s["t"], state=tuple(s["state"]), action=s["action"],
                  reward=s["reward"], cost=s["cost"]) for s in rec["steps"]]
    return make_trajectory(campaign, steps)


def save_dataset(trajs: list[Trajectory], path: str | Path) -> None:
    """One compact JSON object per line; floats use Python's shortest
    round-trip repr, so save -> load -> save is byte-identical."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for traj in trajs:
            f.write(json.dumps(_traj_to_record(traj), separators=(",", ":")))
            f.write("\n")


def load_dataset(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    trajs = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed trajectory record: {e}") from e
            traj = _record_to_traj(rec)
            result = validate_trajectory(traj)
            if not result:
                raise ValueError(f"{path}:{lineno}: invalid trajectory: {result.violations}")
            trajs.append(traj)
    return trajs


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    rec = {
        "count": manifest.count,
        "horizon": manifest.horizon,
        "reward_mode": manifest.reward_mode,
        "seed_base": manifest.seed_base,
        "seed_range": [manifest.seed_min, manifest.seed_max],
        "generator_version": manifest.generator_version,
        "trajectories": [
            {"total_reward": r, "total_cost": c,
             "ratio": rt if np.isfinite(rt) else None}
            for r, c, rt in zip(manifest.total_rewards, manifest.total_costs,
                                manifest.ratios)
        ],
    }
    Path(path).write_text(json.dumps(rec, indent=1) + "\n", encoding="utf-8")


def inject_noise_trajectories(trajs: list[Trajectory], fraction: float,
                              market: MarketModel, seed: int = 0) -> list[Trajectory]:
    """Replace floor(fraction * n) trajectories with deliberately inefficient
    ones: a high-noise random walk run in the same market (same per-slot
    market seed as the trajectory it replaces)."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must be in [0, 1]")
    n = len(trajs)
    m = int(np.floor(fraction * n))
    if m == 0:
        return list(trajs)
    pick_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 0x401])))
    replaced = set(pick_rng.choice(n, size=m, replace=False).tolist())

    noisy = BehaviorPolicy(kind="random_walk_lambda",
                           params={"lam": 0.8, "walk_scale": 0.35},
                           noise_scale=0.25)
    out = []
    for i, traj in enumerate(trajs):
        if i not in replaced:
            out.append(traj)
            continue
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, i, 0x70AD])))
        fn = _make_policy_fn(noisy, traj.campaign, rng)
        out.append(run_episode(fn, traj.campaign,
                               market.with_seed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0])),
                               n_steps=len(traj.steps)))
    return out
