"""Training: likelihood anchoring, outcome prediction, and counterfactual
regret-weighted regression.

Every update samples a batch of logged trajectories (quality-weighted unless
ablated), augments them with the dual conditioning streams, and minimizes

    total = nll + alpha * regret + beta * pred - eta * entropy

The regret term samples candidate actions from the current policy, scores
each with the outcome predictor folded into a full-episode constraint-aware
utility, and pulls the policy mean toward candidates that beat the utility of
the mean itself. Candidate actions and their weights are constants in the
backward pass; only the mean path carries gradient.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .cdpr import FilterParams, sampling_distribution, suffix_sums, weighted_batch_sample
from .core import STATE_DIM, CampaignConfig, Trajectory
from .model import (ModelConfig, PolicyModel, PredictorOutput, compute_norm_stats,
                    entropy, masked_step_mean, nll_loss, save_checkpoint)

TRAIN_MODES = ("full", "no-cdpr", "no-cro", "plain-dt")

METRICS_COLUMNS = ("step", "nll", "regret", "pred", "entropy", "total",
                   "frac_positive_regret", "eval_score", "eval_ar", "eval_er",
                   "eval_value")


@dataclass(frozen=True)
class CroParams:
    gamma_u: float = 2.0    # utility penalty exponent
    tau: float = 0.0        # Boltzmann temperature; <= 0 means auto
    k: int = 8              # counterfactual candidates per step
    eps: float = 1e-8       # ratio / weight stabilizer
    alpha: float = 1.0      # regret coefficient
    beta: float = 1.0       # predictor coefficient
    eta: float = 0.01       # entropy coefficient
    detach_predictor: bool = False

    def __post_init__(self):
        if self.gamma_u < 1:
            raise ValueError("gamma_u must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" decays to 5% of peak; or "constant"
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0      # 0 disables in-training evaluation
    eval_episodes: int = 16
    compile: bool = True     # fuse the hot paths with torch.compile (float32 only)

    def __post_init__(self):
        if self.max_steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainingData:
    """Trajectories flattened into padded arrays for cheap batch assembly."""

    rtg: np.ndarray        # (N, T) reward suffix sums
    ctg: np.ndarray        # (N, T) cost suffix sums
    states: np.ndarray     # (N, T, 16)
    actions: np.ndarray    # (N, T)
    target_r: np.ndarray   # (N, T) reward suffix sums excluding the step
    target_c: np.ndarray   # (N, T)
    prefix_r: np.ndarray   # (N, T) reward accumulated before the step
    prefix_c: np.ndarray   # (N, T)
    lengths: np.ndarray    # (N,)
    rho_tgt: np.ndarray    # (N,) per-campaign efficiency targets
    mean_total_reward: float


def prepare_training_data(trajs: list[Trajectory], horizon: int) -> TrainingData:
    n = len(trajs)
    shape = (n, horizon)
    data = TrainingData(
        rtg=np.zeros(shape), ctg=np.zeros(shape),
        states=np.zeros((n, horizon, STATE_DIM)), actions=np.zeros(shape),
        target_r=np.zeros(shape), target_c=np.zeros(shape),
        prefix_r=np.zeros(shape), prefix_c=np.zeros(shape),
        lengths=np.zeros(n, dtype=np.int64), rho_tgt=np.zeros(n),
        mean_total_reward=float(np.mean([t.total_reward for t in trajs])))
    for i, traj in enumerate(trajs):
        L = len(traj)
        r, c = traj.rewards(), traj.costs()
        rtg, ctg = suffix_sums(r), suffix_sums(c)
        data.rtg[i, :L] = rtg
        data.ctg[i, :L] = ctg
        data.states[i, :L] = traj.states()
        data.actions[i, :L] = traj.actions()
        data.target_r[i, :L - 1] = rtg[1:]
        data.target_c[i, :L - 1] = ctg[1:]
        data.prefix_r[i, 1:L] = np.cumsum(r)[:-1]
        data.prefix_c[i, 1:L] = np.cumsum(c)[:-1]
        data.lengths[i] = L
        data.rho_tgt[i] = traj.campaign.cpa_target
    return data


# -- loss pieces -----------------------------------------------------------

def predictor_loss(pred: PredictorOutput, target_r: torch.Tensor,
                   target_c: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error on standardized future-outcome targets."""
    per = (pred.r_hat - target_r) ** 2 + (pred.c_hat - target_c) ** 2
    return masked_step_mean(per, mask)


def utility(r_hat_raw: torch.Tensor, c_hat_raw: torch.Tensor,
            prefix_r: torch.Tensor, prefix_c: torch.Tensor,
            rho_tgt: torch.Tensor, params: CroParams) -> torch.Tensor:
    """Full-episode constraint-aware utility in raw units.

    Combines realized history with predicted remainder, then multiplies total
    value by a penalty that decays once the projected cost/value ratio passes
    the target. Nonpositive ratios (no projected spend) count as compliant.
    """
    r_total = prefix_r + torch.clamp(r_hat_raw, min=0.0)
    c_total = prefix_c + c_hat_raw
    rho = c_total / (r_total + params.eps)
    # rho == 0 divides to +inf and the cap takes over; rho < 0 is rewritten
    penalty = torch.clamp((rho_tgt / rho.clamp(min=0.0)) ** params.gamma_u, max=1.0)
    penalty = torch.where(rho <= 0.0, torch.ones_like(penalty), penalty)
    return penalty * r_total


def regret_weights(u_cand: torch.Tensor, u_base: torch.Tensor, tau: float,
                   eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Boltzmann weights over positive utility gains, per step.

    Weights sum to slightly under 1 where any candidate improves on the
    baseline and to exactly 0 where none does. The max gain is subtracted
    before exponentiation, so the stabilizer acts on the shifted scale.
    Returns (weights, gains).
    """
    delta = torch.clamp(u_cand - u_base.unsqueeze(-1), min=0.0)
    pos = delta > 0.0
    shift = delta.amax(dim=-1, keepdim=True)
    e = torch.exp((delta - shift) / tau) * pos
    return e / (e.sum(dim=-1, keepdim=True) + eps), delta


def regret_loss(mu: torch.Tensor, candidates: torch.Tensor,
                weights: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Weighted pull of the policy mean toward counterfactual targets.

    `candidates` and `weights` are treated as constants; gradient reaches
    only `mu`.
    """
    per = (weights.detach() * (mu.unsqueeze(-1) - candidates.detach()) ** 2).sum(-1)
    return masked_step_mean(per, mask)


def counterfactual_pass(model: PolicyModel, batch: dict, mu: torch.Tensor,
                        sigma: torch.Tensor, cache: dict, cro: CroParams,
                        tau: float, rng: np.random.Generator,
                        predict_fn=None):
    """Sample candidate actions, score them against the policy-mean baseline
    with the outcome predictor, and build the regret regression loss."""
    B, T = mu.shape
    K = cro.k
    lam_max = model.action_bound
    mask = batch["mask"]
    if predict_fn is None:
        predict_fn = model.predict_for_actions

    with torch.no_grad():
        mu_d, sigma_d = mu.detach(), sigma.detach()
        noise = torch.from_numpy(
            rng.standard_normal((B, T, K))).to(mu_d.dtype)
        cand = torch.clamp(mu_d.unsqueeze(-1) + sigma_d.unsqueeze(-1) * noise,
                           min=0.0, max=lam_max)
        probe = torch.cat([cand, mu_d.unsqueeze(-1)], dim=-1)  # baseline last
        pred = predict_fn(cache, probe)
        r_raw, c_raw = model.destd_pred(pred.r_hat, pred.c_hat)
        u = utility(r_raw, c_raw, batch["prefix_r"].unsqueeze(-1),
                    batch["prefix_c"].unsqueeze(-1),
                    batch["rho_tgt"].view(B, 1, 1), cro)
        w, delta = regret_weights(u[..., :K], u[..., K], tau, cro.eps)
        w = w * mask.unsqueeze(-1)

        valid = max(float(mask.sum()), 1.0)
        any_pos = ((delta > 0).any(dim=-1) & (mask > 0)).sum()
        diagnostics = {
            "frac_positive_regret": float(any_pos) / valid,
            "mean_delta": float(delta.sum()) / (valid * K),
        }
    loss = regret_loss(mu, cand, w, mask)
    return loss, diagnostics


# -- batch assembly ----------------------------------------------------------

def _gather_batch(data: TrainingData, idx: np.ndarray, window: int,
                  rng: np.random.Generator, dtype: torch.dtype,
                  zero_ctg: bool) -> dict:
    """Slice random context windows out of the padded trajectory arrays.

    Positions past a trajectory's end repeat its last step and are masked
    out of every loss.
    """
    idx = np.asarray(idx)
    lengths = data.lengths[idx]
    max_start = np.maximum(lengths - window, 0)
    starts = rng.integers(0, max_start + 1)
    pos = starts[:, None] + np.arange(window)[None, :]          # (B, W)
    mask_np = pos < lengths[:, None]
    pos = np.minimum(pos, lengths[:, None] - 1)
    rows = idx[:, None]

    def t(x):
        return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)

    ctg = data.ctg[rows, pos]
    return {
        "rtg": t(data.rtg[rows, pos]),
        "ctg": t(np.zeros_like(ctg) if zero_ctg else ctg),
        "states": t(data.states[rows, pos]),
        "actions": t(data.actions[rows, pos]),
        "target_r": t(data.target_r[rows, pos]),
        "target_c": t(data.target_c[rows, pos]),
        "prefix_r": t(data.prefix_r[rows, pos]),
        "prefix_c": t(data.prefix_c[rows, pos]),
        "timesteps": torch.from_numpy(pos + 1),
        "mask": t(mask_np.astype(np.float64)),
        "rho_tgt": t(data.rho_tgt[idx]),
    }


# -- the training loop -------------------------------------------------------

class NonFiniteLossError(RuntimeError):
    pass


def _check_finite(terms: dict[str, torch.Tensor], step: int) -> None:
    bad = [name for name, v in terms.items() if not torch.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms at step {step}: {bad}")


def train(trajs: list[Trajectory], model_cfg: ModelConfig, fparams: FilterParams,
          cro: CroParams, tcfg: TrainConfig, *, mode: str = "full",
          eval_market=None, eval_campaign: CampaignConfig | None = None,
          out_dir: str | Path | None = None,
          log_every: int = 1) -> tuple[PolicyModel, list[dict]]:
    """Run the training procedure; returns the model and the metrics rows.

    Modes: "full" (quality-weighted sampling, dual streams, all loss terms),
    "no-cdpr" (uniform sampling, blanked cost stream, all loss terms),
    "no-cro" (quality-weighted, dual streams, no regret term),
    "plain-dt" (uniform sampling, blanked cost stream, plain squared error
    on a deterministic head).
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if not trajs:
        raise ValueError("dataset must be nonempty")

    horizon = trajs[0].campaign.horizon
    data = prepare_training_data(trajs, horizon)

    # action bound from the data's action range, then the sigma band from it
    if model_cfg.action_bound <= 0:
        lam_max = float(max(data.actions.max(), 1e-6))
        model_cfg = replace(model_cfg, action_bound=lam_max,
                            sigma_floor=1e-3 * lam_max, sigma_cap=0.5 * lam_max)

    torch.manual_seed(tcfg.seed)
    model = PolicyModel(model_cfg)
    valid = data.lengths[:, None] > np.arange(horizon)[None, :]
    stats = compute_norm_stats(data.rtg[valid], data.ctg[valid],
                               data.actions[valid], data.states[valid])
    model.set_normalization(stats)

    zero_ctg = mode in ("no-cdpr", "plain-dt")
    model.set_zero_ctg(zero_ctg)
    use_cdpr_sampling = mode in ("full", "no-cro")
    use_cro = mode in ("full", "no-cdpr") and cro.alpha != 0.0
    plain_dt = mode == "plain-dt"

    if use_cdpr_sampling:
        scores = sampling_distribution(trajs, fparams)
    else:
        scores = None
    tau = cro.tau if cro.tau > 0 else 0.1 * max(data.mean_total_reward, 1e-8)

    optimizer = torch.optim.AdamW(model.parameters(), lr=tcfg.learning_rate,
                                  weight_decay=tcfg.weight_decay, foreach=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([tcfg.seed, 1])))
    rows: list[dict] = []

    use_compile = (tcfg.compile and model_cfg.dtype == "float32"
                   and os.environ.get("PROBID_NO_COMPILE") != "1")
    if use_compile:
        run_model = torch.compile(model)
        predict_fn = torch.compile(model.predict_for_actions)
    else:
        run_model = model
        predict_fn = model.predict_for_actions

    def run_eval(model):
        from .evaluation import evaluate  # local import; evaluation has no training dep
        agg, _ = evaluate(model, eval_market, eval_campaign,
                          n_episodes=tcfg.eval_episodes,
                          seed=np.random.SeedSequence([tcfg.seed, 0xE7A1]).generate_state(1)[0])
        return agg

    for step_i in range(1, tcfg.max_steps + 1):
        if scores is not None:
            idx = weighted_batch_sample(scores, tcfg.batch_size, rng)
        else:
            idx = rng.integers(0, len(trajs), size=tcfg.batch_size)
        batch = _gather_batch(data, idx, min(horizon, model_cfg.context_steps),
                              rng, model_cfg.torch_dtype, zero_ctg)

        fwd = run_model(batch["rtg"], batch["ctg"], batch["states"], batch["actions"],
                        batch["timesteps"], detach_predictor=cro.detach_predictor,
                        want_cache=use_cro)
        if use_cro:
            policy, pred, cache = fwd
        else:
            policy, pred = fwd
            cache = None

        mask = batch["mask"]
        if plain_dt:
            mse = masked_step_mean((batch["actions"] - policy.mu) ** 2, mask)
            terms = {"nll": mse, "regret": torch.zeros(()), "pred": torch.zeros(()),
                     "entropy": torch.zeros(()), "total": mse}
            diag = {"frac_positive_regret": 0.0}
        else:
            t_r, t_c = model.std_pred_targets(batch["target_r"], batch["target_c"])
            nll = nll_loss(policy, batch["actions"], mask)
            ent = entropy(policy, mask)
            pred_l = predictor_loss(pred, t_r, t_c, mask)
            if use_cro:
                reg, diag = counterfactual_pass(model, batch, policy.mu, policy.sigma,
                                                cache, cro, tau, rng,
                                                predict_fn=predict_fn)
            else:
                reg, diag = torch.zeros(()), {"frac_positive_regret": 0.0}
            total = nll + cro.alpha * reg + cro.beta * pred_l - cro.eta * ent
            terms = {"nll": nll, "regret": reg, "pred": pred_l, "entropy": ent,
                     "total": total}
        _check_finite(terms, step_i)

        optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        if tcfg.lr_schedule == "cosine":
            frac = 0.5 * (1.0 + math.cos(math.pi * step_i / tcfg.max_steps))
            lr = tcfg.learning_rate * (0.05 + 0.95 * frac)
            for group in optimizer.param_groups:
                group["lr"] = lr
        optimizer.step()

        row = {"step": step_i,
               **{k: float(v.detach()) for k, v in terms.items()},
               "frac_positive_regret": diag["frac_positive_regret"],
               "eval_score": "", "eval_ar": "", "eval_er": "", "eval_value": ""}
        if (tcfg.eval_every and eval_market is not None
                and step_i % tcfg.eval_every == 0):
            agg = run_eval(model)
            row.update(eval_score=agg["score_mean"], eval_ar=agg["ar_mean"],
                       eval_er=agg["exceed_rate"], eval_value=agg["value_mean"])
        if step_i % log_every == 0 or step_i == tcfg.max_steps:
            rows.append(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "model.ckpt")
        write_metrics(rows, out_dir / "metrics.csv")
    return model, rows


def train_dt_ablation(trajs, model_cfg, fparams, cro, tcfg, **kwargs):
    """Single-stream baseline: blanked cost tokens, deterministic head,
    squared-error objective, uniform sampling."""
    return train(trajs, model_cfg, fparams, cro, tcfg, mode="plain-dt", **kwargs)


def write_metrics(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
