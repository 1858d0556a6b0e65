"""Multi-run experiment recipes: ablation grid, noise robustness, and the
counterfactual-count sweep. Shared by the CLI, the scripts, and the test
suite so each surface exercises identical code."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .core import Trajectory
from .dataset import generate_dataset, inject_noise_trajectories
from .evaluation import episode_report, evaluate
from .training import CroParams, TrainConfig, train
from dataclasses import replace


def build_dataset(cfg: ExperimentConfig, seed: int | None = None,
                  noise_fraction: float | None = None) -> list[Trajectory]:
    seed = cfg.seed if seed is None else seed
    d = cfg.dataset
    cpa_range = (d.cpa_min, d.cpa_max) if d.cpa_max > 0 else None
    budget_range = (d.budget_min, d.budget_max) if d.budget_max > 0 else None
    trajs = generate_dataset(d.n_trajectories, cfg.market, cfg.campaign,
                             list(d.mixture), seed_base=seed,
                             cpa_range=cpa_range, budget_range=budget_range,
                             early_stop_prob=d.early_stop_prob)
    fraction = d.noise_fraction if noise_fraction is None else noise_fraction
    if fraction > 0:
        trajs = inject_noise_trajectories(trajs, fraction, cfg.market,
                                          seed=seed + 7_777)
    return trajs


def dataset_mean_score(trajs: list[Trajectory]) -> float:
    """Mean Score of the behavior data, each trajectory judged against its
    own campaign target."""
    reports = [episode_report(t.total_reward, t.total_cost, t.campaign.cpa_target)
               for t in trajs]
    return float(np.mean([r.score for r in reports]))


def train_and_eval(cfg: ExperimentConfig, trajs: list[Trajectory], mode: str,
                   seed: int, out_dir: str | Path | None = None) -> dict:
    tcfg = replace(cfg.train, seed=seed)
    model, _ = train(trajs, cfg.model, cfg.filter, cfg.cro, tcfg, mode=mode,
                     eval_market=cfg.market, eval_campaign=cfg.campaign,
                     out_dir=out_dir)
    agg, _ = evaluate(model, cfg.market, cfg.campaign,
                      n_episodes=cfg.eval.n_episodes,
                      seed=cfg.eval.seed + seed)
    return agg


ABLATION_MODES = ("full", "plain-dt", "no-cdpr", "no-cro")


def run_ablation_study(cfg: ExperimentConfig, seeds: list[int],
                       out_path: str | Path | None = None,
                       modes: tuple[str, ...] = ABLATION_MODES) -> dict:
    """Train every variant on per-seed datasets and evaluate closed loop.

    Returns seed-averaged metrics per mode plus the behavior-data mean score,
    and writes one CSV row per (seed, mode) when a path is given.
    """
    rows = []
    dataset_scores = []
    t0 = time.time()
    for seed in seeds:
        trajs = build_dataset(cfg, seed=cfg.seed + seed)
        dataset_scores.append(dataset_mean_score(trajs))
        for mode in modes:
            agg = train_and_eval(cfg, trajs, mode, seed)
            rows.append({"seed": seed, "mode": mode, **_metric_cols(agg)})
    summary = {
        "dataset_score_mean": float(np.mean(dataset_scores)),
        "elapsed_seconds": time.time() - t0,
        "modes": {mode: _seed_means(rows, mode) for mode in modes},
    }
    if out_path is not None:
        _write_rows(rows, out_path,
                    ("seed", "mode", "value", "ar", "er", "score"))
    return summary


def run_noise_study(cfg: ExperimentConfig, seeds: list[int],
                    fractions: tuple[float, ...] = (0.0, 0.25, 0.5),
                    out_path: str | Path | None = None,
                    modes: tuple[str, ...] = ("full", "plain-dt")) -> dict:
    """Retrain on datasets with an increasing share of junk trajectories."""
    rows = []
    for seed in seeds:
        clean = build_dataset(cfg, seed=cfg.seed + seed, noise_fraction=0.0)
        for fraction in fractions:
            if fraction > 0:
                trajs = inject_noise_trajectories(clean, fraction, cfg.market,
                                                  seed=cfg.seed + seed + 7_777)
            else:
                trajs = clean
            for mode in modes:
                agg = train_and_eval(cfg, trajs, mode, seed)
                rows.append({"seed": seed, "mode": mode, "noise_fraction": fraction,
                             **_metric_cols(agg)})
    summary = {}
    for mode in modes:
        by_fraction = {}
        for fraction in fractions:
            sel = [r["score"] for r in rows
                   if r["mode"] == mode and r["noise_fraction"] == fraction]
            by_fraction[fraction] = float(np.mean(sel))
        summary[mode] = by_fraction
    if out_path is not None:
        _write_rows(rows, out_path,
                    ("seed", "mode", "noise_fraction", "value", "ar", "er", "score"))
    return summary


def run_k_sweep(cfg: ExperimentConfig, k_values: tuple[int, ...],
                out_path: str | Path | None = None, seed: int = 0) -> list[dict]:
    """Full-model runs varying only the counterfactual candidate count."""
    trajs = build_dataset(cfg, seed=cfg.seed + seed)
    rows = []
    for k in k_values:
        swept = replace(cfg.cro, k=int(k))
        cfg_k = replace(cfg, cro=swept)
        agg = train_and_eval(cfg_k, trajs, "full", seed)
        rows.append({"k": int(k), **_metric_cols(agg)})
    if out_path is not None:
        _write_rows(rows, out_path, ("k", "value", "ar", "er", "score"))
    return rows


def _metric_cols(agg: dict) -> dict:
    return {"value": agg["value_mean"], "ar": agg["ar_mean"],
            "er": agg["exceed_rate"], "score": agg["score_mean"]}


def _seed_means(rows: list[dict], mode: str) -> dict:
    sel = [r for r in rows if r["mode"] == mode]
    return {k: float(np.mean([r[k] for r in sel])) for k in ("value", "ar", "er", "score")}


def _write_rows(rows: list[dict], path: str | Path, columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
