"""Command-line front end tying the pipeline together.

Subcommands: gen-data, train, evaluate, pareto, plot, sweep-cpa, sweep-k.
Every command snapshots the effective configuration into its output
directory, so runs are reproducible from the artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiments
from .cdpr import pareto_report
from .config import ConfigError, ExperimentConfig, load_config, write_snapshot
from .dataset import build_manifest, load_dataset, save_dataset, save_manifest
from .evaluation import cpa_sensitivity_sweep, evaluate
from .model import load_checkpoint
from .training import train

PARETO_COLUMNS = ("r", "c", "r_norm", "c_norm", "on_frontier",
                  "s_eff", "s_com", "s_len", "q", "prob")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probid",
                                     description="constrained auto-bidding lab")
    parser.add_argument("--config", help="TOML experiment configuration")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--out", help="override run.out (output directory)")
    parser.add_argument("--threads", type=int, help="override run.threads")
    parser.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override any config key")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the offline behavior dataset")

    p_train = sub.add_parser("train", help="train a policy on a dataset")
    p_train.add_argument("--data", required=True, help="trajectory file (jsonl)")
    p_train.add_argument("--ablation", default="none",
                         choices=("none", "no-cdpr", "no-cro", "plain-dt"))

    p_eval = sub.add_parser("evaluate", help="closed-loop evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--budget-scale", type=float, default=None,
                        help="scale the campaign budget (e.g. 0.5 .. 1.5)")

    p_pareto = sub.add_parser("pareto", help="emit the quality-score diagnostic CSV")
    p_pareto.add_argument("--data", required=True)

    p_plot = sub.add_parser("plot", help="render CSVs to SVG")
    p_plot.add_argument("--kind", required=True, choices=("pareto", "sweep", "metrics"))
    p_plot.add_argument("--inputs", nargs="+", required=True, help="input CSV files")
    p_plot.add_argument("--out-file", required=True, help="output .svg path")

    p_cpa = sub.add_parser("sweep-cpa", help="evaluate one checkpoint across targets")
    p_cpa.add_argument("--checkpoint", required=True)
    p_cpa.add_argument("--targets", help="comma-separated ratio targets")

    sub.add_parser("sweep-k", help="train across counterfactual candidate counts")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          threads=args.threads, sets=args.set)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    torch.set_num_threads(cfg.threads)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out_dir)
    try:
        return COMMANDS[args.command](cfg, args, out_dir)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_gen_data(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    trajs = experiments.build_dataset(cfg)
    save_dataset(trajs, out_dir / "dataset.jsonl")
    manifest = build_manifest(trajs, cfg.seed)
    save_manifest(manifest, out_dir / "manifest.json")
    print(f"wrote {len(trajs)} trajectories to {out_dir / 'dataset.jsonl'}")
    for k, v in manifest.summary().items():
        print(f"  {k}: {v}")
    return 0


def cmd_train(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    trajs = load_dataset(data_path)
    mode = "full" if args.ablation == "none" else args.ablation
    train(trajs, cfg.model, cfg.filter, cfg.cro, cfg.train, mode=mode,
          eval_market=cfg.market, eval_campaign=cfg.campaign, out_dir=out_dir)
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    print(f"metrics:    {out_dir / 'metrics.csv'}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    scale = args.budget_scale if args.budget_scale is not None else cfg.eval.budget_scale
    agg, reports = evaluate(model, cfg.market, cfg.campaign,
                            n_episodes=cfg.eval.n_episodes, seed=cfg.eval.seed,
                            budget_scale=scale)
    with (out_dir / "episodes.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("episode", "value", "realized_cpa", "ar", "exceeded", "score"))
        for i, r in enumerate(reports):
            writer.writerow((i, r.value, r.realized_cpa, r.ar, int(r.exceeded), r.score))
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(tuple(agg))
        writer.writerow(tuple(agg.values()))
    print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in agg.items()))
    return 0


def cmd_pareto(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    trajs = load_dataset(data_path)
    rows = pareto_report(trajs, cfg.filter)
    with (out_dir / "pareto.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PARETO_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    n_front = sum(r["on_frontier"] for r in rows)
    print(f"{len(rows)} trajectories, {n_front} on the frontier -> {out_dir / 'pareto.csv'}")
    return 0


def cmd_plot(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    out_file = Path(args.out_file)
    if out_file.suffix not in (".svg", ".pdf"):
        raise ValueError("plot output must be .svg or .pdf (vector graphics)")
    tables = [_read_csv(Path(p)) for p in args.inputs]
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    if args.kind == "pareto":
        rows = tables[0]
        costs = np.array([float(r["c"]) for r in rows])
        rets = np.array([float(r["r"]) for r in rows])
        front = np.array([bool(int(r["on_frontier"])) for r in rows])
        ax.scatter(costs[~front], rets[~front], s=12, c="lightsteelblue",
                   label="dominated")
        order = np.argsort(costs[front])
        ax.plot(costs[front][order], rets[front][order], "r.-", ms=10,
                label="frontier")
        ax.set_xlabel("episode cost")
        ax.set_ylabel("episode value")
    elif args.kind == "sweep":
        for path, rows in zip(args.inputs, tables):
            xkey = "target" if "target" in rows[0] else "k"
            xs = [float(r[xkey]) for r in rows]
            ys = [float(r["score"]) for r in rows]
            ax.plot(xs, ys, "o-", label=Path(path).stem)
        ax.set_xlabel(xkey)
        ax.set_ylabel("score")
    else:  # metrics
        rows = tables[0]
        steps = [int(r["step"]) for r in rows]
        for col in ("nll", "regret", "pred", "total"):
            ax.plot(steps, [float(r[col]) for r in rows], label=col)
        ax.set_xlabel("training step")
        ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out_file.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_file)
    plt.close(fig)
    print(f"wrote {out_file}")
    return 0


def cmd_sweep_cpa(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.targets:
        targets = [float(x) for x in args.targets.split(",")]
    elif cfg.eval.cpa_targets:
        targets = list(cfg.eval.cpa_targets)
    else:
        t = cfg.campaign.cpa_target
        targets = [round(t * f, 10) for f in (0.6, 0.8, 1.0, 1.2, 1.5)]
    rows = cpa_sensitivity_sweep(model, cfg.market, cfg.campaign, targets,
                                 n_episodes=cfg.eval.n_episodes, seed=cfg.eval.seed)
    path = out_dir / "sweep_cpa.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=("target", "value", "ar", "er", "score"))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0


def cmd_sweep_k(cfg: ExperimentConfig, args, out_dir: Path) -> int:
    path = out_dir / "sweep_k.csv"
    rows = experiments.run_k_sweep(cfg, cfg.eval.k_values, out_path=path,
                                   seed=cfg.seed)
    for row in rows:
        print("  ".join(f"{k}={v:.4g}" for k, v in row.items()))
    print(f"wrote {path}")
    return 0


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"input CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"input CSV is empty: {path}")
    return rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pareto": cmd_pareto,
    "plot": cmd_plot,
    "sweep-cpa": cmd_sweep_cpa,
    "sweep-k": cmd_sweep_k,
}


if __name__ == "__main__":
    raise SystemExit(main())
