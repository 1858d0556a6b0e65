"""Experiment configuration: a sectioned TOML file covering every module.

Values are validated on load with key-path error messages. The effective
configuration (file plus command-line overrides) can be re-emitted as TOML so
every run directory carries an exact snapshot of what produced it.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .auction import MarketModel, smooth_day_profile
from .cdpr import FilterParams
from .core import CampaignConfig
from .dataset import BehaviorPolicy
from .model import ModelConfig
from .training import CroParams, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_trajectories: int = 500
    cpa_min: float = 0.0   # 0 disables per-trajectory target sampling
    cpa_max: float = 0.0
    budget_min: float = 0.0
    budget_max: float = 0.0
    early_stop_prob: float = 0.02
    noise_fraction: float = 0.0
    mixture: tuple[tuple[BehaviorPolicy, float], ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    seed: int = 10_000
    budget_scale: float = 1.0
    cpa_targets: tuple[float, ...] = ()   # sweep-cpa targets
    k_values: tuple[int, ...] = (1, 2, 4, 8, 16)  # sweep-k grid


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    threads: int
    out: str
    market: MarketModel
    campaign: CampaignConfig
    dataset: DatasetConfig
    filter: FilterParams
    cro: CroParams
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    lwc_profile_amplitude: float = 0.5


DEFAULT_MIXTURE = (
    (BehaviorPolicy("constant_lambda", {"lam": 0.20}, noise_scale=0.04), 1.0),
    (BehaviorPolicy("constant_lambda", {"lam": 0.35}, noise_scale=0.05), 1.0),
    (BehaviorPolicy("constant_lambda", {"lam": 0.50}, noise_scale=0.06), 1.0),
    (BehaviorPolicy("constant_lambda", {"lam": 0.75}, noise_scale=0.08), 1.0),
    (BehaviorPolicy("noisy_pid_pacer", {"lam": 0.40, "gain": 2.0}, noise_scale=0.06), 2.0),
    (BehaviorPolicy("noisy_pid_pacer", {"lam": 0.55, "gain": 1.5}, noise_scale=0.10), 1.0),
    (BehaviorPolicy("random_walk_lambda", {"lam": 0.35, "walk_scale": 0.08}, noise_scale=0.05), 1.0),
)


def desk_config(seed: int = 0, out: str = "runs/desk") -> ExperimentConfig:
    """The small-scale reference setup used by the test and example recipes."""
    horizon = 48
    return ExperimentConfig(
        seed=seed, threads=2, out=out,
        market=MarketModel(imps_per_step_mean=24.0, imps_per_step_dispersion=1.5,
                           value_alpha=2.0, value_beta=6.0, lwc_median=0.10,
                           lwc_sigma=0.35, lwc_profile=smooth_day_profile(horizon, 0.5),
                           seed=seed),
        campaign=CampaignConfig(budget=30.0, cpa_target=0.30, horizon=horizon,
                                reward_mode="dense"),
        dataset=DatasetConfig(n_trajectories=500, cpa_min=0.24, cpa_max=0.36,
                              budget_min=21.0, budget_max=39.0,
                              early_stop_prob=0.01, noise_fraction=0.0,
                              mixture=DEFAULT_MIXTURE),
        filter=FilterParams(kappa=5.0, omega=2.0, t_max=horizon),
        cro=CroParams(),
        model=ModelConfig(d_model=64, n_layers=2, n_heads=4, context_steps=12,
                          max_timestep=horizon, action_bound=0.0,
                          sigma_floor=1e-3, sigma_cap=0.5, dtype="float32"),
        train=TrainConfig(max_steps=2000, batch_size=32, learning_rate=1e-3,
                          seed=seed, eval_every=0, eval_episodes=16),
        eval=EvalConfig(n_episodes=100, seed=10_000 + seed),
        lwc_profile_amplitude=0.5,
    )


_SECTIONS = ("run", "market", "campaign", "dataset", "filter", "cro", "model",
             "train", "eval")

_REQUIRED = ("campaign.budget", "campaign.cpa_target")


def _get(table: dict, section: str, key: str, default, kind):
    raw = table.get(section, {}).get(key, default)
    if raw is None:
        raise ConfigError(f"missing required key {section}.{key}")
    try:
        if kind is bool and not isinstance(raw, bool):
            raise TypeError
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {raw!r}")


def load_config(path: str | Path | None = None, *, seed: int | None = None,
                out: str | None = None, threads: int | None = None,
                sets: list[str] | None = None) -> ExperimentConfig:
    """Load TOML (or start from desk defaults when no file is given) and
    apply overrides. `sets` entries look like "train.max_steps=100"."""
    table: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with p.open("rb") as f:
            try:
                table = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{p}: {e}") from e
    for spec in sets or []:
        if "=" not in spec or "." not in spec.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {spec!r}")
        key_path, value = spec.split("=", 1)
        section, key = key_path.split(".", 1)
        table.setdefault(section, {})[key] = _parse_literal(value)
    if seed is not None:
        table.setdefault("run", {})["seed"] = seed
    if out is not None:
        table.setdefault("run", {})["out"] = out
    if threads is not None:
        table.setdefault("run", {})["threads"] = threads

    for section in table:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")

    base = desk_config()
    run_seed = _get(table, "run", "seed", base.seed, int)
    defaults_from_file = path is not None or bool(sets)
    # required keys must be present when a file is supplied
    if defaults_from_file and path is not None:
        for req in _REQUIRED:
            sec, key = req.split(".")
            if key not in table.get(sec, {}):
                raise ConfigError(f"missing required key {req}")

    horizon = _get(table, "campaign", "horizon", base.campaign.horizon, int)
    amplitude = _get(table, "market", "lwc_profile_amplitude",
                     base.lwc_profile_amplitude, float)
    market = MarketModel(
        imps_per_step_mean=_get(table, "market", "imps_per_step_mean",
                                base.market.imps_per_step_mean, float),
        imps_per_step_dispersion=_get(table, "market", "imps_per_step_dispersion",
                                      base.market.imps_per_step_dispersion, float),
        value_alpha=_get(table, "market", "value_alpha", base.market.value_alpha, float),
        value_beta=_get(table, "market", "value_beta", base.market.value_beta, float),
        lwc_median=_get(table, "market", "lwc_median", base.market.lwc_median, float),
        lwc_sigma=_get(table, "market", "lwc_sigma", base.market.lwc_sigma, float),
        lwc_profile=smooth_day_profile(horizon, amplitude),
        seed=run_seed,
    )
    campaign = CampaignConfig(
        budget=_get(table, "campaign", "budget", base.campaign.budget, float),
        cpa_target=_get(table, "campaign", "cpa_target", base.campaign.cpa_target, float),
        horizon=horizon,
        reward_mode=_get(table, "campaign", "reward_mode", base.campaign.reward_mode, str),
    )
    mixture = _load_mixture(table.get("dataset", {}).get("mixture"), base.dataset.mixture)
    dataset = DatasetConfig(
        n_trajectories=_get(table, "dataset", "n_trajectories",
                            base.dataset.n_trajectories, int),
        cpa_min=_get(table, "dataset", "cpa_min", base.dataset.cpa_min, float),
        cpa_max=_get(table, "dataset", "cpa_max", base.dataset.cpa_max, float),
        budget_min=_get(table, "dataset", "budget_min", base.dataset.budget_min, float),
        budget_max=_get(table, "dataset", "budget_max", base.dataset.budget_max, float),
        early_stop_prob=_get(table, "dataset", "early_stop_prob",
                             base.dataset.early_stop_prob, float),
        noise_fraction=_get(table, "dataset", "noise_fraction",
                            base.dataset.noise_fraction, float),
        mixture=mixture,
    )
    fparams = FilterParams(
        kappa=_get(table, "filter", "kappa", base.filter.kappa, float),
        omega=_get(table, "filter", "omega", base.filter.omega, float),
        t_max=horizon,
    )
    cro = CroParams(
        gamma_u=_get(table, "cro", "gamma_u", base.cro.gamma_u, float),
        tau=_get(table, "cro", "tau", base.cro.tau, float),
        k=_get(table, "cro", "k", base.cro.k, int),
        eps=_get(table, "cro", "eps", base.cro.eps, float),
        alpha=_get(table, "cro", "alpha", base.cro.alpha, float),
        beta=_get(table, "cro", "beta", base.cro.beta, float),
        eta=_get(table, "cro", "eta", base.cro.eta, float),
        detach_predictor=_get(table, "cro", "detach_predictor",
                              base.cro.detach_predictor, bool),
    )
    model = ModelConfig(
        d_model=_get(table, "model", "d_model", base.model.d_model, int),
        n_layers=_get(table, "model", "n_layers", base.model.n_layers, int),
        n_heads=_get(table, "model", "n_heads", base.model.n_heads, int),
        context_steps=_get(table, "model", "context_steps",
                           base.model.context_steps, int),
        max_timestep=horizon,
        action_bound=_get(table, "model", "action_bound",
                          base.model.action_bound, float),
        sigma_floor=_get(table, "model", "sigma_floor", base.model.sigma_floor, float),
        sigma_cap=_get(table, "model", "sigma_cap", base.model.sigma_cap, float),
        dtype=_get(table, "model", "dtype", base.model.dtype, str),
    )
    train = TrainConfig(
        max_steps=_get(table, "train", "max_steps", base.train.max_steps, int),
        batch_size=_get(table, "train", "batch_size", base.train.batch_size, int),
        learning_rate=_get(table, "train", "learning_rate",
                           base.train.learning_rate, float),
        lr_schedule=_get(table, "train", "lr_schedule", base.train.lr_schedule, str),
        weight_decay=_get(table, "train", "weight_decay",
                          base.train.weight_decay, float),
        grad_clip=_get(table, "train", "grad_clip", base.train.grad_clip, float),
        seed=run_seed,
        eval_every=_get(table, "train", "eval_every", base.train.eval_every, int),
        eval_episodes=_get(table, "train", "eval_episodes",
                           base.train.eval_episodes, int),
        compile=_get(table, "train", "compile", base.train.compile, bool),
    )
    eval_cfg = EvalConfig(
        n_episodes=_get(table, "eval", "n_episodes", base.eval.n_episodes, int),
        seed=_get(table, "eval", "seed", 10_000 + run_seed, int),
        budget_scale=_get(table, "eval", "budget_scale", base.eval.budget_scale, float),
        cpa_targets=tuple(float(x) for x in
                          table.get("eval", {}).get("cpa_targets", [])),
        k_values=tuple(int(x) for x in
                       table.get("eval", {}).get("k_values", base.eval.k_values)),
    )
    return ExperimentConfig(
        seed=run_seed,
        threads=_get(table, "run", "threads", base.threads, int),
        out=_get(table, "run", "out", base.out, str),
        market=market, campaign=campaign, dataset=dataset, filter=fparams,
        cro=cro, model=model, train=train, eval=eval_cfg,
        lwc_profile_amplitude=amplitude,
    )


def _parse_literal(text: str):
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _load_mixture(raw, default):
    if raw is None:
        return default
    if not isinstance(raw, list) or not raw:
        raise ConfigError("dataset.mixture must be a nonempty array of tables")
    mixture = []
    for i, entry in enumerate(raw):
        try:
            kind = entry["kind"]
            weight = float(entry.get("weight", 1.0))
            params = {k: float(v) for k, v in entry.items()
                      if k in ("lam", "gain", "walk_scale")}
            policy = BehaviorPolicy(kind=kind, params=params,
                                    noise_scale=float(entry.get("noise_scale", 0.0)))
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"dataset.mixture[{i}]: {e}") from e
        mixture.append((policy, weight))
    return tuple(mixture)


# -- snapshot emission -------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg: ExperimentConfig) -> str:
    """Emit the effective configuration as TOML (round-trips via load)."""
    lines = []

    def section(name: str, pairs: dict):
        lines.append(f"[{name}]")
        for k, v in pairs.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")

    section("run", {"seed": cfg.seed, "threads": cfg.threads, "out": cfg.out})
    section("market", {
        "imps_per_step_mean": cfg.market.imps_per_step_mean,
        "imps_per_step_dispersion": cfg.market.imps_per_step_dispersion,
        "value_alpha": cfg.market.value_alpha, "value_beta": cfg.market.value_beta,
        "lwc_median": cfg.market.lwc_median, "lwc_sigma": cfg.market.lwc_sigma,
        "lwc_profile_amplitude": cfg.lwc_profile_amplitude,
    })
    section("campaign", {"budget": cfg.campaign.budget,
                         "cpa_target": cfg.campaign.cpa_target,
                         "horizon": cfg.campaign.horizon,
                         "reward_mode": cfg.campaign.reward_mode})
    section("dataset", {"n_trajectories": cfg.dataset.n_trajectories,
                        "cpa_min": cfg.dataset.cpa_min, "cpa_max": cfg.dataset.cpa_max,
                        "budget_min": cfg.dataset.budget_min,
                        "budget_max": cfg.dataset.budget_max,
                        "early_stop_prob": cfg.dataset.early_stop_prob,
                        "noise_fraction": cfg.dataset.noise_fraction})
    for policy, weight in cfg.dataset.mixture:
        lines.append("[[dataset.mixture]]")
        lines.append(f'kind = "{policy.kind}"')
        lines.append(f"weight = {_toml_value(weight)}")
        for k, v in sorted(policy.params.items()):
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append(f"noise_scale = {_toml_value(policy.noise_scale)}")
        lines.append("")
    section("filter", {"kappa": cfg.filter.kappa, "omega": cfg.filter.omega})
    section("cro", {"gamma_u": cfg.cro.gamma_u, "tau": cfg.cro.tau, "k": cfg.cro.k,
                    "eps": cfg.cro.eps, "alpha": cfg.cro.alpha, "beta": cfg.cro.beta,
                    "eta": cfg.cro.eta, "detach_predictor": cfg.cro.detach_predictor})
    section("model", {"d_model": cfg.model.d_model, "n_layers": cfg.model.n_layers,
                      "n_heads": cfg.model.n_heads,
                      "context_steps": cfg.model.context_steps,
                      "action_bound": cfg.model.action_bound,
                      "sigma_floor": cfg.model.sigma_floor,
                      "sigma_cap": cfg.model.sigma_cap, "dtype": cfg.model.dtype})
    section("train", {"max_steps": cfg.train.max_steps,
                      "batch_size": cfg.train.batch_size,
                      "learning_rate": cfg.train.learning_rate,
                      "weight_decay": cfg.train.weight_decay,
                      "grad_clip": cfg.train.grad_clip,
                      "eval_every": cfg.train.eval_every,
                      "eval_episodes": cfg.train.eval_episodes})
    section("eval", {"n_episodes": cfg.eval.n_episodes, "seed": cfg.eval.seed,
                     "budget_scale": cfg.eval.budget_scale})
    return "\n".join(lines)


def write_snapshot(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.toml"
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
