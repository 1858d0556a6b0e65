"""Constrained auto-bidding lab: simulator, offline logs, Pareto-prioritized
sampling, regret-optimized sequence policies, and pacing evaluation."""

__version__ = "0.1.0"

from .core import (AllocationInstance, CampaignConfig, Impression, Step,
                   Trajectory, make_trajectory, solve_allocation_exact,
                   solve_allocation_greedy, validate_trajectory)
from .auction import MarketModel, new_episode, run_episode
from .cdpr import (DualStreamContext, FilterParams, QualityScore,
                   build_dual_stream, compliance_score, efficiency_score,
                   pareto_frontier, richness_score, sampling_distribution,
                   weighted_batch_sample)
from .model import ModelConfig, PolicyModel, load_checkpoint, save_checkpoint
from .training import CroParams, TrainConfig, train, train_dt_ablation
from .evaluation import (EpisodeReport, PacingState, act, evaluate,
                         init_pacing, observe)
