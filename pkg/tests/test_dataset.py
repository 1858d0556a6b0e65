"""Behavior-log generation and the trajectory file format."""

import numpy as np
import pytest

from probid.auction import MarketModel, smooth_day_profile
from probid.core import CampaignConfig, validate_trajectory
from probid.dataset import (BehaviorPolicy, build_manifest, generate_dataset,
                            inject_noise_trajectories, load_dataset,
                            save_dataset, save_manifest)

CFG = CampaignConfig(budget=30.0, cpa_target=0.3, horizon=24, reward_mode="dense")
MARKET = MarketModel(lwc_profile=smooth_day_profile(24), seed=0)

MIXTURE = [
    (BehaviorPolicy("constant_lambda", {"lam": 0.25}, noise_scale=0.05), 1.0),
    (BehaviorPolicy("noisy_pid_pacer", {"lam": 0.5, "gain": 2.0}, noise_scale=0.1), 1.0),
    (BehaviorPolicy("random_walk_lambda", {"lam": 0.4, "walk_scale": 0.1}), 1.0),
]


def _gen(n=40, **kw):
    args = dict(seed_base=7, cpa_range=(0.25, 0.35), early_stop_prob=0.05)
    args.update(kw)
    return generate_dataset(n, MARKET, CFG, MIXTURE, **args)


class TestGenerateDataset:
    def test_zero_policy_yields_zero_trajectory(self):
        mixture = [(BehaviorPolicy("constant_lambda", {"lam": 0.0}), 1.0)]
        trajs = generate_dataset(1, MARKET, CFG, mixture, seed_base=0)
        assert trajs[0].total_reward == 0.0
        assert trajs[0].total_cost == 0.0

    def test_ratio_spread_nondegenerate(self):
        trajs = _gen(60)
        ratios = [t.realized_ratio for t in trajs if np.isfinite(t.realized_ratio)]
        assert min(ratios) < max(ratios)

    def test_every_trajectory_valid(self):
        for traj in _gen(40):
            assert validate_trajectory(traj)
            assert len(traj) <= CFG.horizon

    def test_lengths_vary_with_early_stop(self):
        lengths = {len(t) for t in _gen(60, early_stop_prob=0.1)}
        assert len(lengths) > 1

    def test_regeneration_identical(self):
        a, b = _gen(20), _gen(20)
        assert a == b

    def test_mixture_determinism_independent_of_market(self):
        other_market = MARKET.with_seed(123)
        a = _gen(20)
        b = generate_dataset(20, other_market, CFG, MIXTURE, seed_base=7,
                             cpa_range=(0.25, 0.35), early_stop_prob=0.05)
        # same seed base -> same campaign assignments even in another market
        assert [t.campaign for t in a] == [t.campaign for t in b]

    def test_invalid_mixture_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset(5, MARKET, CFG, [])
        with pytest.raises(ValueError):
            generate_dataset(5, MARKET, CFG, [(MIXTURE[0][0], -1.0)])


class TestFileFormat:
    def test_round_trip_bytes(self, tmp_path):
        trajs = _gen(15)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(trajs, p1)
        loaded = load_dataset(p1)
        save_dataset(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded == trajs

    def test_truncated_line_names_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        save_dataset(_gen(3), p)
        text = p.read_text().splitlines()
        p.write_text("\n".join(text[:2] + [text[2][:40]]) + "\n")
        with pytest.raises(ValueError, match=":3:"):
            load_dataset(p)

    def test_every_loaded_step_has_16_features(self, tmp_path):
        p = tmp_path / "d.jsonl"
        save_dataset(_gen(10), p)
        for traj in load_dataset(p):
            for s in traj.steps:
                assert len(s.state) == 16

    def test_unsupported_version_rejected(self, tmp_path):
        p = tmp_path / "v.jsonl"
        save_dataset(_gen(1), p)
        p.write_text(p.read_text().replace('"version":1', '"version":99', 1))
        with pytest.raises(ValueError, match="version"):
            load_dataset(p)

    def test_manifest_counts_match(self, tmp_path):
        trajs = _gen(12)
        manifest = build_manifest(trajs, seed_base=7)
        assert manifest.count == 12
        assert len(manifest.total_rewards) == 12
        save_manifest(manifest, tmp_path / "m.json")
        assert (tmp_path / "m.json").exists()


class TestInjectNoise:
    def test_zero_fraction_is_identity(self):
        trajs = _gen(10)
        assert inject_noise_trajectories(trajs, 0.0, MARKET, seed=1) == trajs

    def test_full_fraction_replaces_all(self):
        trajs = _gen(10)
        noisy = inject_noise_trajectories(trajs, 1.0, MARKET, seed=1)
        assert all(a != b for a, b in zip(noisy, trajs))

    def test_floor_arithmetic(self):
        trajs = _gen(10)
        noisy = inject_noise_trajectories(trajs, 0.3, MARKET, seed=1)
        assert sum(a != b for a, b in zip(noisy, trajs)) == 3

    def test_replacements_keep_campaign_and_length(self):
        trajs = _gen(10)
        noisy = inject_noise_trajectories(trajs, 1.0, MARKET, seed=2)
        for a, b in zip(noisy, trajs):
            assert a.campaign == b.campaign
            assert len(a) == len(b)
            assert validate_trajectory(a)
