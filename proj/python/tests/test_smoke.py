import math

import numpy as np
import pytest

import hyperfastrl as hf


def tiny_config():
    cfg = hf.default_config()
    cfg["env"].update(points=16, actuator_count=4, episode_length=20, burn_in_steps=20, init_modes=4,
                      mu_grid=[-0.075, 0.0, 0.075])
    cfg["encoder"].update(stage_widths=[4, 6], blocks_per_stage=1, fourier_mapping=8, kan_basis=3)
    cfg["topology"].update(hidden=8, quantiles=3)
    cfg["trainer"].update(num_envs=4, total_env_steps=160, batch_size=8, buffer_capacity=200, drop=1,
                          eval_episodes=2, eval_interval_fraction=0.25, exploration_fraction=0.25)
    return cfg


def test_env_reset_and_step():
    env = hf.Env()
    y = env.reset(mu=0.0, seed=1)
    assert y.shape == (64,)
    assert abs(y.mean()) < 1e-10
    assert env.observation_dim == 65
    out = env.step(np.zeros(env.action_dim))
    assert np.all(np.isfinite(out["y"]))
    assert out["reward"] <= 0.0
    assert not out["unstable"]


def test_reward_oracle():
    env = hf.Env()
    assert env.reward(np.zeros(64), np.zeros(8)) == 0.0
    assert env.reward(np.ones(64), np.zeros(8)) == pytest.approx(-0.044, abs=1e-12)
    assert env.reward(np.zeros(64), np.ones(8)) == pytest.approx(-0.00055, abs=1e-12)


def test_step_before_reset_raises():
    with pytest.raises(Exception):
        hf.Env().step(np.zeros(8))


def test_forcing_field_has_zero_mean():
    f = hf.forcing_field(0.1)
    assert f.shape == (64,)
    assert abs(f.mean()) < 1e-12


def test_distributional_helpers():
    assert hf.quantile_midpoints(2) == pytest.approx([0.25, 0.75])
    assert hf.tqc_targets([[1.0, 3.0], [2.0, 4.0]], 0.0, 1.0, 1) == [1.0, 2.0, 3.0]
    assert hf.truncation_mean([-1.0, 0.0, 1.0, 2.0], 1) == 0.0


def test_config_round_trip():
    cfg = hf.desk_config()
    assert len(hf.config_hash(cfg)) == 16
    cfg["env"]["bogus"] = 1
    with pytest.raises(Exception):
        hf.config_hash(cfg)


def test_train_evaluate_heatmap(tmp_path):
    cfg = tiny_config()
    result = hf.train(cfg, 3, tmp_path / "run")
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert result["env_steps"] == 160
    report = hf.evaluate(result["checkpoint"], {"seen": [0.0], "interpolation": [], "extrapolation": [], "episodes": 1})
    assert report["config_hash"] == hf.config_hash(cfg | {"seed": 3})
    assert len(report["points"]) == 1
    h = hf.heatmap(result["checkpoint"], 0.0, "zero", rows=20, onset=10)
    assert h["field"].shape == (20, 16)
    assert math.isfinite(h["variance_ratio"])
