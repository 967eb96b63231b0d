import math

import numpy as np
import pytest
import torch

from fdplan.diffusion import cosine_beta_schedule
from fdplan.network import NetworkConfig, build_model
from fdplan.policy import (
    GOAL_SCALE,
    GRID_SCALE,
    Normalizer,
    PolicyConfig,
    adaptive_select,
    build_observation,
    extract_executable,
    fit_normalizer,
    run_episode,
    sample_plan,
    sample_plans,
)
from fdplan.records import EpisodeRecord
from fdplan.world import Environment, MidpointState, Obstacle, start_state

torch.set_num_threads(1)


def unit_normalizer():
    return Normalizer([-1] * 6, [1] * 6, [0.0, -1.5], [0.8, 1.5])


def tiny_env(obstacles=(), goal=(3.5, 6.5)):
    return Environment(obstacles=tuple(obstacles), goal=goal, seed=0)


def make_record(n=12, n_followers=2, outcome="success", policy="pac"):
    rng = np.random.default_rng(0)
    states = rng.normal(size=(n, 6))
    return EpisodeRecord(
        env=tiny_env(),
        policy=policy,
        seed=0,
        outcome=outcome,
        states=states,
        actions=rng.uniform(0, 0.8, size=(n, 2)),
        leaders=rng.normal(size=(n, 2, 2)),
        followers=rng.normal(size=(n, n_followers, 2)),
        clearance=rng.uniform(0.1, 2.0, size=n),
    )


class TestPolicyConfig:
    def test_obs_dim(self):
        assert PolicyConfig().obs_dim == 63

    def test_bad_action_horizon(self):
        with pytest.raises(ValueError):
            PolicyConfig(action_horizon=64, obs_horizon=2)

    def test_bad_candidates(self):
        with pytest.raises(ValueError):
            PolicyConfig(adaptive_candidates=0)


class TestNormalizer:
    def test_round_trip(self):
        norm = unit_normalizer()
        a = np.array([[0.4, -0.7], [0.0, 1.5]])
        assert np.allclose(norm.denormalize_actions(norm.normalize_actions(a)), a)

    def test_bounds_map_to_unit(self):
        norm = unit_normalizer()
        assert np.allclose(norm.normalize_actions(np.array([0.0, -1.5])), [-1.0, -1.0])
        assert np.allclose(norm.normalize_actions(np.array([0.8, 1.5])), [1.0, 1.0])

    def test_degenerate_range_guard(self):
        norm = Normalizer([0] * 6, [0] * 6, [0, 0], [0, 0])
        out = norm.normalize_state(np.zeros(6))
        assert np.all(np.isfinite(out))

    def test_meta_round_trip(self):
        norm = unit_normalizer()
        again = Normalizer.from_meta(norm.to_meta())
        assert np.allclose(again.action_min, norm.action_min)
        assert np.allclose(again.state_max, norm.state_max)

    def test_fit_over_records(self):
        recs = [make_record(), make_record()]
        norm = fit_normalizer(recs)
        states = np.concatenate([r.states for r in recs])
        normalized = norm.normalize_state(states)
        assert normalized.min() >= -1.0 - 1e-9
        assert normalized.max() <= 1.0 + 1e-9

    def test_fit_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_normalizer([])


class TestBuildObservation:
    def test_layout_and_padding(self):
        env = tiny_env([Obstacle((2.3, 4.7), 0.5)])
        norm = unit_normalizer()
        obs = build_observation([start_state()], env, norm)
        assert obs.shape == (63,)
        # one-state history is front-padded by repetition
        assert np.allclose(obs[:6], obs[6:12])
        # grid block normalized by the largest radius
        grid = obs[12:61]
        assert grid[1 * 7 + 3] == pytest.approx(0.5 / GRID_SCALE)
        # goal block
        assert np.allclose(obs[61:], np.array(env.goal) / GOAL_SCALE)

    def test_clipped_states(self):
        env = tiny_env()
        norm = unit_normalizer()
        far = MidpointState(50.0, -50.0, 1.0, 0.5, 0.0)
        obs = build_observation([far, far], env, norm)
        assert np.all(obs[:12] >= -1.5) and np.all(obs[:12] <= 1.5)

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            build_observation([], tiny_env(), unit_normalizer())


REDUCED_CFG = PolicyConfig(pred_horizon=8, obs_horizon=2, action_horizon=4, diffusion_steps=10)


def reduced_model():
    return build_model(
        NetworkConfig(down_dims=(8, 16), step_embed_dim=8, cond_dim=REDUCED_CFG.obs_dim), seed=0
    )


class TestSampling:
    def test_shapes_and_determinism(self):
        model = reduced_model()
        sched = cosine_beta_schedule(REDUCED_CFG.diffusion_steps)
        norm = unit_normalizer()
        obs = np.zeros(REDUCED_CFG.obs_dim)
        a = sample_plans(obs, model, sched, np.random.default_rng(0), norm, REDUCED_CFG, count=3)
        b = sample_plans(obs, model, sched, np.random.default_rng(0), norm, REDUCED_CFG, count=3)
        assert a.shape == (3, REDUCED_CFG.pred_horizon, 2)
        assert np.array_equal(a, b)

    def test_outputs_within_action_bounds(self):
        model = reduced_model()
        sched = cosine_beta_schedule(REDUCED_CFG.diffusion_steps)
        norm = unit_normalizer()
        plan = sample_plan(np.zeros(REDUCED_CFG.obs_dim), model, sched, np.random.default_rng(1), norm, REDUCED_CFG)
        # clip_sample keeps normalized values in [-1, 1] => physical bounds
        assert np.all(plan[:, 0] >= 0.0 - 1e-9) and np.all(plan[:, 0] <= 0.8 + 1e-9)
        assert np.all(np.abs(plan[:, 1]) <= 1.5 + 1e-9)


class TestExtractExecutable:
    def test_window_rows(self):
        plan = np.arange(64 * 2).reshape(64, 2)
        out = extract_executable(plan)
        assert out.shape == (10, 2)
        assert np.array_equal(out, plan[1:11])

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            extract_executable(np.zeros((32, 2)))


class TestAdaptiveSelect:
    def test_prefers_clear_candidate(self):
        env = tiny_env([Obstacle((0.0, 1.2), 0.5)], goal=(0.0, 6.0))
        state = start_state()
        toward = np.zeros((64, 2))
        toward[:, 0] = 0.8  # drives straight into the obstacle
        stop = np.zeros((64, 2))
        picked = adaptive_select(np.stack([toward, stop]), state, env)
        assert np.array_equal(picked, stop)

    def test_tie_goes_to_lower_index(self):
        env = tiny_env(goal=(0.0, 6.0))
        plan = np.zeros((64, 2))
        picked = adaptive_select(np.stack([plan, plan.copy()]), start_state(), env)
        assert picked is not None  # equality of contents suffices
        assert np.array_equal(picked, plan)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            adaptive_select(np.zeros((0, 64, 2)), start_state(), tiny_env())


class TestRunEpisode:
    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            run_episode("teleport", tiny_env(), np.random.default_rng(0))

    def test_diffusion_requires_model(self):
        with pytest.raises(ValueError):
            run_episode("diffusion", tiny_env(), np.random.default_rng(0))

    def test_pac_episode_record_consistency(self):
        env = tiny_env([Obstacle((2.0, 3.0), 0.5)])
        rec = run_episode("pac", env, np.random.default_rng(0), seed=0)
        n = rec.num_steps
        assert rec.outcome in ("success", "collision", "timeout")
        assert rec.states.shape == (n, 6)
        assert rec.actions.shape == (n, 2)
        assert rec.leaders.shape == (n, 2, 2)
        assert rec.followers.shape == (n, 2, 2)
        assert rec.clearance.shape == (n,)
        # leaders stay a bar-length apart
        gaps = np.hypot(
            rec.leaders[:, 0, 0] - rec.leaders[:, 1, 0], rec.leaders[:, 0, 1] - rec.leaders[:, 1, 1]
        )
        assert np.allclose(gaps, 1.0)

    def test_success_ends_near_goal(self):
        env = tiny_env()
        rec = run_episode("pac", env, np.random.default_rng(3), seed=3)
        assert rec.outcome == "success"
        assert math.hypot(rec.states[-1, 0] - env.goal[0], rec.states[-1, 1] - env.goal[1]) < 0.3

    def test_determinism(self):
        env = tiny_env([Obstacle((2.0, 3.0), 0.5)])
        a = run_episode("mppi", env, np.random.default_rng(4), seed=4)
        b = run_episode("mppi", env, np.random.default_rng(4), seed=4)
        assert a.to_json_line() == b.to_json_line()

    def test_max_steps_zero_times_out(self):
        rec = run_episode("pac", tiny_env(), np.random.default_rng(0), max_steps=0)
        assert rec.outcome == "timeout"
        assert rec.num_steps == 0

    def test_actions_logged_are_applied(self):
        rec = run_episode("pac", tiny_env(), np.random.default_rng(5), seed=5)
        assert np.all(rec.actions[:, 0] >= 0.0) and np.all(rec.actions[:, 0] <= 0.8)
        assert np.all(np.abs(rec.actions[:, 1]) <= 1.5)
