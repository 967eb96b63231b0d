"""Observation construction, normalization, receding-horizon diffusion
sampling, and full episode rollouts for all three policies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controllers import FormationGains, MPPIConfig, MPPIController, PACConfig, pac_command
from .diffusion import NoiseSchedule, denoise_step
from .formation import FormationTracker
from .network import NoisePredictor, unet_forward
from .records import EpisodeRecord
from .world import (
    DT,
    T_MAX,
    Environment,
    FormationState,
    MidpointState,
    UnicycleState,
    check_termination,
    clearance,
    encode_obstacle_grid,
    leaders_from_midpoint,
    start_state,
    step_midpoint,
)

GRID_SCALE = 0.8  # largest obstacle radius
GOAL_SCALE = 7.0  # workspace extent
OBS_CLIP = 1.5
RANGE_EPS = 1e-6


@dataclass(frozen=True)
class PolicyConfig:
    pred_horizon: int = 64  # T_p
    obs_horizon: int = 2  # T_o
    action_horizon: int = 10  # T_a
    diffusion_steps: int = 100  # K
    adaptive_candidates: int = 1

    def __post_init__(self):
        if not 1 <= self.action_horizon <= self.pred_horizon - self.obs_horizon + 1:
            raise ValueError("need 1 <= T_a <= T_p - T_o + 1")
        if self.adaptive_candidates < 1:
            raise ValueError("adaptive_candidates must be >= 1")

    @property
    def obs_dim(self) -> int:
        return self.obs_horizon * 6 + 49 + 2


class Normalizer:
    """Per-dimension min/max mapping to [-1, 1] for states and actions."""

    def __init__(self, state_min, state_max, action_min, action_max):
        self.state_min = np.asarray(state_min, dtype=float)
        self.state_max = np.asarray(state_max, dtype=float)
        self.action_min = np.asarray(action_min, dtype=float)
        self.action_max = np.asarray(action_max, dtype=float)
        for lo, hi in ((self.state_min, self.state_max), (self.action_min, self.action_max)):
            rng = hi - lo
            hi[rng < RANGE_EPS] = lo[rng < RANGE_EPS] + RANGE_EPS

    @staticmethod
    def _norm(x, lo, hi):
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    @staticmethod
    def _denorm(x, lo, hi):
        return (x + 1.0) * 0.5 * (hi - lo) + lo

    def normalize_state(self, s: np.ndarray) -> np.ndarray:
        return self._norm(np.asarray(s, dtype=float), self.state_min, self.state_max)

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        return self._norm(np.asarray(a, dtype=float), self.action_min, self.action_max)

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        return self._denorm(np.asarray(a, dtype=float), self.action_min, self.action_max)

    def to_meta(self) -> dict:
        return {
            "state_min": self.state_min.tolist(),
            "state_max": self.state_max.tolist(),
            "action_min": self.action_min.tolist(),
            "action_max": self.action_max.tolist(),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Normalizer":
        return cls(meta["state_min"], meta["state_max"], meta["action_min"], meta["action_max"])


def fit_normalizer(records: list[EpisodeRecord]) -> Normalizer:
    """Min/max over every state and action in the dataset."""
    if not records:
        raise ValueError("empty dataset")
    states = np.concatenate([r.states for r in records])
    actions = np.concatenate([r.actions for r in records])
    return Normalizer(states.min(axis=0), states.max(axis=0), actions.min(axis=0), actions.max(axis=0))


def build_observation(
    history: list[MidpointState],
    env: Environment,
    norm: Normalizer,
    cfg: PolicyConfig = PolicyConfig(),
) -> np.ndarray:
    """[normalized last-T_o states | obstacle grid | normalized goal].

    A short history is front-padded by repeating the earliest state.
    """
    if not history:
        raise ValueError("history must contain at least one state")
    window = list(history[-cfg.obs_horizon :])
    while len(window) < cfg.obs_horizon:
        window.insert(0, window[0])
    parts = [
        np.clip(norm.normalize_state(s.as_vector()), -OBS_CLIP, OBS_CLIP) for s in window
    ]
    parts.append(encode_obstacle_grid(env) / GRID_SCALE)
    parts.append(np.array(env.goal) / GOAL_SCALE)
    return np.concatenate(parts)


def sample_plans(
    obs: np.ndarray,
    model: NoisePredictor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    norm: Normalizer,
    cfg: PolicyConfig = PolicyConfig(),
    count: int = 1,
) -> np.ndarray:
    """Reverse-diffuse `count` action sequences; returns (count, T_p, 2) in
    physical units."""
    plans = rng.standard_normal((count, cfg.pred_horizon, 2))
    for k in range(cfg.diffusion_steps - 1, -1, -1):
        eps_hat = unet_forward(model, plans, k, obs)
        plans = denoise_step(plans, eps_hat, k, sched, rng)
        if not np.all(np.isfinite(plans)):
            raise FloatingPointError(f"non-finite sample at diffusion step {k}")
    return norm.denormalize_actions(plans)


def sample_plan(obs, model, sched, rng, norm, cfg: PolicyConfig = PolicyConfig()) -> np.ndarray:
    return sample_plans(obs, model, sched, rng, norm, cfg, count=1)[0]


def extract_executable(plan: np.ndarray, cfg: PolicyConfig = PolicyConfig()) -> np.ndarray:
    """Rows T_o-1 .. T_o-1+T_a-1 of the plan (zero-based)."""
    plan = np.asarray(plan)
    if plan.shape[0] != cfg.pred_horizon:
        raise ValueError(f"plan length {plan.shape[0]} != T_p {cfg.pred_horizon}")
    lo = cfg.obs_horizon - 1
    hi = lo + cfg.action_horizon
    if hi > plan.shape[0]:
        raise ValueError("executable window exceeds plan")
    return plan[lo:hi]


def _window_min_clearance(state: MidpointState, actions: np.ndarray, env: Environment) -> float:
    score = math.inf
    s = state
    for a in actions:
        s = step_midpoint(s, (a[0], a[1]))
        la, lb = leaders_from_midpoint(s)
        score = min(score, clearance(s.position, env), clearance(la, env), clearance(lb, env))
    return score


def adaptive_select(
    candidates: np.ndarray,
    state: MidpointState,
    env: Environment,
    cfg: PolicyConfig = PolicyConfig(),
) -> np.ndarray:
    """Pick the candidate whose executable window keeps the largest clearance
    (midpoint and both bar endpoints); ties go to the lower index."""
    if len(candidates) == 0:
        raise ValueError("need at least one candidate")
    best_idx = 0
    best_score = -math.inf
    for idx, plan in enumerate(candidates):
        score = _window_min_clearance(state, extract_executable(plan, cfg), env)
        if score > best_score:
            best_idx, best_score = idx, score
    return candidates[best_idx]


def run_episode(
    policy: str,
    env: Environment,
    rng: np.random.Generator,
    seed: int = 0,
    model: NoisePredictor | None = None,
    sched: NoiseSchedule | None = None,
    norm: Normalizer | None = None,
    policy_cfg: PolicyConfig = PolicyConfig(),
    pac_cfg: PACConfig = PACConfig(),
    mppi_cfg: MPPIConfig = MPPIConfig(),
    gains: FormationGains = FormationGains(),
    max_steps: int = T_MAX,
) -> EpisodeRecord:
    """Roll one episode; followers track at a fine substep while the midpoint
    executes planner actions every DT."""
    if policy not in ("diffusion", "pac", "mppi"):
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "diffusion" and (model is None or sched is None or norm is None):
        raise ValueError("diffusion policy needs model, schedule and normalizer")

    state = start_state()
    tracker = FormationTracker(gains=gains)
    mppi = MPPIController(mppi_cfg) if policy == "mppi" else None
    history = [state]
    queue: list[np.ndarray] = []

    states, actions, leaders_log, followers_log, clear_log = [], [], [], [], []
    t = 0
    while True:
        leaders = leaders_from_midpoint(state)
        followers = tuple(UnicycleState(p, (1.0, 0.0)) for p in tracker.follower_positions())
        fs = FormationState(midpoint=state, leaders=leaders, followers=followers, time_step=t)
        outcome = check_termination(fs, env, t_max=max_steps)
        if outcome != "running":
            break

        if policy == "pac":
            action = pac_command(state, env, pac_cfg)
        elif policy == "mppi":
            action = mppi.command(state, env, rng)
        else:
            if not queue:
                obs = build_observation(history, env, norm, policy_cfg)
                plans = sample_plans(obs, model, sched, rng, norm, policy_cfg, count=policy_cfg.adaptive_candidates)
                plan = adaptive_select(plans, state, env, policy_cfg) if policy_cfg.adaptive_candidates > 1 else plans[0]
                queue = list(extract_executable(plan, policy_cfg))
            a = queue.pop(0)
            action = (float(a[0]), float(a[1]))

        state = step_midpoint(state, action)
        leaders = leaders_from_midpoint(state)
        tracker.set_leaders(*leaders)
        tracker.step(DT)
        t += 1
        history.append(state)
        if len(history) > policy_cfg.obs_horizon:
            history = history[-policy_cfg.obs_horizon :]

        follower_pos = tracker.follower_positions()
        pts = [state.position, leaders[0], leaders[1], *follower_pos]
        states.append(state.as_vector())
        actions.append([state.lin_vel, state.ang_vel])
        leaders_log.append([list(leaders[0]), list(leaders[1])])
        followers_log.append([list(p) for p in follower_pos])
        clear_log.append(min(clearance(p, env) for p in pts))

    n_f = len(FormationTracker().follower_positions())
    return EpisodeRecord(
        env=env,
        policy=policy,
        seed=seed,
        outcome=outcome,
        states=np.array(states).reshape(t, 6),
        actions=np.array(actions).reshape(t, 2),
        leaders=np.array(leaders_log).reshape(t, 2, 2),
        followers=np.array(followers_log).reshape(t, n_f, 2),
        clearance=np.array(clear_log).reshape(t),
    )
