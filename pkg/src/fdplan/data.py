"""Demonstration dataset generation, training driver, metrics and rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .controllers import FormationGains, MPPIConfig, PACConfig
from .diffusion import add_noise, cosine_beta_schedule
from .network import (
    BASE_LR,
    EMAState,
    NetworkConfig,
    NoisePredictor,
    OptimizerState,
    adamw_step,
    apply_ema,
    build_model,
    load_checkpoint,
    lr_at_step,
    ema_update,
    parameter_store,
    save_checkpoint,
)
from .policy import Normalizer, PolicyConfig, build_observation, fit_normalizer, run_episode
from .records import EpisodeRecord
from .world import DT, Environment, MidpointState, sample_environment, start_state

METRIC_KEYS = (
    "path_length",
    "path_optimality",
    "tracking_deviation",
    "min_clearance",
    "mean_clearance",
    "mean_control",
    "control_smoothness",
    "energy",
    "time",
    "mean_velocity",
    "mean_curvature",
    "peak_curvature",
    "jerk",
    "orientation_stability",
)


class DatasetGenerationError(RuntimeError):
    pass


def generate_dataset(
    episodes: int,
    seed: int,
    pac_cfg: PACConfig = PACConfig(),
    gains: FormationGains = FormationGains(),
    max_attempts: int | None = None,
    progress=None,
) -> list[EpisodeRecord]:
    """PAC demonstrations on sampled environments; only successes are kept."""
    records: list[EpisodeRecord] = []
    attempt = 0
    limit = max_attempts if max_attempts is not None else max(1000, 20 * episodes)
    while len(records) < episodes:
        if attempt >= 1000 and len(records) < attempt // 10:
            raise DatasetGenerationError(
                f"PAC success yield below 10% ({len(records)}/{attempt}); environments too hard"
            )
        if attempt >= limit:
            raise DatasetGenerationError(f"gave up after {attempt} attempts with {len(records)} successes")
        env_seed = seed + attempt
        env = sample_environment(np.random.default_rng(env_seed), seed=env_seed)
        rec = run_episode("pac", env, np.random.default_rng(env_seed), seed=env_seed, pac_cfg=pac_cfg, gains=gains)
        attempt += 1
        if rec.outcome == "success":
            records.append(rec)
            if progress:
                progress(len(records), attempt)
    return records


@dataclass(frozen=True)
class TrainingSample:
    obs: np.ndarray  # (obs_dim,)
    actions: np.ndarray  # (T_p, 2) normalized


def window_samples(
    record: EpisodeRecord,
    cfg: PolicyConfig,
    norm: Normalizer,
) -> list[TrainingSample]:
    """Stride-1 sliding windows over one episode.

    Anchor t pairs the observation before action t with the normalized action
    rows a_{t-T_o+1} .. a_{t-T_o+T_p}; indices are clamped to the episode so
    the head repeats the first action and the tail repeats the last.
    """
    length = record.num_steps
    if length < 1:
        raise ValueError("record must contain at least one step")
    # executed states: start pose, then the post-step states
    pre_states = [start_state()]
    for row in record.states[:-1]:
        pre_states.append(
            MidpointState(x=row[0], y=row[1], heading=row[2], lin_vel=math.hypot(row[3], row[4]), ang_vel=row[5])
        )
    norm_actions = norm.normalize_actions(record.actions)
    out = []
    for t in range(length):
        history = pre_states[max(0, t - cfg.obs_horizon + 1) : t + 1]
        obs = build_observation(history, record.env, norm, cfg)
        idx = np.clip(np.arange(t - cfg.obs_horizon + 1, t - cfg.obs_horizon + 1 + cfg.pred_horizon), 0, length - 1)
        out.append(TrainingSample(obs=obs, actions=norm_actions[idx]))
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 64
    base_lr: float = BASE_LR
    weight_decay: float = 1e-6
    warmup: int = 1000
    ema_power: float = 0.75
    diffusion_steps: int = 100
    seed: int = 0


@dataclass
class TrainResult:
    checkpoint_path: str
    val_losses: list[float]
    final_loss: float


def train(
    records: list[EpisodeRecord],
    net_cfg: NetworkConfig,
    policy_cfg: PolicyConfig,
    train_cfg: TrainConfig,
    out_path: str,
    progress=None,
) -> TrainResult:
    """Algorithm-1 epsilon-prediction training; the checkpoint carries EMA
    weights for inference alongside the raw parameters."""
    if not records:
        raise ValueError("empty dataset")
    norm = fit_normalizer(records)
    samples: list[TrainingSample] = []
    for rec in records:
        samples.extend(window_samples(rec, policy_cfg, norm))
    obs_all = np.stack([s.obs for s in samples]).astype(np.float32)
    act_all = np.stack([s.actions for s in samples]).astype(np.float32)
    n = len(samples)

    sched = cosine_beta_schedule(train_cfg.diffusion_steps)
    model = build_model(net_cfg, seed=train_cfg.seed)
    params = parameter_store(model)
    opt = OptimizerState.for_params(params, weight_decay=train_cfg.weight_decay)
    ema = EMAState.for_params(params, power=train_cfg.ema_power)

    rng = np.random.default_rng(train_cfg.seed)
    batch = train_cfg.batch_size
    steps_per_epoch = max(1, math.ceil(n / batch))
    total_steps = train_cfg.epochs * steps_per_epoch

    # fixed validation draw, independent of the training stream
    val_rng = np.random.default_rng(train_cfg.seed + 1)
    val_idx = val_rng.integers(0, n, size=min(256, n))
    val_k = val_rng.integers(0, train_cfg.diffusion_steps, size=len(val_idx))
    val_eps = val_rng.standard_normal((len(val_idx),) + act_all.shape[1:])
    val_noisy = add_noise(act_all[val_idx], val_eps, val_k, sched)
    val_tensors = (
        torch.as_tensor(val_noisy, dtype=torch.float32),
        torch.as_tensor(val_k, dtype=torch.long),
        torch.as_tensor(obs_all[val_idx], dtype=torch.float32),
        torch.as_tensor(val_eps, dtype=torch.float32),
    )

    def val_loss() -> float:
        with torch.no_grad():
            pred = model(val_tensors[0], val_tensors[1], val_tensors[2])
            return float(torch.mean((pred - val_tensors[3]) ** 2))

    val_losses = [val_loss()]
    step = 0
    last = 0.0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * batch : (b + 1) * batch]
            if idx.size == 0:
                continue
            clean = act_all[idx]
            k = rng.integers(0, train_cfg.diffusion_steps, size=len(idx))
            eps = rng.standard_normal(clean.shape)
            noisy = add_noise(clean, eps, k, sched)
            pred = model(
                torch.as_tensor(noisy, dtype=torch.float32),
                torch.as_tensor(k, dtype=torch.long),
                torch.as_tensor(obs_all[idx], dtype=torch.float32),
            )
            loss = torch.mean((pred - torch.as_tensor(eps, dtype=torch.float32)) ** 2)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            adamw_step(params, grads, opt, lr_at_step(step, total_steps, train_cfg.base_lr, train_cfg.warmup))
            ema_update(ema, params)
            step += 1
            last = float(loss.detach())
        val_losses.append(val_loss())
        if progress:
            progress(epoch + 1, train_cfg.epochs, val_losses[-1])

    save_checkpoint(model, ema, norm.to_meta(), out_path, train_step=step)
    return TrainResult(checkpoint_path=out_path, val_losses=val_losses, final_loss=last)


def load_policy(path: str, use_ema: bool = True) -> tuple[NoisePredictor, Normalizer]:
    """Model ready for inference (EMA weights by default) plus its normalizer."""
    model, ema, norm_meta, _ = load_checkpoint(path)
    if use_ema:
        apply_ema(model, ema)
    model.eval()
    return model, Normalizer.from_meta(norm_meta)


def compute_metrics(record: EpisodeRecord) -> dict:
    """Per-episode metric row over the midpoint path (planner step DT)."""
    if record.num_steps < 2:
        raise ValueError("need at least 2 steps to compute metrics")
    start = start_state()
    pos = np.vstack([[start.x, start.y], record.states[:, 0:2]])
    headings = np.concatenate([[start.heading], record.states[:, 2]])
    vel = record.states[:, 3:5]
    actions = record.actions

    deltas = np.diff(pos, axis=0)
    seg = np.hypot(deltas[:, 0], deltas[:, 1])
    path_length = float(seg.sum())
    goal = np.array(record.env.goal)
    straight = float(np.hypot(goal[0] - start.x, goal[1] - start.y))

    line = goal - np.array([start.x, start.y])
    line_n = line / max(np.linalg.norm(line), 1e-12)
    rel = record.states[:, 0:2] - np.array([start.x, start.y])
    perp = np.abs(rel[:, 0] * line_n[1] - rel[:, 1] * line_n[0])

    dphi = np.abs(np.array([_angdiff(a, b) for a, b in zip(headings[1:], headings[:-1])]))
    curvature = dphi / np.maximum(seg, 1e-6)

    acc2 = np.diff(vel, n=2, axis=0)
    jerk = float(np.mean(np.hypot(acc2[:, 0], acc2[:, 1])) / DT**2) if len(acc2) else 0.0

    a_norm = np.hypot(actions[:, 0], actions[:, 1])
    da = np.diff(actions, axis=0)
    steps = record.num_steps
    return {
        "path_length": path_length,
        "path_optimality": straight / path_length if path_length > 0 else 1.0,
        "tracking_deviation": float(perp.mean()),
        "min_clearance": float(record.clearance.min()),
        "mean_clearance": float(record.clearance.mean()),
        "mean_control": float(a_norm.mean()),
        "control_smoothness": float(np.mean(np.hypot(da[:, 0], da[:, 1])) / DT),
        "energy": float((a_norm**2).sum() * DT),
        "time": steps * DT,
        "mean_velocity": path_length / (steps * DT),
        "mean_curvature": float(curvature.mean()),
        "peak_curvature": float(curvature.max()),
        "jerk": jerk,
        "orientation_stability": float(np.std(actions[:, 1])),
    }


def _angdiff(a: float, b: float) -> float:
    d = a - b
    while d > math.pi:
        d -= 2 * math.pi
    while d <= -math.pi:
        d += 2 * math.pi
    return d


@dataclass
class MetricsReport:
    policy: str
    episodes: int
    successes: int
    collisions: int
    timeouts: int
    aggregates: dict  # metric -> (mean, std) over successful episodes
    rows: list  # (episode_id, outcome, metrics-or-None)

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.episodes if self.episodes else 0.0

    def to_json_obj(self) -> dict:
        return {
            "policy": self.policy,
            "note": "quality metrics aggregated over successful episodes only",
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "failures": {"collision": self.collisions, "timeout": self.timeouts},
            "aggregates": {k: {"mean": m, "std": s} for k, (m, s) in self.aggregates.items()},
            "rows": [
                {"episode": i, "outcome": o, "metrics": m}
                for i, o, m in self.rows
            ],
        }


def evaluate_policy(
    policy: str,
    envs: list[Environment],
    seed: int = 0,
    model=None,
    sched=None,
    norm=None,
    policy_cfg: PolicyConfig = PolicyConfig(),
    pac_cfg: PACConfig = PACConfig(),
    mppi_cfg: MPPIConfig = MPPIConfig(),
    gains: FormationGains = FormationGains(),
    progress=None,
) -> tuple[MetricsReport, list[EpisodeRecord]]:
    """Paired evaluation: episode i always uses rng seed + i."""
    if not envs:
        raise ValueError("need at least one environment")
    recs: list[EpisodeRecord] = []
    for i, env in enumerate(envs):
        rec = run_episode(
            policy,
            env,
            np.random.default_rng(seed + i),
            seed=seed + i,
            model=model,
            sched=sched,
            norm=norm,
            policy_cfg=policy_cfg,
            pac_cfg=pac_cfg,
            mppi_cfg=mppi_cfg,
            gains=gains,
        )
        recs.append(rec)
        if progress:
            progress(i + 1, len(envs), rec.outcome)
    return aggregate_records(policy, recs), recs


def aggregate_records(policy: str, recs: list[EpisodeRecord]) -> MetricsReport:
    """Fold per-episode records (in episode-id order) into a MetricsReport."""
    rows = []
    per_metric: dict[str, list[float]] = {k: [] for k in METRIC_KEYS}
    counts = {"success": 0, "collision": 0, "timeout": 0}
    for i, rec in enumerate(recs):
        counts[rec.outcome] += 1
        metrics = None
        if rec.outcome == "success":
            metrics = compute_metrics(rec)
            for k in METRIC_KEYS:
                per_metric[k].append(metrics[k])
        rows.append((i, rec.outcome, metrics))
    aggregates = {
        k: (float(np.mean(v)), float(np.std(v))) if v else (float("nan"), float("nan"))
        for k, v in per_metric.items()
    }
    return MetricsReport(
        policy=policy,
        episodes=len(recs),
        successes=counts["success"],
        collisions=counts["collision"],
        timeouts=counts["timeout"],
        aggregates=aggregates,
        rows=rows,
    )


def comparison_csv(reports: list[MetricsReport]) -> str:
    """One row per metric, one column per policy."""
    lines = ["metric," + ",".join(r.policy for r in reports)]
    lines.append("success_rate," + ",".join(f"{r.success_rate:.4f}" for r in reports))
    for key in METRIC_KEYS:
        cells = []
        for r in reports:
            m, s = r.aggregates[key]
            cells.append("nan" if math.isnan(m) else f"{m:.6f}+-{s:.6f}")
        lines.append(f"{key}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def render_svg(record: EpisodeRecord, env: Environment, path: str) -> None:
    """Deterministic SVG of one episode: obstacles, goal, and agent paths."""

    def pt(x, y):
        return f"{x:.4f},{-y:.4f}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="-2.5 -8.0 10.5 10.5" width="630" height="630">',
        '<rect x="-2.5" y="-8.0" width="10.5" height="10.5" fill="white"/>',
    ]
    for ob in env.obstacles:
        parts.append(
            f'<circle cx="{ob.center[0]:.4f}" cy="{-ob.center[1]:.4f}" r="{ob.radius:.4f}" '
            'fill="#b0b0b0" stroke="#606060" stroke-width="0.02"/>'
        )
    parts.append(
        f'<circle cx="{env.goal[0]:.4f}" cy="{-env.goal[1]:.4f}" r="0.15" fill="none" '
        'stroke="green" stroke-width="0.05"/>'
    )
    mid = " ".join(pt(x, y) for x, y in record.states[:, 0:2])
    parts.append(f'<polyline points="{mid}" fill="none" stroke="blue" stroke-width="0.04"/>')
    for li, color in ((0, "#4060ff"), (1, "#40a0ff")):
        pts = " ".join(pt(x, y) for x, y in record.leaders[:, li, :])
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="0.02"/>')
    for fi in range(record.followers.shape[1]):
        pts = " ".join(pt(x, y) for x, y in record.followers[:, fi, :])
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#ff8040" stroke-width="0.02"/>')
    sx, sy = record.states[0, 0], record.states[0, 1]
    ex, ey = record.states[-1, 0], record.states[-1, 1]
    parts.append(f'<rect x="{sx - 0.08:.4f}" y="{-sy - 0.08:.4f}" width="0.16" height="0.16" fill="black"/>')
    parts.append(f'<circle cx="{ex:.4f}" cy="{-ey:.4f}" r="0.08" fill="red"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
