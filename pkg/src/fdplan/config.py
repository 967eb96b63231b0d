"""Run configuration: a single JSON document with strict key validation."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .controllers import FormationGains, MPPIConfig, PACConfig
from .data import TrainConfig
from .network import BASE_LR, NetworkConfig
from .policy import PolicyConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "world": {
        "t_max": 600,
    },
    "formation": {
        "k1": 35.0,
        "k2": 30.0,
        "beta": 23.0,
        "edges": [[1, 2], [1, 4], [1, 3], [2, 4], [3, 4]],
        "desired_sq": [1.0, 2.0, 1.0, 1.0, 1.0],
        "follower_starts": [[-0.2, -0.9], [0.4, -1.0]],
        "follower_headings_deg": [180.0, 90.0],
        "boundary_layer": 0.0,
        "substep": 1e-3,
    },
    "pac": {
        "attract_gain": 1.0,
        "repulse_gain": 0.6,
        "influence_radius": 1.2,
        "lateral_gain": 0.8,
        "v_max": 0.5,
        "w_max": 1.5,
        "goal_tolerance": 0.3,
    },
    "mppi": {
        "horizon": 30,
        "num_samples": 256,
        "temperature": 1.0,
        "noise_std": [0.3, 0.5],
        "w_goal": 10.0,
        "w_collision": 100.0,
        "w_control": 0.1,
        "safety_margin": 0.15,
    },
    "diffusion": {
        "down_dims": [32, 64, 128],
        "kernel_size": 5,
        "groupnorm_groups": 8,
        "step_embed_dim": 64,
        "pred_horizon": 64,
        "obs_horizon": 2,
        "action_horizon": 10,
        "diffusion_steps": 100,
        "adaptive_candidates": 1,
        "epochs": 6,
        "batch_size": 64,
        "base_lr": BASE_LR,
        "weight_decay": 1e-6,
        "warmup": 1000,
        "ema_power": 0.75,
    },
    "seeds": {
        "data": 0,
        "train": 0,
        "eval": 0,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls(raw=_merge(DEFAULTS, data))

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    @property
    def t_max(self) -> int:
        return int(self.raw["world"]["t_max"])

    @property
    def gains(self) -> FormationGains:
        f = self.raw["formation"]
        return FormationGains(k1=f["k1"], k2=f["k2"], beta=f["beta"])

    @property
    def pac(self) -> PACConfig:
        p = self.raw["pac"]
        return PACConfig(**p)

    @property
    def mppi(self) -> MPPIConfig:
        m = dict(self.raw["mppi"])
        m["noise_std"] = tuple(m["noise_std"])
        return MPPIConfig(**m)

    @property
    def policy(self) -> PolicyConfig:
        d = self.raw["diffusion"]
        return PolicyConfig(
            pred_horizon=d["pred_horizon"],
            obs_horizon=d["obs_horizon"],
            action_horizon=d["action_horizon"],
            diffusion_steps=d["diffusion_steps"],
            adaptive_candidates=d["adaptive_candidates"],
        )

    @property
    def network(self) -> NetworkConfig:
        d = self.raw["diffusion"]
        return NetworkConfig(
            down_dims=tuple(d["down_dims"]),
            kernel_size=d["kernel_size"],
            groupnorm_groups=d["groupnorm_groups"],
            step_embed_dim=d["step_embed_dim"],
            cond_dim=self.policy.obs_dim,
        )

    @property
    def train(self) -> TrainConfig:
        d = self.raw["diffusion"]
        return TrainConfig(
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            base_lr=d["base_lr"],
            weight_decay=d["weight_decay"],
            warmup=d["warmup"],
            ema_power=d["ema_power"],
            diffusion_steps=d["diffusion_steps"],
            seed=self.seed("train"),
        )

    def seed(self, which: str) -> int:
        return int(self.raw["seeds"][which])
