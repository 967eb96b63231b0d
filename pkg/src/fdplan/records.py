"""Episode records and their NDJSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .world import Environment

OUTCOMES = ("success", "collision", "timeout")


@dataclass
class EpisodeRecord:
    """One rollout: per-step arrays share the same length (one row per executed
    action; the start pose is the fixed scenario start)."""

    env: Environment
    policy: str
    seed: int
    outcome: str
    states: np.ndarray  # (L, 6) midpoint vectors after each step
    actions: np.ndarray  # (L, 2)
    leaders: np.ndarray  # (L, 2, 2)
    followers: np.ndarray  # (L, n_f, 2)
    clearance: np.ndarray  # (L,)

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"bad outcome {self.outcome!r}")
        lengths = {len(self.states), len(self.actions), len(self.leaders), len(self.followers), len(self.clearance)}
        if len(lengths) != 1:
            raise ValueError(f"per-step arrays disagree on length: {lengths}")

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    def to_json_line(self) -> str:
        obj = {
            "env": self.env.to_json_obj(),
            "policy": self.policy,
            "seed": self.seed,
            "outcome": self.outcome,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "leaders": self.leaders.tolist(),
            "followers": self.followers.tolist(),
            "clearance": self.clearance.tolist(),
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json_line(cls, line: str) -> "EpisodeRecord":
        obj = json.loads(line)
        return cls(
            env=Environment.from_json_obj(obj["env"]),
            policy=obj["policy"],
            seed=int(obj["seed"]),
            outcome=obj["outcome"],
            states=np.array(obj["states"], dtype=float),
            actions=np.array(obj["actions"], dtype=float),
            leaders=np.array(obj["leaders"], dtype=float),
            followers=np.array(obj["followers"], dtype=float),
            clearance=np.array(obj["clearance"], dtype=float),
        )


def write_dataset(records: list[EpisodeRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json_line())
            fh.write("\n")


def read_dataset(path: str) -> list[EpisodeRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(EpisodeRecord.from_json_line(line))
    return out
