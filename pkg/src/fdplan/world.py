"""2D environment: midpoint/bar kinematics, follower unicycles, obstacles.

Units are meters, seconds, radians. The planner acts on the midpoint of a
rigid bar carried by the two leaders; followers are unicycles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Planner step and episode cap.
DT = 0.1
T_MAX = 600

# Midpoint action clamps. Forward speed is non-negative.
V_MIN, V_MAX = 0.0, 0.8
W_MAX = 1.5

BAR_LENGTH = 1.0
SUCCESS_RADIUS = 0.3

# Obstacle sampling region (corner-to-corner square) and goal box.
OBSTACLE_REGION = (1.5, 6.0, 1.5, 6.0)  # xmin, xmax, ymin, ymax
GOAL_BOX = (2.5, 4.5, 6.2, 6.8)
RADIUS_RANGE = (0.3, 0.8)
START_CLEAR = 0.8

GRID_SIZE = 7
NO_OBSTACLE_CLEARANCE = 1e9

START_MIDPOINT = (0.0, 0.0)
START_HEADING = math.pi / 2


class InvalidActionError(ValueError):
    pass


class EnvironmentGenerationError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class Environment:
    obstacles: tuple[Obstacle, ...]
    goal: tuple[float, float]
    seed: int = 0
    obstacle_region: tuple[float, float, float, float] = OBSTACLE_REGION

    def to_json_obj(self) -> dict:
        return {
            "seed": self.seed,
            "goal": [self.goal[0], self.goal[1]],
            "obstacles": [{"c": [o.center[0], o.center[1]], "r": o.radius} for o in self.obstacles],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Environment":
        return cls(
            obstacles=tuple(Obstacle((o["c"][0], o["c"][1]), o["r"]) for o in obj["obstacles"]),
            goal=(obj["goal"][0], obj["goal"][1]),
            seed=int(obj["seed"]),
        )


@dataclass(frozen=True)
class MidpointState:
    """Pose and twist of the leader-bar midpoint."""

    x: float
    y: float
    heading: float
    lin_vel: float = 0.0
    ang_vel: float = 0.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def as_vector(self) -> np.ndarray:
        """[x, y, phi, xdot, ydot, omega] with the twist resolved in the world frame."""
        return np.array(
            [
                self.x,
                self.y,
                self.heading,
                self.lin_vel * math.cos(self.heading),
                self.lin_vel * math.sin(self.heading),
                self.ang_vel,
            ]
        )


@dataclass(frozen=True)
class UnicycleState:
    position: tuple[float, float]
    heading_vec: tuple[float, float]


@dataclass(frozen=True)
class FormationState:
    midpoint: MidpointState
    leaders: tuple[tuple[float, float], tuple[float, float]]
    followers: tuple[UnicycleState, ...]
    time_step: int


def start_state() -> MidpointState:
    return MidpointState(START_MIDPOINT[0], START_MIDPOINT[1], START_HEADING)


def clamp_action(v: float, w: float) -> tuple[float, float]:
    return (min(max(v, V_MIN), V_MAX), min(max(w, -W_MAX), W_MAX))


def step_midpoint(state: MidpointState, action: tuple[float, float], dt: float = DT) -> MidpointState:
    """Unicycle Euler update of the midpoint; the action is clamped first."""
    v, w = float(action[0]), float(action[1])
    if not (math.isfinite(v) and math.isfinite(w)):
        raise InvalidActionError(f"non-finite action ({v}, {w})")
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, w = clamp_action(v, w)
    return MidpointState(
        x=state.x + v * math.cos(state.heading) * dt,
        y=state.y + v * math.sin(state.heading) * dt,
        heading=wrap_angle(state.heading + w * dt),
        lin_vel=v,
        ang_vel=w,
    )


def leaders_from_midpoint(
    state: MidpointState, bar_length: float = BAR_LENGTH
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Bar endpoints: midpoint -/+ (bar/2)*(sin phi, -cos phi)."""
    if bar_length <= 0:
        raise ValueError("bar_length must be positive")
    ox = 0.5 * bar_length * math.sin(state.heading)
    oy = -0.5 * bar_length * math.cos(state.heading)
    return ((state.x - ox, state.y - oy), (state.x + ox, state.y + oy))


def step_unicycle(state: UnicycleState, u: float, w: float, dt: float) -> UnicycleState:
    """Follower kinematics: p' = p + h u dt, h rotated by w and renormalized."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    px, py = state.position
    hx, hy = state.heading_vec
    px += hx * u * dt
    py += hy * u * dt
    # planar reduction of hdot = omega x h: perpendicular is (-hy, hx)
    nx = hx - dt * w * hy
    ny = hy + dt * w * hx
    norm = math.hypot(nx, ny)
    return UnicycleState((px, py), (nx / norm, ny / norm))


def encode_obstacle_grid(env: Environment) -> np.ndarray:
    """7x7 obstacle-radius grid, row-major flattened.

    Cell (floor(cx) - 1, floor(cy) - 1), zero-based and clipped to [0, 6];
    colliding obstacles keep the largest radius.
    """
    grid = np.zeros((GRID_SIZE, GRID_SIZE))
    for ob in env.obstacles:
        ix = min(max(int(math.floor(ob.center[0])) - 1, 0), GRID_SIZE - 1)
        iy = min(max(int(math.floor(ob.center[1])) - 1, 0), GRID_SIZE - 1)
        grid[ix, iy] = max(grid[ix, iy], ob.radius)
    return grid.reshape(-1)


def clearance(point: tuple[float, float], env: Environment) -> float:
    """Signed distance to the nearest obstacle surface; negative inside."""
    if not env.obstacles:
        return NO_OBSTACLE_CLEARANCE
    px, py = point
    return min(math.hypot(px - o.center[0], py - o.center[1]) - o.radius for o in env.obstacles)


def sample_environment(rng: np.random.Generator, seed: int = 0, n_obstacles: int | None = None) -> Environment:
    """Random cluttered environment with rejection resampling.

    3-5 obstacles (or exactly n_obstacles when given), radii in [0.3, 0.8],
    centers in the obstacle region; an obstacle is rejected if it overlaps a
    0.8 m disc around the start or the goal, or overlaps another obstacle by
    more than half the smaller radius.
    """
    xmin, xmax, ymin, ymax = OBSTACLE_REGION
    gx = rng.uniform(GOAL_BOX[0], GOAL_BOX[1])
    gy = rng.uniform(GOAL_BOX[2], GOAL_BOX[3])
    count = int(rng.integers(3, 6)) if n_obstacles is None else n_obstacles
    obstacles: list[Obstacle] = []
    tries = 0
    while len(obstacles) < count:
        tries += 1
        if tries > 1000:
            raise EnvironmentGenerationError(f"rejection sampling failed after {tries} tries (seed {seed})")
        cx = rng.uniform(xmin, xmax)
        cy = rng.uniform(ymin, ymax)
        r = rng.uniform(*RADIUS_RANGE)
        if math.hypot(cx - START_MIDPOINT[0], cy - START_MIDPOINT[1]) - r <= START_CLEAR:
            continue
        if math.hypot(cx - gx, cy - gy) - r <= START_CLEAR:
            continue
        ok = True
        for o in obstacles:
            depth = o.radius + r - math.hypot(cx - o.center[0], cy - o.center[1])
            if depth > 0.5 * min(o.radius, r):
                ok = False
                break
        if ok:
            obstacles.append(Obstacle((cx, cy), r))
    return Environment(obstacles=tuple(obstacles), goal=(gx, gy), seed=seed)


def check_termination(fs: FormationState, env: Environment, t_max: int = T_MAX) -> str:
    """'running' | 'success' | 'collision' | 'timeout'; collision wins ties."""
    points = [fs.midpoint.position, fs.leaders[0], fs.leaders[1]]
    points += [f.position for f in fs.followers]
    if any(clearance(pt, env) < 0.0 for pt in points):
        return "collision"
    if math.hypot(fs.midpoint.x - env.goal[0], fs.midpoint.y - env.goal[1]) < SUCCESS_RADIUS:
        return "success"
    if fs.time_step >= t_max:
        return "timeout"
    return "running"
