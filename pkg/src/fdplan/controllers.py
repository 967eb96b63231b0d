"""Follower formation tracking law, the PAC demonstrator, and the MPPI baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import Framework
from .world import DT, Environment, MidpointState, clamp_action, clearance, wrap_angle


@dataclass(frozen=True)
class FormationGains:
    k1: float = 35.0
    k2: float = 30.0
    beta: float = 23.0

    def __post_init__(self):
        if min(self.k1, self.k2, self.beta) <= 0:
            raise ValueError("formation gains must be positive")


@dataclass(frozen=True)
class PACConfig:
    attract_gain: float = 1.0
    repulse_gain: float = 0.6
    influence_radius: float = 1.2
    lateral_gain: float = 0.8
    v_max: float = 0.5
    w_max: float = 1.5
    goal_tolerance: float = 0.3

    def __post_init__(self):
        vals = (self.attract_gain, self.repulse_gain, self.influence_radius,
                self.lateral_gain, self.v_max, self.w_max, self.goal_tolerance)
        if min(vals) <= 0:
            raise ValueError("PAC parameters must be positive")


@dataclass(frozen=True)
class MPPIConfig:
    horizon: int = 30
    num_samples: int = 256
    temperature: float = 1.0
    noise_std: tuple[float, float] = (0.3, 0.5)
    w_goal: float = 10.0
    w_collision: float = 100.0
    w_control: float = 0.1
    safety_margin: float = 0.15

    def __post_init__(self):
        if self.horizon < 1 or self.num_samples < 1:
            raise ValueError("horizon and num_samples must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def chi(i: int, fw: Framework) -> np.ndarray:
    """Distance-error force sum_{j ~ i} (d_ij^2 - d*_ij^2)(p_i - p_j).

    Neighbors are taken over undirected adjacency. Translation-invariant:
    only relative positions enter.
    """
    neighbors = []
    for k, (a, b) in enumerate(fw.graph.edges):
        if a == i:
            neighbors.append((b, k))
        elif b == i:
            neighbors.append((a, k))
    if not neighbors:
        raise ValueError(f"vertex {i} has no neighbors")
    p = fw.positions
    out = np.zeros(2)
    for j, k in neighbors:
        z = p[i - 1] - p[j - 1]
        out += (z @ z - fw.desired_sq[k]) * z
    return out


def _sign_or_sat(c: np.ndarray, boundary_layer: float) -> np.ndarray:
    if boundary_layer > 0.0:
        return np.clip(c / boundary_layer, -1.0, 1.0)
    return np.sign(c)


def formation_command(
    i: int,
    fw: Framework,
    heading: tuple[float, float],
    gains: FormationGains = FormationGains(),
    boundary_layer: float = 0.0,
) -> tuple[float, float]:
    """Sliding-mode distance law for follower i.

    u = -h.(k1 chi + beta s), omega = -h x (k2 chi + beta s) with s the
    componentwise sign of chi (sign(0) = 0), so the follower descends the
    distance-error potential. boundary_layer > 0 replaces sign with a
    saturation of that half-width, removing chatter near the surface.
    """
    c = chi(i, fw)
    s = _sign_or_sat(c, boundary_layer)
    hx, hy = heading
    cu = gains.k1 * c + gains.beta * s
    cw = gains.k2 * c + gains.beta * s
    u = -(hx * cu[0] + hy * cu[1])
    w = -(hx * cw[1] - hy * cw[0])
    return (u, w)


def _blocking_obstacle(px: float, py: float, env: Environment, inflate: float):
    """Nearest obstacle whose inflated disc intersects the segment to the goal."""
    gx, gy = env.goal
    dx, dy = gx - px, gy - py
    seg = math.hypot(dx, dy)
    if seg < 1e-12:
        return None
    ux, uy = dx / seg, dy / seg
    best = None
    best_t = math.inf
    for ob in env.obstacles:
        ox, oy = ob.center[0] - px, ob.center[1] - py
        t = ox * ux + oy * uy
        if t < 0.0 or t > seg:
            continue
        perp = math.hypot(ox - t * ux, oy - t * uy)
        if perp < ob.radius + inflate and t < best_t:
            best, best_t = ob, t
    return best


def pac_command(state: MidpointState, env: Environment, cfg: PACConfig = PACConfig()) -> tuple[float, float]:
    """Potential-field command: attraction + repulsion + lateral detour force."""
    px, py = state.x, state.y
    gx, gy = env.goal
    to_goal = math.hypot(gx - px, gy - py)
    if to_goal < 1e-12:
        return (0.0, 0.0)
    fx = cfg.attract_gain * (gx - px) / to_goal
    fy = cfg.attract_gain * (gy - py) / to_goal

    for ob in env.obstacles:
        dx, dy = px - ob.center[0], py - ob.center[1]
        center_dist = math.hypot(dx, dy)
        surf = center_dist - ob.radius
        if surf < cfg.influence_radius and center_dist > 1e-12:
            d = max(surf, 1e-3)
            mag = cfg.repulse_gain * (1.0 / d - 1.0 / cfg.influence_radius) / (d * d)
            fx += mag * dx / center_dist
            fy += mag * dy / center_dist

    blocking = _blocking_obstacle(px, py, env, inflate=0.2)
    if blocking is not None:
        dx, dy = px - blocking.center[0], py - blocking.center[1]
        n = math.hypot(dx, dy)
        if n > 1e-12:
            ux, uy = dx / n, dy / n
            # two perpendicular detours; keep the one needing less turning
            cands = ((-uy, ux), (uy, -ux))
            angles = [abs(wrap_angle(math.atan2(cy, cx) - state.heading)) for cx, cy in cands]
            lx, ly = cands[0] if angles[0] <= angles[1] else cands[1]
            fx += cfg.lateral_gain * lx
            fy += cfg.lateral_gain * ly

    mag = math.hypot(fx, fy)
    ang_err = wrap_angle(math.atan2(fy, fx) - state.heading)
    v = min(max(mag * math.cos(ang_err), 0.0), cfg.v_max)
    w = min(max(cfg.w_max * ang_err / math.pi * 3.0, -cfg.w_max), cfg.w_max)
    return clamp_action(v, w)


class MPPIController:
    """Sampling-based stochastic MPC over midpoint actions.

    Keeps a warm-started nominal action sequence; one instance per episode.
    """

    def __init__(self, cfg: MPPIConfig = MPPIConfig()):
        self.cfg = cfg
        self.nominal = np.zeros((cfg.horizon, 2))

    def command(self, state: MidpointState, env: Environment, rng: np.random.Generator) -> tuple[float, float]:
        cfg = self.cfg
        n, h = cfg.num_samples, cfg.horizon
        noise = rng.standard_normal((n, h, 2)) * np.array(cfg.noise_std)
        actions = self.nominal[None, :, :] + noise
        # clamp as the world would
        from .world import V_MAX, V_MIN, W_MAX

        actions[:, :, 0] = np.clip(actions[:, :, 0], V_MIN, V_MAX)
        actions[:, :, 1] = np.clip(actions[:, :, 1], -W_MAX, W_MAX)

        costs = self._rollout_costs(state, env, actions)
        costs = costs - costs.min()
        weights = np.exp(-costs / cfg.temperature)
        weights /= weights.sum()
        weighted = np.einsum("n,nha->ha", weights, actions)

        self.nominal = np.vstack([weighted[1:], weighted[-1:]])
        v, w = float(weighted[0, 0]), float(weighted[0, 1])
        return clamp_action(v, w)

    def _rollout_costs(self, state: MidpointState, env: Environment, actions: np.ndarray) -> np.ndarray:
        """Vectorized midpoint rollouts; cost = terminal goal distance +
        clearance hinge + control effort."""
        cfg = self.cfg
        n, h, _ = actions.shape
        x = np.full(n, state.x)
        y = np.full(n, state.y)
        phi = np.full(n, state.heading)
        cost = cfg.w_control * np.sum(actions[:, :, 0] ** 2 + actions[:, :, 1] ** 2, axis=1)

        centers = np.array([o.center for o in env.obstacles]) if env.obstacles else None
        radii = np.array([o.radius for o in env.obstacles]) if env.obstacles else None
        half = 0.5  # bar half-length for endpoint checks

        for t in range(h):
            v = actions[:, t, 0]
            w = actions[:, t, 1]
            x = x + v * np.cos(phi) * DT
            y = y + v * np.sin(phi) * DT
            phi = phi + w * DT
            if centers is not None:
                ox = half * np.sin(phi)
                oy = -half * np.cos(phi)
                clear = np.full(n, np.inf)
                for qx, qy in ((x, y), (x - ox, y - oy), (x + ox, y + oy)):
                    d = np.hypot(qx[:, None] - centers[None, :, 0], qy[:, None] - centers[None, :, 1])
                    clear = np.minimum(clear, (d - radii[None, :]).min(axis=1))
                hinge = np.maximum(cfg.safety_margin - clear, 0.0)
                cost += cfg.w_collision * hinge
        cost += cfg.w_goal * np.hypot(x - env.goal[0], y - env.goal[1])
        return cost


def mppi_command(
    state: MidpointState,
    env: Environment,
    cfg: MPPIConfig,
    rng: np.random.Generator,
    controller: MPPIController | None = None,
) -> tuple[float, float]:
    """One-shot MPPI command; pass a controller to keep warm-start state."""
    if controller is None:
        controller = MPPIController(cfg)
    return controller.command(state, env, rng)
