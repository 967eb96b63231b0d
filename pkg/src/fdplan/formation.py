"""The four-agent experiment formation and a fast follower tracking loop.

The scenario is a unit square: leaders 1-2 carry the bar, followers 3-4 hold
distance constraints below them. Follower integration runs at a fine substep
because the sliding-mode law is discontinuous.
"""

from __future__ import annotations

import math

import numpy as np

from .controllers import FormationGains
from .graphs import DirectedGraph, Framework

EXPERIMENT_EDGES = ((1, 2), (1, 4), (1, 3), (2, 4), (3, 4))
EXPERIMENT_DESIRED_SQ = (1.0, 2.0, 1.0, 1.0, 1.0)

FOLLOWER_STARTS = ((-0.2, -0.9), (0.4, -1.0))
FOLLOWER_HEADINGS = ((math.cos(math.pi), math.sin(math.pi)), (0.0, 1.0))  # 180 deg, 90 deg

FOLLOWER_DT = 1e-3


def experiment_graph() -> DirectedGraph:
    return DirectedGraph(n=4, edges=EXPERIMENT_EDGES, n_leaders=2)


def experiment_framework(positions) -> Framework:
    return Framework(experiment_graph(), np.asarray(positions, dtype=float), np.array(EXPERIMENT_DESIRED_SQ))


def desired_positions() -> np.ndarray:
    """Unit-square realization matching the desired squared lengths."""
    return np.array([[-0.5, 0.0], [0.5, 0.0], [-0.5, -1.0], [0.5, -1.0]])


class FormationTracker:
    """Integrates the two followers under the sliding-mode distance law.

    Leader positions are imposed from outside each call; the follower control
    is recomputed every substep. Plain-float arithmetic: this inner loop runs
    hundreds of times per planner step.
    """

    def __init__(
        self,
        gains: FormationGains = FormationGains(),
        boundary_layer: float = 0.0,
        substep: float = FOLLOWER_DT,
    ):
        self.gains = gains
        self.boundary_layer = boundary_layer
        self.substep = substep
        self.positions = [list(p) for p in ([-0.5, 0.0], [0.5, 0.0])] + [list(p) for p in FOLLOWER_STARTS]
        self.headings = [list(h) for h in FOLLOWER_HEADINGS]
        # follower -> [(neighbor vertex index 0-based, desired squared length)]
        self._neighbors = []
        for i in (3, 4):
            lst = []
            for k, (a, b) in enumerate(EXPERIMENT_EDGES):
                if a == i:
                    lst.append((b - 1, EXPERIMENT_DESIRED_SQ[k]))
                elif b == i:
                    lst.append((a - 1, EXPERIMENT_DESIRED_SQ[k]))
            self._neighbors.append(lst)

    def follower_positions(self) -> list[tuple[float, float]]:
        return [tuple(p) for p in self.positions[2:]]

    def set_leaders(self, leader_a: tuple[float, float], leader_b: tuple[float, float]) -> None:
        self.positions[0] = [leader_a[0], leader_a[1]]
        self.positions[1] = [leader_b[0], leader_b[1]]

    def step(self, duration: float) -> None:
        """Advance followers by `duration` seconds of substeps with leaders held."""
        k1, k2, beta = self.gains.k1, self.gains.k2, self.gains.beta
        delta = self.boundary_layer
        dt = self.substep
        n_sub = max(1, round(duration / dt))
        pos = self.positions
        for _ in range(n_sub):
            for f in (0, 1):
                px, py = pos[2 + f]
                cx = cy = 0.0
                for j, dsq in self._neighbors[f]:
                    zx = px - pos[j][0]
                    zy = py - pos[j][1]
                    e = zx * zx + zy * zy - dsq
                    cx += e * zx
                    cy += e * zy
                if delta > 0.0:
                    sx = min(max(cx / delta, -1.0), 1.0)
                    sy = min(max(cy / delta, -1.0), 1.0)
                else:
                    sx = 0.0 if cx == 0.0 else math.copysign(1.0, cx)
                    sy = 0.0 if cy == 0.0 else math.copysign(1.0, cy)
                hx, hy = self.headings[f]
                cux = k1 * cx + beta * sx
                cuy = k1 * cy + beta * sy
                cwx = k2 * cx + beta * sx
                cwy = k2 * cy + beta * sy
                u = -(hx * cux + hy * cuy)
                w = -(hx * cwy - hy * cwx)
                pos[2 + f][0] = px + hx * u * dt
                pos[2 + f][1] = py + hy * u * dt
                nx = hx - dt * w * hy
                ny = hy + dt * w * hx
                norm = math.hypot(nx, ny)
                self.headings[f] = [nx / norm, ny / norm]

    def framework(self) -> Framework:
        return experiment_framework(self.positions)
