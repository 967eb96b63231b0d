"""Graph machinery for distance-rigid formations.

Vertices are 1-based. Edge k = (i, j) contributes the relative vector
z_k = p_j - p_i; all edge-indexed vectors and matrices follow the
declaration order of the edge list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Singular values below RANK_RTOL * sigma_max are treated as zero when
# computing the numerical rank of the rigidity matrix.
RANK_RTOL = 1e-9


@dataclass(frozen=True)
class DirectedGraph:
    """A digraph with the first ``n_leaders`` vertices designated leaders."""

    n: int
    edges: tuple[tuple[int, int], ...]
    n_leaders: int = 2

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        if not 2 <= self.n_leaders <= self.n:
            raise ValueError(f"need 2 <= n_leaders <= n, got {self.n_leaders} of {self.n}")
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            key = frozenset((i, j))
            if key in seen:
                raise ValueError(f"duplicate edge between {i} and {j}")
            seen.add(key)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_leaders + 1))

    @property
    def followers(self) -> tuple[int, ...]:
        return tuple(range(self.n_leaders + 1, self.n + 1))

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Vertices sharing an edge with i, regardless of orientation."""
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return tuple(out)


@dataclass(frozen=True)
class Framework:
    """A graph embedded in the plane with desired squared edge lengths."""

    graph: DirectedGraph
    positions: np.ndarray  # (n, 2)
    desired_sq: np.ndarray  # (m,)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        d = np.asarray(self.desired_sq, dtype=float)
        if p.shape != (self.graph.n, 2):
            raise ValueError(f"positions must be ({self.graph.n}, 2), got {p.shape}")
        if d.shape != (self.graph.m,):
            raise ValueError(f"desired_sq must have {self.graph.m} entries, got {d.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions must be finite")
        if np.any(d <= 0):
            raise ValueError("desired squared lengths must be strictly positive")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "desired_sq", d)

    def with_positions(self, positions: np.ndarray) -> "Framework":
        return Framework(self.graph, positions, self.desired_sq)


def incidence_matrix(graph: DirectedGraph) -> np.ndarray:
    """m x n signed incidence matrix: row k has -1 at tail i, +1 at head j."""
    h = np.zeros((graph.m, graph.n))
    for k, (i, j) in enumerate(graph.edges):
        h[k, i - 1] = -1.0
        h[k, j - 1] = 1.0
    return h


def edge_vectors(fw: Framework) -> np.ndarray:
    """(m, 2) array of z_k = p_j - p_i in edge order."""
    p = fw.positions
    return np.array([p[j - 1] - p[i - 1] for i, j in fw.graph.edges])


def rigidity_function(fw: Framework) -> np.ndarray:
    """Squared edge lengths in edge order."""
    z = edge_vectors(fw)
    return np.sum(z * z, axis=1)


def rigidity_matrix(fw: Framework) -> np.ndarray:
    """R = D(z)^T (H kron I_2), i.e. half the Jacobian of rigidity_function."""
    z = edge_vectors(fw)
    h_bar = np.kron(incidence_matrix(fw.graph), np.eye(2))
    d = np.zeros((2 * fw.graph.m, fw.graph.m))
    for k in range(fw.graph.m):
        d[2 * k : 2 * k + 2, k] = z[k]
    return d.T @ h_bar


def distance_errors(fw: Framework) -> np.ndarray:
    """Squared-length errors ||z_k||^2 - desired_sq[k] in edge order."""
    return rigidity_function(fw) - fw.desired_sq


def is_infinitesimally_rigid(fw: Framework) -> bool:
    """Planar distance rigidity test: rank of the rigidity matrix is 2n - 3."""
    r = rigidity_matrix(fw)
    sv = np.linalg.svd(r, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return False
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    return rank == 2 * fw.graph.n - 3
