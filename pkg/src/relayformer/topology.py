"""Skeleton graph construction, adjacency partitioning and neighbor tables.

The spatial graph is the physical skeleton (joints linked by bones); the
temporal graph is a ring linking consecutive frames, with the last frame
wrapping to the first. Attention over either graph reads a padded
neighbor-index table with a validity mask; graph convolution reads the
partitioned and degree-normalized adjacency matrices.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_INDEX = -1


class TopologyError(ValueError):
    """Raised for invalid skeleton definitions or normalization failures."""


@dataclass(frozen=True)
class SkeletonGraph:
    """An undirected, connected single-skeleton graph.

    ``center_joint`` anchors the spatial partitioning (hop distances are
    measured from it) and roots the bone orientation.
    """

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int

    @property
    def num_bones(self) -> int:
        return len(self.edges)

    def neighbors(self, joint: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == joint:
                out.append(b)
            elif b == joint:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_joints, self.num_joints), dtype=np.int64)
        for i, j in self.edges:
            a[i, j] = 1
            a[j, i] = 1
        return a

    def hop_distances(self, source: int | None = None) -> np.ndarray:
        """Breadth-first hop count from ``source`` (default: center joint)."""
        start = self.center_joint if source is None else source
        dist = np.full(self.num_joints, -1, dtype=np.int64)
        dist[start] = 0
        queue = deque([start])
        adj = self.adjacency()
        while queue:
            u = queue.popleft()
            for v in np.nonzero(adj[u])[0]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(int(v))
        return dist

    def bone_parents(self) -> np.ndarray:
        """Parent joint of each joint in the spanning tree rooted at the
        center; the center is its own parent."""
        parent = np.full(self.num_joints, -1, dtype=np.int64)
        parent[self.center_joint] = self.center_joint
        queue = deque([self.center_joint])
        adj = self.adjacency()
        while queue:
            u = queue.popleft()
            for v in np.nonzero(adj[u])[0]:
                if parent[v] < 0:
                    parent[v] = u
                    queue.append(int(v))
        return parent


def build_skeleton_graph(num_joints: int, edges, center: int = 0) -> SkeletonGraph:
    """Validate and freeze a skeleton definition.

    Rejects out-of-range or duplicate edges, self-loops and disconnected
    graphs (one skeleton means every joint is reachable over bones).
    """
    if num_joints < 1:
        raise TopologyError(f"joint count must be positive, got {num_joints}")
    if not 0 <= center < num_joints:
        raise TopologyError(f"center joint {center} out of range [0, {num_joints})")
    seen: set[tuple[int, int]] = set()
    canon: list[tuple[int, int]] = []
    for raw in edges:
        i, j = int(raw[0]), int(raw[1])
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise TopologyError(f"edge ({i}, {j}) out of range [0, {num_joints})")
        if i == j:
            raise TopologyError(f"self-loop at joint {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise TopologyError(f"duplicate edge ({i}, {j})")
        seen.add(key)
        canon.append(key)
    graph = SkeletonGraph(num_joints, tuple(canon), center)
    if num_joints > 1:
        dist = graph.hop_distances(source=0)
        if (dist < 0).any():
            missing = np.nonzero(dist < 0)[0].tolist()
            raise TopologyError(f"graph is disconnected; unreachable joints {missing}")
    return graph


def load_skeleton_json(path: str | Path) -> SkeletonGraph:
    """Load a skeleton from ``{"V": int, "edges": [[i, j], ...], "center": int}``."""
    spec = json.loads(Path(path).read_text())
    return build_skeleton_graph(spec["V"], spec["edges"], spec.get("center", 0))


def save_skeleton_json(graph: SkeletonGraph, path: str | Path) -> None:
    payload = {
        "V": graph.num_joints,
        "edges": [list(e) for e in graph.edges],
        "center": graph.center_joint,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# The 25-joint Kinect-v2 skeleton used by the large capture datasets,
# 0-indexed, rooted at the spine-shoulder joint.
NTU_NUM_JOINTS = 25
NTU_EDGES: tuple[tuple[int, int], ...] = tuple(
    (a - 1, b - 1)
    for a, b in [
        (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
        (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
        (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
        (24, 25), (25, 12),
    ]
)
NTU_CENTER = 20


def ntu_skeleton() -> SkeletonGraph:
    return build_skeleton_graph(NTU_NUM_JOINTS, NTU_EDGES, NTU_CENTER)


def chain_skeleton(num_joints: int) -> SkeletonGraph:
    """Simple chain graph, handy default for synthetic data."""
    edges = [(i, i + 1) for i in range(num_joints - 1)]
    return build_skeleton_graph(num_joints, edges, center=num_joints // 2)


# -- adjacency partitioning ---------------------------------------------------


@dataclass
class AdjacencySet:
    """Binary adjacency partitions plus their degree-normalized variants.

    Partitions are disjoint and sum to adjacency-with-self-loops. All
    partitions are normalized with the degree of that summed pattern, so
    self-loops are only counted once across the whole set.
    """

    matrices: list[np.ndarray]
    normalized: list[np.ndarray] = field(default_factory=list)

    @property
    def partition_count(self) -> int:
        return len(self.matrices)

    def summed(self) -> np.ndarray:
        return np.sum(self.matrices, axis=0)


def partition_adjacency(graph: SkeletonGraph, strategy: str = "spatial") -> AdjacencySet:
    """Split adjacency-with-self-loops into attention-order partitions.

    ``uniform``: one partition holding adjacency plus identity.
    ``spatial``: three partitions by hop distance to the center joint:
    root (self-loops plus equal-distance neighbors), centripetal (neighbor
    closer to the center) and centrifugal (neighbor farther away).
    """
    adj = graph.adjacency()
    eye = np.eye(graph.num_joints, dtype=np.int64)
    if strategy == "uniform":
        return AdjacencySet(matrices=[adj + eye])
    if strategy != "spatial":
        raise TopologyError(f"unknown partition strategy {strategy!r}")
    dist = graph.hop_distances()
    root = eye.copy()
    centripetal = np.zeros_like(adj)
    centrifugal = np.zeros_like(adj)
    for x in range(graph.num_joints):
        for y in np.nonzero(adj[x])[0]:
            if dist[y] < dist[x]:
                centripetal[x, y] = 1
            elif dist[y] > dist[x]:
                centrifugal[x, y] = 1
            else:
                root[x, y] = 1
    return AdjacencySet(matrices=[root, centripetal, centrifugal])


def normalize_adjacency(adjacency: np.ndarray, add_self_loops: bool = True) -> np.ndarray:
    """Symmetric degree normalization ``D^(-1/2) (A + I) D^(-1/2)``.

    With ``add_self_loops=False`` the matrix is normalized as given; a
    zero-degree row is then an error (an isolated node cannot be scaled).
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise TopologyError(f"adjacency must be square, got shape {a.shape}")
    if add_self_loops:
        a = a + np.eye(a.shape[0])
    degree = a.sum(axis=1)
    if (degree <= 0).any():
        rows = np.nonzero(degree <= 0)[0].tolist()
        raise TopologyError(f"cannot normalize: zero-degree rows {rows}")
    scale = 1.0 / np.sqrt(degree)
    return scale[:, None] * a * scale[None, :]


def normalize_partitions(adj_set: AdjacencySet) -> AdjacencySet:
    """Fill ``normalized`` using the degree of the summed pattern.

    Equivalent to normalizing adjacency-with-self-loops once and masking
    the result per partition, which keeps the partition-sum property.
    """
    total = adj_set.summed().astype(np.float64)
    degree = total.sum(axis=1)
    if (degree <= 0).any():
        rows = np.nonzero(degree <= 0)[0].tolist()
        raise TopologyError(f"cannot normalize: zero-degree rows {rows}")
    scale = 1.0 / np.sqrt(degree)
    normalized = [scale[:, None] * m.astype(np.float64) * scale[None, :] for m in adj_set.matrices]
    return AdjacencySet(matrices=list(adj_set.matrices), normalized=normalized)


def build_adjacency(graph: SkeletonGraph, strategy: str = "spatial") -> AdjacencySet:
    return normalize_partitions(partition_adjacency(graph, strategy))


# -- neighbor tables -----------------------------------------------------------


@dataclass(frozen=True)
class NeighborTable:
    """Padded per-node neighbor indices plus a validity mask.

    ``index[n, j]`` is the j-th neighbor of node n or ``PAD_INDEX`` when
    ``mask[n, j]`` is 0. Attention must only read masked-in slots.
    """

    index: np.ndarray
    mask: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.index.shape[0]

    @property
    def max_neighbors(self) -> int:
        return self.index.shape[1]


def _table_from_rows(rows: list[list[int]]) -> NeighborTable:
    width = max(1, max(len(r) for r in rows))
    index = np.full((len(rows), width), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for n, row in enumerate(rows):
        index[n, : len(row)] = row
        mask[n, : len(row)] = True
    return NeighborTable(index=index, mask=mask)


def neighbor_table_spatial(graph: SkeletonGraph, include_self: bool = False) -> NeighborTable:
    """Bone-adjacent joints per joint, optionally including the joint itself.

    Relay participation is appended inside the attention blocks, never here.
    """
    rows = []
    for joint in range(graph.num_joints):
        row = set(graph.neighbors(joint))
        if include_self:
            row.add(joint)
        rows.append(sorted(row))
    return _table_from_rows(rows)


def temporal_ring_table(num_frames: int) -> NeighborTable:
    """Previous/next frame per frame, with the ends joined into a ring.

    A two-frame ring has a single distinct neighbor, deduplicated so one
    frame is not attended to twice.
    """
    if num_frames < 2:
        raise TopologyError(f"temporal ring needs at least 2 frames, got {num_frames}")
    index = np.full((num_frames, 2), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((num_frames, 2), dtype=bool)
    for t in range(num_frames):
        prev, nxt = (t - 1) % num_frames, (t + 1) % num_frames
        index[t, 0] = prev
        mask[t, 0] = True
        if nxt != prev:
            index[t, 1] = nxt
            mask[t, 1] = True
    return NeighborTable(index=index, mask=mask)
