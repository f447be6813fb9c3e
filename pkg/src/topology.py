"""
Sensor field geometry, radio neighborhoods and routing-tree construction
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import ConnectivityError, TraceFormatError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensorField:
    """Sensor positions in meters, kept sorted by sensor id"""
    sensor_ids: Tuple[int, ...]
    positions: np.ndarray  # p x 2, row k belongs to sensor_ids[k]
    root_id: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.sensor_ids)
        positions = np.asarray(self.positions, dtype=float).reshape(len(ids), 2)
        if len(set(ids)) != len(ids):
            raise ValueError("Sensor ids must be unique")
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "sensor_ids", tuple(ids[k] for k in order))
        object.__setattr__(self, "positions", positions[order])
        if int(self.root_id) not in self.sensor_ids:
            raise ValueError(f"Root {self.root_id} is not a sensor of the field")
        object.__setattr__(self, "root_id", int(self.root_id))

    @property
    def p(self) -> int:
        return len(self.sensor_ids)

    def index_of(self, sensor_id: int) -> int:
        return self.sensor_ids.index(sensor_id)

    def distances(self) -> np.ndarray:
        """p x p Euclidean distance matrix"""
        return cdist(self.positions, self.positions)


@dataclass(frozen=True)
class Neighborhoods:
    """Symmetric radio neighborhoods N_i (self excluded)"""
    neighbors: Mapping[int, FrozenSet[int]]
    radio_range: float

    def __post_init__(self):
        frozen = {int(i): frozenset(int(j) for j in js) for i, js in self.neighbors.items()}
        for i, js in frozen.items():
            if i in js:
                raise ValueError(f"Sensor {i} cannot be its own neighbor")
            for j in js:
                if i not in frozen.get(j, frozenset()):
                    raise ValueError(f"Neighborhoods are not symmetric for ({i}, {j})")
        object.__setattr__(self, "neighbors", frozen)

    @classmethod
    def complete(cls, sensor_ids: Sequence[int]) -> "Neighborhoods":
        """Everybody hears everybody"""
        ids = frozenset(int(i) for i in sensor_ids)
        return cls({i: ids - {i} for i in ids}, float("inf"))

    @classmethod
    def empty(cls, sensor_ids: Sequence[int]) -> "Neighborhoods":
        return cls({int(i): frozenset() for i in sensor_ids}, 0.0)

    @property
    def sensor_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.neighbors))

    def of(self, sensor_id: int) -> Tuple[int, ...]:
        """Sorted neighbor ids of a sensor"""
        return tuple(sorted(self.neighbors[sensor_id]))

    def size(self, sensor_id: int) -> int:
        return len(self.neighbors[sensor_id])

    def max_size(self) -> int:
        return max((len(js) for js in self.neighbors.values()), default=0)

    def mask(self) -> np.ndarray:
        """Boolean p x p mask of N_i plus the diagonal, in sorted id order"""
        ids = self.sensor_ids
        index = {sensor_id: k for k, sensor_id in enumerate(ids)}
        mask = np.eye(len(ids), dtype=bool)
        for i, js in self.neighbors.items():
            for j in js:
                mask[index[i], index[j]] = True
        return mask

    def edges(self) -> Iterator[Tuple[int, int]]:
        for i in self.sensor_ids:
            for j in self.of(i):
                if i < j:
                    yield i, j


@dataclass(frozen=True)
class RoutingTree:
    """Rooted tree over sensor ids; children and depths are derived"""
    parent: Mapping[int, Optional[int]]
    children: Mapping[int, Tuple[int, ...]] = field(init=False)
    depth: Mapping[int, int] = field(init=False)
    root: int = field(init=False)

    def __post_init__(self):
        parent = {int(i): (None if j is None else int(j)) for i, j in self.parent.items()}
        roots = [i for i, j in parent.items() if j is None]
        if len(roots) != 1:
            raise ValueError(f"Tree needs exactly one root, found {roots}")
        children: Dict[int, List[int]] = {i: [] for i in parent}
        for i, j in parent.items():
            if j is not None:
                if j not in parent:
                    raise ValueError(f"Parent {j} of {i} is not in the tree")
                children[j].append(i)

        depth = {roots[0]: 0}
        queue = deque([roots[0]])
        while queue:
            node = queue.popleft()
            for child in children[node]:
                depth[child] = depth[node] + 1
                queue.append(child)
        if len(depth) != len(parent):
            raise ValueError(f"Tree has cycles or unreachable nodes: {sorted(set(parent) - set(depth))}")

        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "children", {i: tuple(sorted(c)) for i, c in children.items()})
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "root", roots[0])

    @classmethod
    def from_parents(cls, parent: Mapping[int, Optional[int]]) -> "RoutingTree":
        return cls(parent)

    @classmethod
    def chain(cls, sensor_ids: Sequence[int]) -> "RoutingTree":
        """First id is the root, each next id hangs below the previous"""
        ids = list(sensor_ids)
        return cls({sid: (ids[k - 1] if k > 0 else None) for k, sid in enumerate(ids)})

    @classmethod
    def star(cls, sensor_ids: Sequence[int]) -> "RoutingTree":
        """First id is the root, every other id is its child"""
        ids = list(sensor_ids)
        return cls({sid: (ids[0] if k > 0 else None) for k, sid in enumerate(ids)})

    @property
    def sensor_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.parent))

    @property
    def p(self) -> int:
        return len(self.parent)

    @property
    def height(self) -> int:
        return max(self.depth.values())

    def is_leaf(self, sensor_id: int) -> bool:
        return not self.children[sensor_id]

    def post_order(self) -> List[int]:
        """Children before parents, siblings in id order"""
        order: List[int] = []
        stack = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(self.children[node]):
                stack.append((child, False))
        return order

    def pre_order(self) -> List[int]:
        """Parents before children"""
        return list(reversed(self.post_order()))

    def ancestors(self, sensor_id: int) -> List[int]:
        """Path from the sensor's parent up to the root"""
        path = []
        node = self.parent[sensor_id]
        while node is not None:
            path.append(node)
            node = self.parent[node]
        return path


@dataclass(frozen=True)
class TreeStats:
    """Structural statistics driving every load formula"""
    subtree_sizes: Dict[int, int]
    children_counts: Dict[int, int]
    max_children: int
    max_children_node: int
    depth: int


def build_neighborhoods(field: SensorField, radio_range: float) -> Neighborhoods:
    """j is a neighbor of i iff their distance is at most radio_range"""
    if radio_range <= 0:
        raise ValueError(f"Radio range must be positive, got {radio_range}")
    within = field.distances() <= radio_range
    np.fill_diagonal(within, False)
    ids = field.sensor_ids
    neighbors = {
        ids[k]: frozenset(ids[m] for m in np.flatnonzero(within[k]))
        for k in range(field.p)
    }
    return Neighborhoods(neighbors, float(radio_range))


def _hop_distances(neighborhoods: Neighborhoods, root: int) -> Dict[int, int]:
    hops = {root: 0}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for neighbor in neighborhoods.of(node):
            if neighbor not in hops:
                hops[neighbor] = hops[node] + 1
                queue.append(neighbor)
    return hops


def build_routing_tree(field: SensorField, radio_range: float, root: Optional[int] = None) -> RoutingTree:
    """
    Shortest-hop routing tree over the range-limited radio graph

    Each sensor picks, among its neighbors one hop closer to the root,
    the one with the lowest id (then the nearest one).
    """
    root = field.root_id if root is None else int(root)
    if root not in field.sensor_ids:
        raise ValueError(f"Root {root} is not a sensor of the field")
    neighborhoods = build_neighborhoods(field, radio_range)
    hops = _hop_distances(neighborhoods, root)
    unreachable = set(field.sensor_ids) - set(hops)
    if unreachable:
        raise ConnectivityError(unreachable, radio_range)

    distances = field.distances()
    parent: Dict[int, Optional[int]] = {root: None}
    for sensor_id in field.sensor_ids:
        if sensor_id == root:
            continue
        k = field.index_of(sensor_id)
        candidates = [j for j in neighborhoods.of(sensor_id) if hops[j] == hops[sensor_id] - 1]
        parent[sensor_id] = min(candidates, key=lambda j: (j, distances[k, field.index_of(j)]))

    tree = RoutingTree(parent)
    logger.debug(f"Routing tree at {radio_range:g} m: depth {tree.height}, {tree.p} sensors")
    return tree


def tree_stats(tree: RoutingTree) -> TreeStats:
    """Subtree sizes RT_i, children counts C_i, the busiest parent and depth"""
    subtree_sizes: Dict[int, int] = {}
    for node in tree.post_order():
        subtree_sizes[node] = 1 + sum(subtree_sizes[child] for child in tree.children[node])
    children_counts = {node: len(tree.children[node]) for node in tree.sensor_ids}
    busiest = min(tree.sensor_ids, key=lambda node: (-children_counts[node], node))
    return TreeStats(
        subtree_sizes=subtree_sizes,
        children_counts=children_counts,
        max_children=children_counts[busiest],
        max_children_node=busiest,
        depth=tree.height,
    )


def minimum_connecting_range(field: SensorField, root: Optional[int] = None) -> float:
    """
    Smallest radio range at which every sensor can reach the root

    Binary search over the pairwise distances. Returns 0.0 when no
    positive range is needed (one sensor, or all at the same spot).
    """
    root = field.root_id if root is None else int(root)
    distances = field.distances()
    candidates = np.unique(distances[np.triu_indices(field.p, k=1)])
    # co-located sensors hear each other at any range
    candidates = candidates[candidates > 0]
    if candidates.size == 0:
        return 0.0
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        hops = _hop_distances(build_neighborhoods(field, float(candidates[mid])), root)
        if len(hops) == field.p:
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])


def top_right_sensor(sensor_ids: Sequence[int], positions: np.ndarray) -> int:
    """Sensor with the largest x + y, lowest id on ties"""
    positions = np.asarray(positions, dtype=float)
    scores = positions[:, 0] + positions[:, 1]
    best = np.flatnonzero(scores == scores.max())
    return int(min(sensor_ids[k] for k in best))


def load_positions(path: str, root_id: Optional[int] = None) -> SensorField:
    """
    Read a positions CSV with header sensor_id,x,y

    Args:
        path: CSV path
        root_id: root sensor; defaults to the top-right sensor
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise TraceFormatError(f"Cannot read positions file {path}: {e}") from e
    missing = {"sensor_id", "x", "y"} - set(frame.columns)
    if missing:
        raise TraceFormatError(f"Positions file {path} lacks columns {sorted(missing)}", line=1)
    numeric = frame[["sensor_id", "x", "y"]].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1)
    if bad.any():
        # header is line 1
        raise TraceFormatError(f"Unparseable position row in {path}", line=int(np.flatnonzero(bad)[0]) + 2)

    ids = tuple(int(i) for i in numeric["sensor_id"])
    positions = numeric[["x", "y"]].to_numpy(dtype=float)
    root = top_right_sensor(ids, positions) if root_id is None else int(root_id)
    logger.info(f"Loaded {len(ids)} sensor positions from {path} (root {root})")
    return SensorField(ids, positions, root)


def export_tree(tree: RoutingTree, path: str):
    """Write sensor_id,parent,depth,subtree_size,children"""
    stats = tree_stats(tree)
    frame = pd.DataFrame({
        "sensor_id": list(tree.sensor_ids),
        "parent": [tree.parent[i] if tree.parent[i] is not None else -1 for i in tree.sensor_ids],
        "depth": [tree.depth[i] for i in tree.sensor_ids],
        "subtree_size": [stats.subtree_sizes[i] for i in tree.sensor_ids],
        "children": [stats.children_counts[i] for i in tree.sensor_ids],
    })
    frame.to_csv(path, index=False)


def export_positions(field: SensorField, path: str):
    """Write sensor_id,x,y; load_positions reads it back"""
    frame = pd.DataFrame({
        "sensor_id": list(field.sensor_ids),
        "x": field.positions[:, 0],
        "y": field.positions[:, 1],
    })
    frame.to_csv(path, index=False, float_format="%.9g")


def restrict_field(field: SensorField, sensor_ids: Sequence[int]) -> SensorField:
    """Keep only some sensors; a dropped root is replaced by the top-right survivor"""
    keep = sorted(set(int(i) for i in sensor_ids))
    unknown = set(keep) - set(field.sensor_ids)
    if unknown:
        raise ValueError(f"Sensors {sorted(unknown)} have no position")
    rows = [field.index_of(i) for i in keep]
    positions = field.positions[rows]
    root = field.root_id if field.root_id in keep else top_right_sensor(keep, positions)
    return SensorField(tuple(keep), positions, root)
