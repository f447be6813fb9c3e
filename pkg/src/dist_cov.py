"""
Distributed covariance estimation under the local covariance hypothesis
Each node keeps t, S_j and S_ij for itself and its radio neighbors only
"""

import logging
import numpy as np
import pandas as pd
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple, Union

from .aggregation import LoadReport
from .errors import DegenerateInputError, DimensionError, IncompleteRoundError, UnequalEpochError
from .topology import Neighborhoods, RoutingTree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeCovState:
    """Running sums held by one sensor"""
    sensor_id: int
    neighbors: Tuple[int, ...]
    t: int = 0
    s_self: float = 0.0
    s_self_sq: float = 0.0
    s_neighbors: Mapping[int, float] = field(default_factory=dict)
    s_cross: Mapping[int, float] = field(default_factory=dict)

    @classmethod
    def initial(cls, sensor_id: int, neighbors: Sequence[int]) -> "NodeCovState":
        neighbors = tuple(sorted(int(j) for j in neighbors))
        return cls(
            sensor_id=int(sensor_id),
            neighbors=neighbors,
            s_neighbors={j: 0.0 for j in neighbors},
            s_cross={j: 0.0 for j in neighbors},
        )

    def _require_samples(self):
        if self.t == 0:
            raise DegenerateInputError(f"Node {self.sensor_id} has no samples yet")

    def mean(self) -> float:
        self._require_samples()
        return self.s_self / self.t

    def variance(self) -> float:
        self._require_samples()
        t = float(self.t)
        return self.s_self_sq / t - self.s_self * self.s_self / (t * t)

    def covariance(self, neighbor: int) -> float:
        """c_ij = S_ij / t - S_i S_j / t^2"""
        if neighbor == self.sensor_id:
            return self.variance()
        if neighbor not in self.s_cross:
            return 0.0
        self._require_samples()
        t = float(self.t)
        return self.s_cross[neighbor] / t - self.s_self * self.s_neighbors[neighbor] / (t * t)

    def cov_row(self) -> Dict[int, float]:
        row = {j: self.covariance(j) for j in self.neighbors}
        row[self.sensor_id] = self.variance()
        return row


def node_cov_update(state: NodeCovState, own: float,
                    neighbor_values: Mapping[int, float]) -> NodeCovState:
    """
    Fold one epoch of own and neighbor measurements into a node's sums

    Args:
        state: the node's sums so far (left untouched)
        own: the node's reading this epoch
        neighbor_values: readings heard from every radio neighbor

    Returns:
        New state with t advanced by one
    """
    received = set(neighbor_values)
    expected = set(state.neighbors)
    if received != expected:
        missing = sorted(expected - received)
        extra = sorted(received - expected)
        raise IncompleteRoundError(
            f"Node {state.sensor_id}: missing neighbor values {missing}, unexpected {extra}"
        )
    own = float(own)
    s_neighbors = {j: state.s_neighbors[j] + float(neighbor_values[j]) for j in state.neighbors}
    s_cross = {j: state.s_cross[j] + own * float(neighbor_values[j]) for j in state.neighbors}
    return replace(
        state,
        t=state.t + 1,
        s_self=state.s_self + own,
        s_self_sq=state.s_self_sq + own * own,
        s_neighbors=s_neighbors,
        s_cross=s_cross,
    )


def init_network(neighborhoods: Neighborhoods) -> List[NodeCovState]:
    return [NodeCovState.initial(i, neighborhoods.of(i)) for i in neighborhoods.sensor_ids]


def exchange_loads(neighborhoods: Neighborhoods) -> LoadReport:
    """One broadcast per node, one reception per neighbor"""
    ids = neighborhoods.sensor_ids
    return LoadReport(ids, [neighborhoods.size(i) for i in ids], [1] * len(ids))


def run_cov_round(network: Sequence[NodeCovState], neighborhoods: Neighborhoods,
                  x: Union[Sequence[float], np.ndarray]) -> Tuple[List[NodeCovState], LoadReport]:
    """
    One epoch: every node broadcasts its measurement, then all update

    Args:
        network: node states in sensor-id order
        neighborhoods: radio neighborhoods matching the states
        x: one measurement per sensor, in sensor-id order
    """
    x = np.asarray(x, dtype=float)
    ids = neighborhoods.sensor_ids
    if x.shape != (len(ids),):
        raise DimensionError(f"Expected {len(ids)} measurements, got shape {x.shape}")
    if tuple(state.sensor_id for state in network) != ids:
        raise DimensionError("Network states do not match the neighborhoods' sensors")

    # barrier: every broadcast is heard before anyone updates
    heard = {sensor_id: float(x[k]) for k, sensor_id in enumerate(ids)}
    updated = [
        node_cov_update(state, heard[state.sensor_id], {j: heard[j] for j in state.neighbors})
        for state in network
    ]
    return updated, exchange_loads(neighborhoods)


@dataclass(frozen=True)
class MaskedCovariance:
    """Covariance with zeros outside radio neighborhoods"""
    matrix: np.ndarray
    neighborhoods: Neighborhoods

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        mask = self.neighborhoods.mask()
        if matrix.shape != mask.shape:
            raise DimensionError(f"Matrix shape {matrix.shape} does not match mask {mask.shape}")
        if np.any(matrix[~mask] != 0.0):
            raise ValueError("Masked covariance has nonzero entries outside the neighborhoods")
        scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
        if np.max(np.abs(matrix - matrix.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("Masked covariance is not symmetric")
        object.__setattr__(self, "matrix", matrix)

    @property
    def sensor_ids(self) -> Tuple[int, ...]:
        return self.neighborhoods.sensor_ids

    def row(self, sensor_id: int) -> Dict[int, float]:
        """In-mask entries c_ij of one sensor's row"""
        ids = self.sensor_ids
        k = ids.index(sensor_id)
        return {j: float(self.matrix[k, ids.index(j)]) for j in (sensor_id,) + self.neighborhoods.of(sensor_id)}

    def to_frame(self) -> pd.DataFrame:
        """i,j,c_ij for in-mask entries only"""
        ids = self.sensor_ids
        rows, cols = np.nonzero(self.neighborhoods.mask())
        return pd.DataFrame({
            "i": [ids[r] for r in rows],
            "j": [ids[c] for c in cols],
            "c_ij": self.matrix[rows, cols],
        })

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.9g")


def common_epochs(states: Sequence[NodeCovState]) -> int:
    """Shared epoch count t; every node must have seen the same t >= 2 epochs"""
    epochs = {state.t for state in states}
    if len(epochs) > 1:
        raise UnequalEpochError(f"Nodes were updated for different epoch counts: {sorted(epochs)}")
    t = epochs.pop() if epochs else 0
    if t < 2:
        raise DegenerateInputError(f"Covariance needs at least 2 epochs, nodes have {t}")
    return t


def assemble_masked(states: Sequence[NodeCovState], neighborhoods: Neighborhoods) -> MaskedCovariance:
    common_epochs(states)
    ids = neighborhoods.sensor_ids
    index = {sensor_id: k for k, sensor_id in enumerate(ids)}
    matrix = np.zeros((len(ids), len(ids)))
    for state in states:
        for j, c_ij in state.cov_row().items():
            matrix[index[state.sensor_id], index[j]] = c_ij
    return MaskedCovariance(matrix, neighborhoods)


def mask_covariance(C: np.ndarray, neighborhoods: Neighborhoods) -> MaskedCovariance:
    """Elementwise product of a dense covariance with the neighborhood mask"""
    C = np.asarray(C, dtype=float)
    masked = np.where(neighborhoods.mask(), C, 0.0)
    return MaskedCovariance((masked + masked.T) / 2.0, neighborhoods)


def stream_cov_states(samples: np.ndarray, neighborhoods: Neighborhoods) -> Tuple[List[NodeCovState], LoadReport]:
    """Run one covariance round per sample row; nodes keep their own sums"""
    network = init_network(neighborhoods)
    total = LoadReport.zeros(neighborhoods.sensor_ids)
    for x in np.asarray(samples, dtype=float):
        network, load = run_cov_round(network, neighborhoods, x)
        total = total + load
    logger.info(f"Streamed {len(samples)} epochs through {len(network)} nodes")
    return network, total


def stream_masked_covariance(samples: np.ndarray, neighborhoods: Neighborhoods) -> Tuple[MaskedCovariance, LoadReport]:
    states, total = stream_cov_states(samples, neighborhoods)
    return assemble_masked(states, neighborhoods), total


def hybrid_collection_loads(tree: RoutingTree, neighborhoods: Neighborhoods) -> LoadReport:
    """
    Cost of shipping the masked covariance to the base station: each node
    sends c_ii and c_ij for neighbors j > i, forwarding its subtree's rows
    """
    if set(tree.sensor_ids) != set(neighborhoods.sensor_ids):
        raise DimensionError("Tree and neighborhoods cover different sensors")
    own = {i: 1 + sum(1 for j in neighborhoods.of(i) if j > i) for i in tree.sensor_ids}
    carried: Dict[int, int] = {}
    for node in tree.post_order():
        carried[node] = own[node] + sum(carried[child] for child in tree.children[node])
    rx = {node: carried[node] - own[node] for node in tree.sensor_ids}
    return LoadReport.from_counts(tree.sensor_ids, rx, carried)
