"""
Steady-state principal component aggregation
Per-epoch score aggregation along the tree, sink reconstruction and
supervised compression with next-epoch retransmission
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .aggregation import AggregationEngine, LoadReport, vector_sum_spec
from .errors import DimensionError
from .linalg import PcaBasis, reconstruct
from .topology import RoutingTree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeBasisRow:
    """Coefficients w_i1..w_iq, training mean and accuracy threshold held by one sensor"""
    sensor_id: int
    coefficients: Tuple[float, ...]
    mean: float = 0.0
    epsilon: Optional[float] = None

    def __post_init__(self):
        coefficients = tuple(float(w) for w in self.coefficients)
        if not coefficients:
            raise DimensionError(f"Sensor {self.sensor_id} needs at least one coefficient")
        if not all(np.isfinite(coefficients)) or not np.isfinite(self.mean):
            raise ValueError(f"Sensor {self.sensor_id} has non-finite basis data")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def q(self) -> int:
        return len(self.coefficients)

    def local_reconstruction(self, z: Union[Sequence[float], np.ndarray]) -> float:
        """x_hat_i = sum_k z_k w_ik + mean_i"""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.q,):
            raise DimensionError(f"Expected {self.q} scores, got shape {z.shape}")
        return float(np.dot(z, self.coefficients)) + self.mean


@dataclass(frozen=True)
class Violation:
    sensor_id: int
    error: float


def rows_from_basis(basis: PcaBasis, sensor_ids: Sequence[int],
                    epsilon: Optional[float] = None) -> List[NodeBasisRow]:
    """Split a basis into the per-sensor rows installed at the nodes"""
    if len(sensor_ids) != basis.p:
        raise DimensionError(f"Basis covers {basis.p} sensors, got {len(sensor_ids)} ids")
    W = basis.W
    return [
        NodeBasisRow(int(sensor_id), tuple(W[k]), float(basis.mean[k]), epsilon)
        for k, sensor_id in enumerate(sensor_ids)
    ]


def _rows_by_id(tree: RoutingTree, rows: Sequence[NodeBasisRow]) -> Dict[int, NodeBasisRow]:
    by_id = {row.sensor_id: row for row in rows}
    if set(by_id) != set(tree.sensor_ids):
        missing = sorted(set(tree.sensor_ids) - set(by_id))
        raise DimensionError(f"Basis rows do not cover the tree, missing {missing}")
    if len({row.q for row in rows}) != 1:
        raise DimensionError("Basis rows disagree on the number of components")
    return by_id


def score_epoch(tree: RoutingTree, rows: Sequence[NodeBasisRow], x: Union[Sequence[float], np.ndarray],
                q_prime: Optional[int] = None) -> Tuple[np.ndarray, LoadReport]:
    """
    Aggregate the principal component scores of one epoch

    Args:
        tree: routing tree
        rows: one basis row per sensor
        x: measurements in sensor-id order
        q_prime: when set, only the first q_prime scores travel (congestion policy)

    Returns:
        (z of length q or q_prime, A operation loads)
    """
    by_id = _rows_by_id(tree, rows)
    q = rows[0].q
    size = q if q_prime is None else q_prime
    if not 1 <= size <= q:
        raise ValueError(f"q_prime must be in [1, {q}], got {q_prime}")

    def initializer(sensor_id: int, value: float) -> np.ndarray:
        row = by_id[sensor_id]
        return np.asarray(row.coefficients[:size]) * (value - row.mean)

    spec = vector_sum_spec(size, initializer)
    return AggregationEngine(tree).run_aggregate_epoch(spec, x)


def sink_reconstruct(basis: PcaBasis, z: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    """x_hat = W z + mean at the base station"""
    z = np.asarray(z, dtype=float)
    if z.shape != (basis.q,):
        raise DimensionError(f"Expected {basis.q} scores, got shape {z.shape}")
    return reconstruct(basis.W, z, basis.mean)


def supervised_check(row: NodeBasisRow, z_feedback: Union[Sequence[float], np.ndarray],
                     x_actual: float) -> Optional[Violation]:
    """Node-side comparison of the fed-back reconstruction with the true reading"""
    if row.epsilon is None:
        raise ValueError(f"Sensor {row.sensor_id} has no epsilon configured")
    error = abs(row.local_reconstruction(z_feedback) - float(x_actual))
    if error > row.epsilon:
        return Violation(row.sensor_id, error)
    return None


def retransmission_loads(tree: RoutingTree, violators: Sequence[int]) -> LoadReport:
    """Each violator's raw value travels to the base station like one D packet"""
    rx: Dict[int, int] = {}
    tx: Dict[int, int] = {}
    for sensor_id in violators:
        tx[sensor_id] = tx.get(sensor_id, 0) + 1
        for ancestor in tree.ancestors(sensor_id):
            rx[ancestor] = rx.get(ancestor, 0) + 1
            tx[ancestor] = tx.get(ancestor, 0) + 1
    return LoadReport.from_counts(tree.sensor_ids, rx, tx)


@dataclass
class CompressionRun:
    """Per-epoch scores, reconstructions and the values finally known at the sink"""
    sensor_ids: Tuple[int, ...]
    scores: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    known: np.ndarray
    violations: List[List[Violation]]
    load: LoadReport

    @property
    def epochs(self) -> int:
        return self.x.shape[0]

    @property
    def violation_count(self) -> int:
        return sum(len(v) for v in self.violations)

    def max_known_error(self) -> float:
        return float(np.max(np.abs(self.known - self.x), initial=0.0))

    def scores_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.scores, columns=[f"z_{k + 1}" for k in range(self.scores.shape[1])])
        frame.insert(0, "epoch", np.arange(self.epochs))
        return frame

    def reconstruction_frame(self) -> pd.DataFrame:
        T, p = self.x.shape
        return pd.DataFrame({
            "epoch": np.repeat(np.arange(T), p),
            "sensor_id": np.tile(self.sensor_ids, T),
            "x": self.x.ravel(),
            "x_hat": self.x_hat.ravel(),
        })

    def export_scores(self, path: str):
        """Write epoch,z_1..z_q"""
        self.scores_frame().to_csv(path, index=False, float_format="%.9g")

    def export_reconstruction(self, path: str):
        """Write epoch,sensor_id,x,x_hat"""
        self.reconstruction_frame().to_csv(path, index=False, float_format="%.9g")


class SupervisedCompression:
    """
    Epoch loop after basis installation

    Each epoch the scores are aggregated (A(q)) and, with supervision on, fed
    back to every node (F(q)). Nodes whose local reconstruction misses by more
    than epsilon send their raw reading up the tree during the next epoch;
    the sink then overwrites its estimate with the true value.
    """

    def __init__(self, tree: RoutingTree, basis: PcaBasis, epsilon: Optional[float] = None,
                 q_prime: Optional[int] = None):
        if basis.q < 1:
            raise DimensionError("Supervised compression needs at least one component")
        if epsilon is not None and epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {epsilon}")
        self.tree = tree
        self.epsilon = epsilon
        self.q_prime = q_prime
        self.basis = basis if q_prime is None else basis.truncated(q_prime)
        self.rows = rows_from_basis(self.basis, tree.sensor_ids, epsilon)
        self.engine = AggregationEngine(tree)
        self.logger = logging.getLogger(__name__)

        self._pending: List[Violation] = []
        self._pending_epoch: Optional[int] = None
        self._epoch = 0
        self._load = LoadReport.zeros(tree.sensor_ids)
        self._scores: List[np.ndarray] = []
        self._x: List[np.ndarray] = []
        self._x_hat: List[np.ndarray] = []
        self._known: List[np.ndarray] = []
        self._violations: List[List[Violation]] = []

    @property
    def supervised(self) -> bool:
        return self.epsilon is not None

    def _deliver_pending(self):
        if not self._pending:
            return
        self._load = self._load + retransmission_loads(self.tree, [v.sensor_id for v in self._pending])
        known = self._known[self._pending_epoch]
        truth = self._x[self._pending_epoch]
        for violation in self._pending:
            k = self.tree.sensor_ids.index(violation.sensor_id)
            known[k] = truth[k]
        self._pending = []
        self._pending_epoch = None

    def step(self, x: Union[Sequence[float], np.ndarray]) -> np.ndarray:
        """Run one epoch; returns the scores delivered at the sink"""
        x = np.asarray(x, dtype=float)
        self._deliver_pending()

        z, load = score_epoch(self.tree, self.rows, x)
        self._load = self._load + load
        x_hat = sink_reconstruct(self.basis, z)

        violations: List[Violation] = []
        if self.supervised:
            self._load = self._load + self.engine.run_feedback(self.basis.q)
            for row, x_i in zip(self.rows, x):
                violation = supervised_check(row, z, x_i)
                if violation is not None:
                    violations.append(violation)
            if violations:
                self.logger.debug(f"Epoch {self._epoch}: {len(violations)} sensors outside +/-{self.epsilon}")

        self._scores.append(z)
        self._x.append(x)
        self._x_hat.append(x_hat)
        self._known.append(x_hat.copy())
        self._violations.append(violations)
        self._pending = violations
        self._pending_epoch = self._epoch
        self._epoch += 1
        return z

    def flush(self):
        """Deliver retransmissions still owed for the last epoch"""
        self._deliver_pending()

    def run(self, samples: np.ndarray) -> CompressionRun:
        """Run every row of a T x p sample matrix, then flush"""
        for x in np.asarray(samples, dtype=float):
            self.step(x)
        self.flush()
        result = self.result()
        self.logger.info(
            f"Compressed {result.epochs} epochs with q={self.basis.q}: "
            f"{result.violation_count} retransmissions, max node load {result.load.max_node_load}"
        )
        return result

    def result(self) -> CompressionRun:
        q = self.basis.q
        p = self.tree.p
        return CompressionRun(
            sensor_ids=self.tree.sensor_ids,
            scores=np.array(self._scores).reshape(-1, q),
            x=np.array(self._x).reshape(-1, p),
            x_hat=np.array(self._x_hat).reshape(-1, p),
            known=np.array(self._known).reshape(-1, p),
            violations=list(self._violations),
            load=self._load,
        )
