"""
Tree aggregation engine and packet-load accounting
Simulates D (default forwarding), A (in-network aggregation) and
F (feedback) operations over a routing tree on an ideal channel
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DimensionError
from .topology import RoutingTree, tree_stats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartialStateRecord:
    """Intermediate state merged up the tree"""
    payload: np.ndarray

    def __post_init__(self):
        payload = np.atleast_1d(np.asarray(self.payload, dtype=float))
        if not np.all(np.isfinite(payload)):
            raise ValueError("Partial state record has non-finite entries")
        object.__setattr__(self, "payload", payload)

    @property
    def size(self) -> int:
        return self.payload.shape[0]


@dataclass(frozen=True)
class AggregationSpec:
    """
    Aggregation service: init(sensor_id, value) -> record, associative and
    commutative merge, evaluate at the root. A record costs record_size
    packets per transmission.
    """
    init: Callable[[int, float], PartialStateRecord]
    merge: Callable[[PartialStateRecord, PartialStateRecord], PartialStateRecord]
    evaluate: Callable[[PartialStateRecord], Any]
    record_size: int = 1

    def __post_init__(self):
        if self.record_size < 1:
            raise ValueError(f"record_size must be >= 1, got {self.record_size}")


def _sum_records(a: PartialStateRecord, b: PartialStateRecord) -> PartialStateRecord:
    return PartialStateRecord(a.payload + b.payload)


def norm_spec() -> AggregationSpec:
    """Euclidean norm: squares summed along the tree, square root at the root"""
    return AggregationSpec(
        init=lambda sensor_id, value: PartialStateRecord(np.array([value * value])),
        merge=_sum_records,
        evaluate=lambda record: float(np.sqrt(record.payload[0])),
        record_size=1,
    )


def vector_sum_spec(size: int, initializer: Callable[[int, float], Sequence[float]]) -> AggregationSpec:
    """Componentwise sum of per-node vectors of a fixed size"""
    return AggregationSpec(
        init=lambda sensor_id, value: PartialStateRecord(np.asarray(initializer(sensor_id, value), dtype=float)),
        merge=_sum_records,
        evaluate=lambda record: record.payload.copy(),
        record_size=size,
    )


@dataclass(frozen=True)
class Operation:
    """One network operation: kind D, A(size) or F(size)"""
    kind: str
    size: int = 1

    def __post_init__(self):
        if self.kind not in ("D", "A", "F"):
            raise ValueError(f"Unknown operation kind {self.kind}")
        if self.size < 0:
            raise ValueError(f"Operation size must be >= 0, got {self.size}")

    @classmethod
    def default(cls) -> "Operation":
        return cls("D", 1)

    @classmethod
    def aggregate(cls, q: int) -> "Operation":
        return cls("A", q)

    @classmethod
    def feedback(cls, payload_size: int) -> "Operation":
        return cls("F", payload_size)

    def __str__(self):
        return "D" if self.kind == "D" else f"{self.kind}({self.size})"


@dataclass(frozen=True)
class LoadReport:
    """Per-node received and transmitted packet counts"""
    sensor_ids: Tuple[int, ...]
    rx: np.ndarray
    tx: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.sensor_ids)
        rx = np.asarray(self.rx, dtype=np.int64).reshape(len(ids))
        tx = np.asarray(self.tx, dtype=np.int64).reshape(len(ids))
        if np.any(rx < 0) or np.any(tx < 0):
            raise ValueError("Packet counts cannot be negative")
        object.__setattr__(self, "sensor_ids", ids)
        object.__setattr__(self, "rx", rx)
        object.__setattr__(self, "tx", tx)

    @classmethod
    def zeros(cls, sensor_ids: Sequence[int]) -> "LoadReport":
        n = len(sensor_ids)
        return cls(tuple(sensor_ids), np.zeros(n), np.zeros(n))

    @classmethod
    def from_counts(cls, sensor_ids: Sequence[int], rx: Mapping[int, int], tx: Mapping[int, int]) -> "LoadReport":
        ids = tuple(sensor_ids)
        return cls(ids, [rx.get(i, 0) for i in ids], [tx.get(i, 0) for i in ids])

    @property
    def loads(self) -> np.ndarray:
        """rx + tx per node"""
        return self.rx + self.tx

    def load_of(self, sensor_id: int) -> int:
        k = self.sensor_ids.index(sensor_id)
        return int(self.rx[k] + self.tx[k])

    @property
    def total(self) -> int:
        return int(self.loads.sum())

    @property
    def max_node_load(self) -> int:
        return int(self.loads.max(initial=0))

    @property
    def max_node(self) -> int:
        return self.sensor_ids[int(np.argmax(self.loads))]

    @property
    def mean_node_load(self) -> float:
        return float(self.loads.mean()) if self.loads.size else 0.0

    def __add__(self, other: "LoadReport") -> "LoadReport":
        if self.sensor_ids != other.sensor_ids:
            raise DimensionError("Cannot add load reports over different sensors")
        return LoadReport(self.sensor_ids, self.rx + other.rx, self.tx + other.tx)

    def scaled(self, factor: int) -> "LoadReport":
        return LoadReport(self.sensor_ids, self.rx * factor, self.tx * factor)

    def equals(self, other: "LoadReport") -> bool:
        return (self.sensor_ids == other.sensor_ids
                and np.array_equal(self.rx, other.rx)
                and np.array_equal(self.tx, other.tx))

    def summary(self) -> Dict[str, float]:
        """Distribution of per-node loads: min, quartiles, max, mean, total"""
        loads = self.loads.astype(float)
        q1, median, q3 = np.percentile(loads, [25, 50, 75])
        return {
            "min": float(loads.min()),
            "q1": float(q1),
            "median": float(median),
            "q3": float(q3),
            "max": float(loads.max()),
            "mean": float(loads.mean()),
            "total": float(loads.sum()),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "sensor_id": list(self.sensor_ids),
            "rx": self.rx,
            "tx": self.tx,
            "total": self.loads,
        })

    def to_csv(self, path: str):
        """Write sensor_id,rx,tx,total"""
        self.to_frame().to_csv(path, index=False)


class AggregationEngine:
    """Runs one network operation per call over a fixed routing tree"""

    def __init__(self, tree: RoutingTree):
        self.tree = tree
        self.logger = logging.getLogger(__name__)
        self._index = {sensor_id: k for k, sensor_id in enumerate(tree.sensor_ids)}

    def _values_by_id(self, x: Union[Sequence[float], np.ndarray]) -> Dict[int, float]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.tree.p,):
            raise DimensionError(f"Expected {self.tree.p} measurements, got shape {x.shape}")
        return {sensor_id: float(x[k]) for sensor_id, k in self._index.items()}

    def _children(self, node: int, rng: Optional[np.random.Generator]) -> Sequence[int]:
        children = self.tree.children[node]
        if rng is None or len(children) < 2:
            return children
        return [children[k] for k in rng.permutation(len(children))]

    def run_default_epoch(self, x: Union[Sequence[float], np.ndarray]) -> Tuple[np.ndarray, LoadReport]:
        """
        Route every raw measurement to the base station

        Returns:
            (values delivered at the sink in sensor-id order, load report)
        """
        values = self._values_by_id(x)
        rx: Dict[int, int] = {}
        tx: Dict[int, int] = {}
        outbox: Dict[int, list] = {}
        for node in self.tree.post_order():
            packets = [(node, values[node])]
            for child in self.tree.children[node]:
                received = outbox.pop(child)
                rx[node] = rx.get(node, 0) + len(received)
                packets.extend(received)
            tx[node] = len(packets)
            outbox[node] = packets

        delivered = dict(outbox.pop(self.tree.root))
        sink_values = np.array([delivered[sensor_id] for sensor_id in self.tree.sensor_ids])
        return sink_values, LoadReport.from_counts(self.tree.sensor_ids, rx, tx)

    def run_aggregate_epoch(self, spec: AggregationSpec, x: Union[Sequence[float], np.ndarray],
                            rng: Optional[np.random.Generator] = None) -> Tuple[Any, LoadReport]:
        """
        Merge partial state records up the tree and evaluate at the root

        Args:
            spec: aggregation service
            x: one measurement per sensor, in sensor-id order
            rng: when given, children are merged in a random order
        """
        values = self._values_by_id(x)
        rx: Dict[int, int] = {}
        tx: Dict[int, int] = {}
        records: Dict[int, PartialStateRecord] = {}
        for node in self.tree.post_order():
            record = spec.init(node, values[node])
            self._check_record(record, spec, node)
            for child in self._children(node, rng):
                child_record = records.pop(child)
                rx[node] = rx.get(node, 0) + spec.record_size
                record = spec.merge(record, child_record)
                self._check_record(record, spec, node)
            tx[node] = spec.record_size
            records[node] = record

        result = spec.evaluate(records.pop(self.tree.root))
        return result, LoadReport.from_counts(self.tree.sensor_ids, rx, tx)

    @staticmethod
    def _check_record(record: PartialStateRecord, spec: AggregationSpec, node: int):
        if record.size != spec.record_size:
            raise DimensionError(
                f"Node {node} produced a record of size {record.size}, expected {spec.record_size}"
            )

    def run_feedback(self, payload_size: int) -> LoadReport:
        """Flood a payload from the root; one broadcast per forwarding node"""
        if payload_size < 1:
            raise ValueError(f"payload_size must be >= 1, got {payload_size}")
        rx: Dict[int, int] = {}
        tx: Dict[int, int] = {}
        for node in self.tree.pre_order():
            if node != self.tree.root:
                rx[node] = payload_size
            if node == self.tree.root or not self.tree.is_leaf(node):
                tx[node] = payload_size
        return LoadReport.from_counts(self.tree.sensor_ids, rx, tx)


def analytic_loads(tree: RoutingTree, op: Operation) -> LoadReport:
    """
    Closed-form loads: D gives 2 RT_i - 1, A(q) gives q (C_i + 1),
    F(s) gives s at the root and leaves and 2 s at forwarding nodes
    """
    stats = tree_stats(tree)
    rx: Dict[int, int] = {}
    tx: Dict[int, int] = {}
    for node in tree.sensor_ids:
        if op.kind == "D":
            tx[node] = stats.subtree_sizes[node]
            rx[node] = stats.subtree_sizes[node] - 1
        elif op.kind == "A":
            tx[node] = op.size
            rx[node] = op.size * stats.children_counts[node]
        else:
            is_root = node == tree.root
            rx[node] = 0 if is_root else op.size
            tx[node] = op.size if (is_root or stats.children_counts[node] > 0) else 0
    return LoadReport.from_counts(tree.sensor_ids, rx, tx)


def tradeoff_holds(q: int, c_max: int, p: int) -> bool:
    """True when aggregating q components keeps the highest load within 2p - 1"""
    if min(q, p) < 1 or c_max < 0:
        raise ValueError("q and p must be >= 1 and c_max >= 0")
    return q * (c_max + 1) <= 2 * p - 1
