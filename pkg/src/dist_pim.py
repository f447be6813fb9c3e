"""
Distributed power iteration over the sensor network
Local mat-vec from neighbor exchanges, norm and scalar products through
the aggregation service, feedback of the scalars, local update
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .aggregation import AggregationEngine, LoadReport, vector_sum_spec
from .dist_cov import MaskedCovariance, NodeCovState, common_epochs, exchange_loads
from .errors import DimensionError, IncompleteRoundError, ZeroNormError
from .linalg import EigenPair, InitPolicy, PcaBasis, canonical_sign
from .topology import Neighborhoods, RoutingTree

logger = logging.getLogger(__name__)


@dataclass
class PimNodeState:
    """What one sensor holds during the distributed power iteration"""
    sensor_id: int
    neighbors: Tuple[int, ...]
    cov_row: Dict[int, float]
    mean: float = 0.0
    v_local: float = 0.0
    w_locals: List[float] = field(default_factory=list)

    def __post_init__(self):
        allowed = set(self.neighbors) | {self.sensor_id}
        if not set(self.cov_row) <= allowed:
            raise DimensionError(f"Node {self.sensor_id} holds covariances outside its neighborhood")


@dataclass
class PimConfig:
    """Stopping rules and start policy for the distributed power iteration"""
    q_target: int = 1
    delta: float = 1e-3
    t_max: int = 50
    v0_policy: InitPolicy = InitPolicy.DIAGONAL
    seed: int = 0

    def __post_init__(self):
        self.v0_policy = InitPolicy.parse(self.v0_policy)
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be at least 1, got {self.t_max}")
        if self.q_target < 1:
            raise ValueError(f"q_target must be at least 1, got {self.q_target}")

    def validate(self, p: int):
        if self.q_target > p:
            raise ValueError(f"q_target {self.q_target} exceeds the {p} sensors")


@dataclass
class IterationResult:
    """Outcome of one synchronized iteration"""
    v_next: np.ndarray
    converged: bool
    load: LoadReport
    norm: float
    delta_v: float


@dataclass
class PimRunResult:
    """Accepted components, per-component iteration counts and loads"""
    basis: PcaBasis
    node_rows: Dict[int, Tuple[float, ...]]
    iteration_counts: List[int]
    load: LoadReport
    component_loads: List[LoadReport]
    iteration_log: List[Dict[str, float]]
    stop_reason: str

    @property
    def accepted(self) -> int:
        return self.basis.q

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.iteration_log, columns=["component", "iteration", "norm", "delta_v", "load_total"])

    def export_log(self, path: str):
        """Write component,iteration,norm,delta_v,load_total"""
        self.log_frame().to_csv(path, index=False, float_format="%.9g")


def build_pim_network(masked: MaskedCovariance, mean: Optional[Union[Sequence[float], np.ndarray]] = None) -> List[PimNodeState]:
    """Install each sensor's covariance row and training mean"""
    ids = masked.sensor_ids
    mean = np.zeros(len(ids)) if mean is None else np.asarray(mean, dtype=float)
    if mean.shape != (len(ids),):
        raise DimensionError(f"Mean has shape {mean.shape}, expected ({len(ids)},)")
    return [
        PimNodeState(sensor_id, masked.neighborhoods.of(sensor_id), masked.row(sensor_id), float(mean[k]))
        for k, sensor_id in enumerate(ids)
    ]


def network_from_cov_states(states: Sequence[NodeCovState]) -> List[PimNodeState]:
    """Nodes keep their own streamed rows and means; no matrix is ever assembled"""
    common_epochs(states)
    return [
        PimNodeState(state.sensor_id, state.neighbors, state.cov_row(), state.mean())
        for state in states
    ]


def local_matvec(node: PimNodeState, neighbor_v: Mapping[int, float]) -> float:
    """(C v)[i] = sum over j in N_i and i of c_ij v[j], in node-id order"""
    if set(neighbor_v) != set(node.neighbors):
        missing = sorted(set(node.neighbors) - set(neighbor_v))
        raise IncompleteRoundError(f"Node {node.sensor_id} is missing neighbor values {missing}")
    total = 0.0
    for j in sorted(set(node.neighbors) | {node.sensor_id}):
        v_j = node.v_local if j == node.sensor_id else float(neighbor_v[j])
        total += node.cov_row.get(j, 0.0) * v_j
    return total


def aggregate_scalars(tree: RoutingTree, per_node: Union[Mapping[int, Sequence[float]], np.ndarray]) -> Tuple[np.ndarray, LoadReport]:
    """
    Componentwise sums over all nodes through one A operation

    Args:
        tree: routing tree
        per_node: sensor id -> vector of q scalars, or a p x q array in sensor-id order
    """
    ids = tree.sensor_ids
    if isinstance(per_node, Mapping):
        rows = {int(i): np.atleast_1d(np.asarray(v, dtype=float)) for i, v in per_node.items()}
    else:
        array = np.asarray(per_node, dtype=float)
        if array.ndim == 1:
            array = array[:, None]
        rows = {sensor_id: array[k] for k, sensor_id in enumerate(ids)}
    if set(rows) != set(ids):
        raise DimensionError("Per-node values do not cover the tree's sensors")
    sizes = {row.shape[0] for row in rows.values()}
    if len(sizes) != 1:
        raise DimensionError(f"Per-node vectors differ in length: {sorted(sizes)}")
    size = sizes.pop()

    spec = vector_sum_spec(size, lambda sensor_id, _: rows[sensor_id])
    sums, load = AggregationEngine(tree).run_aggregate_epoch(spec, np.zeros(len(ids)))
    return sums, load


def _exchange(network: Sequence[PimNodeState]) -> Dict[int, float]:
    return {node.sensor_id: node.v_local for node in network}


def pim_iteration(network: Sequence[PimNodeState], tree: RoutingTree, k: int,
                  delta: float = 1e-3) -> IterationResult:
    """
    One synchronized iteration for component k (1-based)

    Phases: neighbor exchange, local mat-vec, aggregation of the norm and
    k - 1 scalar products, feedback of the k scalars, local update.
    Nodes' v_local are replaced by the new iterate.
    """
    if any(len(node.w_locals) != k - 1 for node in network):
        raise DimensionError(f"Component {k} needs {k - 1} accepted components at every node")
    ids = tree.sensor_ids
    if tuple(node.sensor_id for node in network) != ids:
        raise DimensionError("Network nodes must match the tree's sensors, in id order")
    engine = AggregationEngine(tree)
    neighborhoods = Neighborhoods({node.sensor_id: frozenset(node.neighbors) for node in network}, float("nan"))

    heard = _exchange(network)
    v_t = np.array([node.v_local for node in network])
    u = np.array([local_matvec(node, {j: heard[j] for j in node.neighbors}) for node in network])

    records = np.array([[u_i * u_i] + [u_i * w for w in node.w_locals] for u_i, node in zip(u, network)])
    sums, aggregate_load = aggregate_scalars(tree, records)
    feedback_load = engine.run_feedback(k)
    load = exchange_loads(neighborhoods) + aggregate_load + feedback_load

    norm = float(np.sqrt(sums[0]))
    if norm == 0.0:
        raise ZeroNormError(f"Aggregated norm is zero at component {k}", load)
    dots = sums[1:]
    for u_i, node in zip(u, network):
        node.v_local = (u_i - float(np.dot(dots, node.w_locals))) / norm if k > 1 else u_i / norm

    v_next = np.array([node.v_local for node in network])
    aligned = v_next if np.dot(v_next, v_t) >= 0 else -v_next
    delta_v = float(np.linalg.norm(aligned - v_t))
    return IterationResult(v_next, delta_v <= delta, load, norm, delta_v)


def _initialize(network: Sequence[PimNodeState], tree: RoutingTree, policy: InitPolicy,
                rng: np.random.Generator) -> LoadReport:
    """Set v0, then scale it to unit norm with one A(1) and one F(1)"""
    if policy is InitPolicy.DIAGONAL:
        for node in network:
            node.v_local = node.cov_row.get(node.sensor_id, 0.0)
    if policy is InitPolicy.RANDOM or all(node.v_local == 0.0 for node in network):
        draws = rng.standard_normal(len(network))
        for node, value in zip(network, draws):
            node.v_local = float(value)
    sums, aggregate_load = aggregate_scalars(tree, np.array([node.v_local * node.v_local for node in network]))
    norm = float(np.sqrt(sums[0]))
    for node in network:
        node.v_local /= norm
    return aggregate_load + AggregationEngine(tree).run_feedback(1)


def _acceptance_round(network: Sequence[PimNodeState], tree: RoutingTree,
                      v_t: np.ndarray) -> Tuple[int, float, LoadReport]:
    """
    Aggregate sign(v_t[i] v_t+1[i]), v_t+1[i]^2 and v_t[i] v_t+1[i], then
    feed back the normalizer
    """
    records = np.array([
        [np.sign(v_prev * node.v_local), node.v_local * node.v_local, v_prev * node.v_local]
        for v_prev, node in zip(v_t, network)
    ])
    sums, aggregate_load = aggregate_scalars(tree, records)
    feedback_load = AggregationEngine(tree).run_feedback(1)
    sign = int(np.sign(sums[0]))
    if sign == 0:
        sign = int(np.sign(sums[2]))
    return sign, float(np.sqrt(sums[1])), aggregate_load + feedback_load


def run_distributed_pim(network: Sequence[PimNodeState], tree: RoutingTree, config: PimConfig) -> PimRunResult:
    """
    Extract up to q_target components; stop early on a nonpositive eigenvalue
    or a zero aggregated norm. Nodes end holding their w_i1..w_ik.
    """
    config.validate(len(network))
    rng = np.random.default_rng(config.seed)
    total = LoadReport.zeros(tree.sensor_ids)
    component_loads: List[LoadReport] = []
    iteration_counts: List[int] = []
    iteration_log: List[Dict[str, float]] = []
    pairs: List[EigenPair] = []
    stop_reason = "q_target reached"

    for k in range(1, config.q_target + 1):
        total = total + _initialize(network, tree, config.v0_policy, rng)
        retried = False
        aborted = False
        t = 0
        norm = 0.0
        v_t = np.array([node.v_local for node in network])
        while t < config.t_max:
            v_t = np.array([node.v_local for node in network])
            try:
                result = pim_iteration(network, tree, k, config.delta)
            except ZeroNormError as e:
                # the failed round still went over the air
                if e.load is not None:
                    total = total + e.load
                if t == 0 and not retried:
                    logger.warning(f"Component {k}: start vector gives zero norm - retrying with a random start")
                    total = total + _initialize(network, tree, InitPolicy.RANDOM, rng)
                    retried = True
                    continue
                logger.warning(f"Component {k}: {e} - stopping with {len(pairs)} components")
                stop_reason = f"zero-norm iterate at component {k}"
                aborted = True
                break
            t += 1
            norm = result.norm
            total = total + result.load
            iteration_log.append({
                "component": k,
                "iteration": t,
                "norm": result.norm,
                "delta_v": result.delta_v,
                "load_total": result.load.total,
            })
            if result.converged:
                break
        iteration_counts.append(t)
        if aborted:
            component_loads.append(total)
            break

        sign, final_norm, acceptance_load = _acceptance_round(network, tree, v_t)
        total = total + acceptance_load
        component_loads.append(total)
        if sign <= 0:
            stop_reason = f"nonpositive eigenvalue at component {k}"
            logger.warning(f"Component {k} has a nonpositive eigenvalue - stopping with {len(pairs)} components")
            break
        if final_norm == 0.0:
            stop_reason = f"zero-norm iterate at component {k}"
            logger.warning(f"Component {k} collapsed to zero - stopping with {len(pairs)} components")
            break

        w = np.array([node.v_local for node in network]) / final_norm
        # lowest-id sensor with a nonzero entry ends positive
        w = w * canonical_sign(w)
        for node, w_i in zip(network, w):
            node.w_locals.append(float(w_i))
        # ||C v_t|| over ||v_t+1|| once v_t and v_t+1 agree
        value = norm / final_norm
        pairs.append(EigenPair.canonical(w, value))
        logger.info(f"Component {k} accepted: lambda={value:.6g} after {t} iterations")

    order = sorted(range(len(pairs)), key=lambda m: -pairs[m].value)
    mean = np.array([node.mean for node in network])
    basis = PcaBasis(tuple(pairs[m] for m in order), mean)
    node_rows = {node.sensor_id: tuple(node.w_locals[m] for m in order) for node in network}
    return PimRunResult(basis, node_rows, iteration_counts, total, component_loads, iteration_log, stop_reason)


def distribute_basis_centralized(tree: RoutingTree, basis: PcaBasis) -> LoadReport:
    """Cost of flooding q x p basis coefficients from the root (centralized scheme)"""
    payload = basis.q * basis.p
    if payload == 0:
        return LoadReport.zeros(tree.sensor_ids)
    return AggregationEngine(tree).run_feedback(payload)
