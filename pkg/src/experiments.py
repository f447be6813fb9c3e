"""
Experiment harness
Cross-validated retained variance, PIM accuracy against the exact
decomposition, and network-load studies over the radio-range sweep
"""

import logging
import os
import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .aggregation import LoadReport, Operation, analytic_loads
from .dist_cov import exchange_loads, hybrid_collection_loads, mask_covariance, stream_cov_states
from .dist_pim import (
    PimConfig,
    build_pim_network,
    distribute_basis_centralized,
    network_from_cov_states,
    run_distributed_pim,
)
from .errors import ConnectivityError, DegenerateInputError
from .io_data import EpochTrace
from .linalg import (
    InitPolicy,
    PcaBasis,
    basis_from_pairs,
    compute_basis,
    covariance_batch,
    empirical_retained_variance,
    reference_eigendecomposition,
)
from .topology import (
    Neighborhoods,
    RoutingTree,
    SensorField,
    build_neighborhoods,
    build_routing_tree,
    tree_stats,
)

logger = logging.getLogger(__name__)

EIGEN_METHODS = ("reference", "power", "distributed")


@dataclass
class ExperimentConfig:
    """Experiment parameters; see the experiments section of config.yaml"""
    folds: int = 10
    q_values: List[int] = field(default_factory=lambda: list(range(1, 16)))
    radio_ranges: List[float] = field(default_factory=lambda: [6.0, 8.0, 10.0, 15.0, 20.0, 30.0, 50.0])
    delta: float = 1e-3
    t_max: int = 50
    iteration_budgets: List[int] = field(default_factory=lambda: [5, 10, 20, 30, 40, 50])
    eigen_method: str = "reference"
    v0_policy: str = "diagonal"
    load_q_values: List[int] = field(default_factory=lambda: [1, 5, 15])
    k_values: List[int] = field(default_factory=lambda: [2, 5, 10, 15, 20, 30])
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not self.q_values or min(self.q_values) < 1:
            raise ValueError("q_values must be positive")
        if any(r <= 0 for r in self.radio_ranges):
            raise ValueError("radio ranges must be positive")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.t_max < 1 or any(b < 1 for b in self.iteration_budgets):
            raise ValueError("iteration budgets must be >= 1")
        if self.eigen_method not in EIGEN_METHODS:
            raise ValueError(f"Unknown eigen method '{self.eigen_method}' (use one of {EIGEN_METHODS})")
        InitPolicy.parse(self.v0_policy)
        self.q_values = sorted(int(q) for q in self.q_values)

    @classmethod
    def from_dict(cls, section: Dict[str, Any], seed: int = 0) -> "ExperimentConfig":
        defaults = cls()
        return cls(
            folds=int(section.get("folds", defaults.folds)),
            q_values=list(section.get("q_values", defaults.q_values)),
            radio_ranges=[float(r) for r in section.get("radio_ranges", defaults.radio_ranges)],
            delta=float(section.get("delta", defaults.delta)),
            t_max=int(section.get("t_max", defaults.t_max)),
            iteration_budgets=[int(b) for b in section.get("iteration_budgets", defaults.iteration_budgets)],
            eigen_method=str(section.get("eigen_method", defaults.eigen_method)),
            v0_policy=str(section.get("v0_policy", defaults.v0_policy)),
            load_q_values=[int(q) for q in section.get("load_q_values", defaults.load_q_values)],
            k_values=[int(k) for k in section.get("k_values", defaults.k_values)],
            seed=int(section.get("seed", seed)),
        )

    @property
    def q_max(self) -> int:
        return max(self.q_values)


@dataclass
class MetricsReport:
    """One result table plus its headline numbers"""
    name: str
    frame: pd.DataFrame
    summary: Dict[str, Any] = field(default_factory=dict)

    def to_csv(self, output_dir: str) -> str:
        """Write <output_dir>/<name>.csv and return the path"""
        os.makedirs(output_dir, exist_ok=True)
        path = os.path.join(output_dir, f"{self.name}.csv")
        self.frame.to_csv(path, index=False, float_format="%.9g")
        return path


def kfold_split(T: int, K: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    K consecutive blocks of epochs; block k trains, the rest tests

    Returns:
        [(train_epochs, test_epochs), ...] as index arrays
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if T < K:
        raise ValueError(f"Cannot split {T} epochs into {K} blocks")
    blocks = np.array_split(np.arange(T), K)
    return [
        (block, np.concatenate([other for m, other in enumerate(blocks) if m != k]))
        for k, block in enumerate(blocks)
    ]


class ExperimentHarness:
    """
    Runs the accuracy and load studies over one trace

    The field is needed for anything involving radio ranges; without it
    only the full-covariance accuracy studies are available.
    """

    def __init__(self, config: ExperimentConfig, trace: EpochTrace, field: Optional[SensorField] = None):
        self.config = config
        self.trace = trace
        self.field = field
        self.samples = trace.samples()
        self.logger = logging.getLogger(__name__)
        if field is not None and field.sensor_ids != trace.sensor_ids:
            raise ValueError("Field and trace cover different sensors")

    # Basis fitting

    def _q_range(self) -> List[int]:
        return [q for q in self.config.q_values if q <= self.trace.p]

    def fit_basis(self, train: np.ndarray, q_max: int, neighborhoods: Optional[Neighborhoods] = None,
                  method: Optional[str] = None, t_max: Optional[int] = None) -> PcaBasis:
        """
        Train a basis on a block of epochs

        Args:
            train: T_train x p samples
            q_max: components to extract
            neighborhoods: mask the covariance to these, when given
            method: reference, power or distributed; defaults to the config's
            t_max: iteration budget override for the power methods
        """
        method = method or self.config.eigen_method
        t_max = t_max or self.config.t_max
        if train.shape[0] < 2:
            raise DegenerateInputError(f"Training block has {train.shape[0]} epochs, need at least 2")
        C = covariance_batch(train)
        mean = train.mean(axis=0)
        if neighborhoods is not None:
            C = mask_covariance(C, neighborhoods).matrix

        if method == "reference":
            return basis_from_pairs(reference_eigendecomposition(C), mean, q_max)
        if method == "power":
            return compute_basis(C, q_max, self.config.delta, t_max, self.config.v0_policy, self.config.seed, mean)

        neighborhoods = neighborhoods or Neighborhoods.complete(self.trace.sensor_ids)
        tree = self._tree_for(neighborhoods)
        network = build_pim_network(mask_covariance(C, neighborhoods), mean)
        config = PimConfig(q_max, self.config.delta, t_max, self.config.v0_policy, self.config.seed)
        return run_distributed_pim(network, tree, config).basis

    def _tree_for(self, neighborhoods: Neighborhoods) -> RoutingTree:
        # star when there is no geometry to route over
        if self.field is not None and np.isfinite(neighborhoods.radio_range):
            return build_routing_tree(self.field, neighborhoods.radio_range)
        return RoutingTree.star(self.trace.sensor_ids)

    @staticmethod
    def _retained(basis: PcaBasis, q: int, test: np.ndarray) -> float:
        return empirical_retained_variance(basis.truncated(min(q, basis.q)), test)

    # Accuracy studies

    def xval_retained_variance(self) -> MetricsReport:
        """Per fold and q: test retained variance and the train-on-test upper bound"""
        rows = []
        q_range = self._q_range()
        for fold, (train_idx, test_idx) in enumerate(kfold_split(self.trace.T, self.config.folds)):
            train, test = self.samples[train_idx], self.samples[test_idx]
            basis = self.fit_basis(train, max(q_range))
            upper = self.fit_basis(test, max(q_range), method="reference")
            for q in q_range:
                rows.append({
                    "fold": fold,
                    "q": q,
                    "retained_variance": self._retained(basis, q, test),
                    "upper_bound": self._retained(upper, q, test),
                })
            self.logger.debug(f"Fold {fold} done")

        frame = pd.DataFrame(rows, columns=["fold", "q", "retained_variance", "upper_bound"])
        means = frame.groupby("q")["retained_variance"].mean()
        summary = {f"q={q}": float(v) for q, v in means.items()}
        self.logger.info(
            f"Cross-validated retained variance ({self.config.folds} folds, {self.config.eigen_method}): "
            + ", ".join(f"{k} {v:.3f}" for k, v in summary.items())
        )
        return MetricsReport("fig9_retained_variance", frame, summary)

    def masked_retained_variance(self) -> MetricsReport:
        """
        Cross-validated retained variance with the covariance masked per radio range.
        Ranges that disconnect the field (distributed method only) are
        listed under skipped_ranges.
        """
        if self.field is None:
            raise ValueError("Masked covariance studies need sensor positions")
        rows = []
        skipped = []
        q_range = self._q_range()
        splits = kfold_split(self.trace.T, self.config.folds)
        for radio_range in self.config.radio_ranges:
            neighborhoods = build_neighborhoods(self.field, radio_range)
            try:
                for fold, (train_idx, test_idx) in enumerate(splits):
                    basis = self.fit_basis(self.samples[train_idx], max(q_range), neighborhoods)
                    for q in q_range:
                        rows.append({
                            "radio_range": radio_range,
                            "fold": fold,
                            "q": q,
                            "retained_variance": self._retained(basis, q, self.samples[test_idx]),
                        })
            except ConnectivityError as e:
                self.logger.warning(f"Skipping {radio_range:g} m: {e}")
                skipped.append(radio_range)

        frame = pd.DataFrame(rows, columns=["radio_range", "fold", "q", "retained_variance"])
        return MetricsReport("fig12_masked_retained_variance", frame, {"skipped_ranges": skipped})

    def pim_accuracy_study(self) -> MetricsReport:
        """Retained-variance loss of budget-limited power iteration against the exact basis"""
        rows = []
        q_range = self._q_range()
        for fold, (train_idx, test_idx) in enumerate(kfold_split(self.trace.T, self.config.folds)):
            train, test = self.samples[train_idx], self.samples[test_idx]
            exact = self.fit_basis(train, max(q_range), method="reference")
            for budget in self.config.iteration_budgets:
                approx = self.fit_basis(train, max(q_range), method="power", t_max=budget)
                for q in q_range:
                    reference = self._retained(exact, q, test)
                    pim = self._retained(approx, q, test)
                    rows.append({
                        "fold": fold,
                        "budget": budget,
                        "q": q,
                        "reference": reference,
                        "pim": pim,
                        "difference": reference - pim,
                    })

        frame = pd.DataFrame(rows, columns=["fold", "budget", "q", "reference", "pim", "difference"])
        worst = frame.groupby(["budget", "q"])["difference"].mean().groupby("budget").max()
        summary = {f"budget={b}": float(v) for b, v in worst.items()}
        return MetricsReport("fig14_pim_accuracy", frame, summary)

    def k_sweep(self, q: Optional[int] = None) -> MetricsReport:
        """
        Mean test retained variance as the number of folds K grows

        Args:
            q: component count to score; defaults to min(largest q, 4)

        Unusable K values are skipped with a warning.
        """
        q = q or min(max(self._q_range()), 4)
        rows = []
        for K in self.config.k_values:
            if K < 2:
                self.logger.warning(f"Skipping K={K}: cross-validation needs at least 2 folds")
                continue
            if K > self.trace.T:
                self.logger.warning(f"Skipping K={K}: only {self.trace.T} epochs")
                continue
            values = []
            for train_idx, test_idx in kfold_split(self.trace.T, K):
                if train_idx.shape[0] < 2:
                    break
                basis = self.fit_basis(self.samples[train_idx], q)
                values.append(self._retained(basis, q, self.samples[test_idx]))
            else:
                rows.append({"K": K, "q": q, "retained_variance": float(np.mean(values)),
                             "spread": float(np.std(values))})
                continue
            self.logger.warning(f"Skipping K={K}: training blocks too short")
        return MetricsReport("k_sweep", pd.DataFrame(rows, columns=["K", "q", "retained_variance", "spread"]))

    # Load studies

    @staticmethod
    def _summary_row(load: LoadReport, **keys) -> Dict[str, Any]:
        row = dict(keys)
        row.update(load.summary())
        return row

    def load_study(self) -> List[MetricsReport]:
        """
        Per radio range: default vs aggregation loads, per-node detail,
        covariance-round loads and cumulative distributed PIM loads next to
        centralized dissemination and hybrid collection
        """
        if self.field is None:
            raise ValueError("Load studies need sensor positions")
        operation_rows, node_rows, cov_rows, pim_rows = [], [], [], []
        skipped: List[float] = []

        for radio_range in self.config.radio_ranges:
            try:
                tree = build_routing_tree(self.field, radio_range)
            except ConnectivityError as e:
                self.logger.warning(f"Skipping {radio_range:g} m: {e}")
                skipped.append(radio_range)
                continue
            stats = tree_stats(tree)
            neighborhoods = build_neighborhoods(self.field, radio_range)

            default = analytic_loads(tree, Operation.default())
            operation_rows.append(self._summary_row(default, radio_range=radio_range, operation="D"))
            for q in self.config.load_q_values:
                aggregate = analytic_loads(tree, Operation.aggregate(q))
                operation_rows.append(self._summary_row(aggregate, radio_range=radio_range, operation=f"A({q})"))

            aggregate_1 = analytic_loads(tree, Operation.aggregate(1))
            for sensor_id in tree.sensor_ids:
                node_rows.append({
                    "radio_range": radio_range,
                    "sensor_id": sensor_id,
                    "depth": tree.depth[sensor_id],
                    "children": stats.children_counts[sensor_id],
                    "default": default.load_of(sensor_id),
                    "aggregate": aggregate_1.load_of(sensor_id),
                })

            cov_rows.append(self._summary_row(
                exchange_loads(neighborhoods), radio_range=radio_range,
                max_neighbors=neighborhoods.max_size(),
            ))

            pim_rows.extend(self._pim_load_rows(tree, neighborhoods, radio_range))
            self.logger.info(
                f"{radio_range:g} m: depth {stats.depth}, C_max {stats.max_children}, "
                f"default max {default.max_node_load}, A(1) max {aggregate_1.max_node_load}"
            )

        summary = {"skipped_ranges": skipped}
        return [
            MetricsReport("fig10_loads", pd.DataFrame(operation_rows), summary),
            MetricsReport("fig11_node_loads", pd.DataFrame(node_rows), summary),
            MetricsReport("fig13_covariance_loads", pd.DataFrame(cov_rows), summary),
            MetricsReport("fig15_pim_loads", pd.DataFrame(pim_rows), summary),
        ]

    def _pim_load_rows(self, tree: RoutingTree, neighborhoods: Neighborhoods,
                       radio_range: float) -> List[Dict[str, Any]]:
        q_max = min(self.config.q_max, tree.p)
        # nodes start from their own streamed sums, as on the real network
        states, _ = stream_cov_states(self.samples, neighborhoods)
        network = network_from_cov_states(states)
        config = PimConfig(q_max, self.config.delta, self.config.t_max, self.config.v0_policy, self.config.seed)
        run = run_distributed_pim(network, tree, config)
        hybrid = hybrid_collection_loads(tree, neighborhoods)

        rows = []
        for k, cumulative in enumerate(run.component_loads, start=1):
            dissemination = distribute_basis_centralized(tree, run.basis.truncated(min(k, run.basis.q)))
            rows.append({
                "radio_range": radio_range,
                "q": k,
                "iterations": run.iteration_counts[k - 1],
                "pim_mean": cumulative.mean_node_load,
                "pim_max": cumulative.max_node_load,
                "pim_total": cumulative.total,
                "centralized_dissemination_max": dissemination.max_node_load,
                "hybrid_collection_max": hybrid.max_node_load,
            })
        return rows


def export_reports(reports: Sequence[MetricsReport], output_dir: str) -> List[str]:
    """Write one CSV per report"""
    return [report.to_csv(output_dir) for report in reports]
