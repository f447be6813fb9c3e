"""
Simulation runner
Loads the configuration, prepares field and trace, and runs one
subcommand pipeline writing its CSVs to the output directory
"""

import copy
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv

from .dist_cov import mask_covariance, stream_cov_states, stream_masked_covariance
from .dist_pim import PimConfig, distribute_basis_centralized, network_from_cov_states, run_distributed_pim
from .errors import ConfigError, ConnectivityError
from .experiments import EIGEN_METHODS, ExperimentConfig, ExperimentHarness, export_reports
from .io_data import BUCKET_STATS, EpochTrace, SynthSpec, generate_field, generate_synthetic, load_trace
from .linalg import (
    InitPolicy,
    PcaBasis,
    basis_from_pairs,
    compute_basis,
    covariance_batch,
    reference_eigendecomposition,
    retained_variance,
)
from .logging_utils import SummaryPrinter, setup_logging
from .pcag_runtime import SupervisedCompression
from .topology import (
    Neighborhoods,
    RoutingTree,
    SensorField,
    build_neighborhoods,
    build_routing_tree,
    export_positions,
    export_tree,
    load_positions,
    restrict_field,
    tree_stats,
)

SUBCOMMANDS = ("tree", "cov", "basis", "pim", "score", "xval", "loads", "synth")


def _parse_scalar(text: str) -> Any:
    """YAML typing for override values: '10' -> 10, 'null' -> None, '[1, 2]' -> list"""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse override value '{text}': {e}") from e


def apply_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set section.key=value pairs on a copy of the configuration"""
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = config
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Override {dotted}: '{key}' is not a section")
            node = child
        node[keys[-1]] = _parse_scalar(value) if isinstance(value, str) else value
    return config


class PcagRunner:
    """Runs one subcommand from a YAML configuration"""

    def __init__(self, config_path: str = "config.yaml", overrides: Optional[Dict[str, Any]] = None):
        if not os.path.exists(config_path):
            raise ConfigError(f"Config file {config_path} not found")
        try:
            with open(config_path, "r") as f:
                config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {config_path}: {e}") from e
        if not isinstance(config, dict):
            raise ConfigError(f"{config_path} must hold a mapping of sections")

        load_dotenv()
        env_output = os.getenv("PCAG_OUTPUT_DIR")
        if env_output:
            config.setdefault("output", {})["dir"] = env_output
        self.config = apply_overrides(config, overrides or {})

        log_section = self.config.get("logging", {}) or {}
        setup_logging(log_section.get("level", "INFO"),
                      log_section.get("format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        self.logger = logging.getLogger(__name__)
        self.printer = SummaryPrinter()

        self.seed = int(self.config.get("seed", 0))
        self._validate()
        self.output_dir = self.section("output").get("dir", "results")
        self._field: Optional[SensorField] = None
        self._trace: Optional[EpochTrace] = None
        self.logger.info(f"Runner initialized from {config_path} (output {self.output_dir})")

    def section(self, name: str) -> Dict[str, Any]:
        return self.config.get(name, {}) or {}

    # Validation

    def _validate(self):
        """Range checks that do not need the data; the rest happen once data is loaded"""
        pim = self.section("pim")
        runtime = self.section("runtime")
        try:
            PimConfig(int(pim.get("q", 1)), float(pim.get("delta", 1e-3)), int(pim.get("t_max", 50)),
                      pim.get("v0_policy", "diagonal"), self.seed)
            self.experiment_config()
            InitPolicy.parse(self.section("basis").get("v0_policy", "diagonal"))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

        epsilon = runtime.get("epsilon")
        if epsilon is not None and float(epsilon) < 0:
            raise ConfigError(f"runtime.epsilon must be >= 0, got {epsilon}")
        if int(runtime.get("q", 1)) < 1:
            raise ConfigError("runtime.q must be >= 1")
        if self.section("data").get("bucket_stat", "last") not in BUCKET_STATS:
            raise ConfigError(f"data.bucket_stat must be one of {BUCKET_STATS}")
        if self.section("basis").get("method", "reference") not in EIGEN_METHODS[:2]:
            raise ConfigError("basis.method must be 'reference' or 'power'")
        radio_range = float(self.section("topology").get("radio_range", 10.0))
        if radio_range <= 0:
            raise ConfigError(f"topology.radio_range must be positive, got {radio_range}")

    def _check_q(self, q: int, p: int, key: str):
        if q > p:
            raise ConfigError(f"{key}={q} exceeds the {p} sensors")

    def experiment_config(self) -> ExperimentConfig:
        try:
            return ExperimentConfig.from_dict(self.section("experiments"), self.seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    # Data

    def field(self) -> SensorField:
        if self._field is None:
            self._load_data()
        return self._field

    def trace(self) -> EpochTrace:
        if self._trace is None:
            self._load_data()
        return self._trace

    def _synthetic_field(self) -> SensorField:
        synth = self.section("synthetic")
        return generate_field(int(synth.get("p", 52)), float(synth.get("width", 40.0)),
                              float(synth.get("height", 30.0)), self.seed)

    def _synthetic_trace(self, field: SensorField) -> EpochTrace:
        synth = self.section("synthetic")
        try:
            spec = SynthSpec(
                p=field.p,
                T=int(synth.get("T", 2000)),
                correlation_length=float(synth.get("correlation_length", 10.0)),
                noise_level=float(synth.get("noise_level", 0.1)),
                seed=self.seed,
                sources=int(synth.get("sources", 3)),
                epoch_seconds=float(self.section("data").get("epoch_seconds", 30.0)),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return generate_synthetic(spec, field)

    def _load_data(self):
        data = self.section("data")
        positions_path = data.get("positions")
        trace_path = data.get("trace")
        for path in (positions_path, trace_path):
            if path and not os.path.exists(path):
                raise ConfigError(f"Data file {path} not found")

        field = load_positions(positions_path, data.get("root_id")) if positions_path else self._synthetic_field()
        if trace_path:
            trace = load_trace(trace_path, float(data.get("epoch_seconds", 30.0)),
                               data.get("excluded", []) or [], data.get("bucket_stat", "last"))
            epochs = data.get("max_epochs")
            if epochs:
                trace = trace.subset(epochs=slice(0, int(epochs)))
            missing = set(trace.sensor_ids) - set(field.sensor_ids)
            if missing:
                raise ConfigError(f"Trace sensors {sorted(missing)} have no position")
            field = restrict_field(field, trace.sensor_ids)
        else:
            excluded = set(int(i) for i in (data.get("excluded", []) or []))
            if positions_path and excluded:
                field = restrict_field(field, [i for i in field.sensor_ids if i not in excluded])
            trace = self._synthetic_trace(field)
        self._field, self._trace = field, trace
        self.logger.info(f"Data ready: {trace.p} sensors, {trace.T} epochs")

    # Shared steps

    def radio_range(self) -> float:
        return float(self.section("topology").get("radio_range", 10.0))

    def routing(self) -> Tuple[RoutingTree, Neighborhoods]:
        field = self.field()
        radio_range = self.radio_range()
        try:
            tree = build_routing_tree(field, radio_range)
        except ConnectivityError as e:
            raise ConfigError(f"{e}; the smallest connecting range is needed") from e
        return tree, build_neighborhoods(field, radio_range)

    def _neighborhoods_for_covariance(self, neighborhoods: Neighborhoods) -> Neighborhoods:
        if self.section("covariance").get("masked", True):
            return neighborhoods
        return Neighborhoods.complete(neighborhoods.sensor_ids)

    def _training_samples(self) -> np.ndarray:
        """First covariance.train_epochs epochs of the trace, or all of it"""
        samples = self.trace().samples()
        train_epochs = self.section("covariance").get("train_epochs")
        if not train_epochs:
            return samples
        if not 2 <= int(train_epochs) <= samples.shape[0]:
            raise ConfigError(f"covariance.train_epochs must be in [2, {samples.shape[0]}], got {train_epochs}")
        return samples[:int(train_epochs)]

    def _path(self, name: str) -> str:
        os.makedirs(self.output_dir, exist_ok=True)
        return os.path.join(self.output_dir, name)

    def _centralized_basis(self, samples: np.ndarray, q: int, neighborhoods: Optional[Neighborhoods]) -> PcaBasis:
        basis_section = self.section("basis")
        C = covariance_batch(samples)
        if neighborhoods is not None:
            C = mask_covariance(C, neighborhoods).matrix
        mean = samples.mean(axis=0)
        if basis_section.get("method", "reference") == "reference":
            return basis_from_pairs(reference_eigendecomposition(C), mean, q)
        pim = self.section("pim")
        return compute_basis(C, q, float(pim.get("delta", 1e-3)), int(pim.get("t_max", 50)),
                             basis_section.get("v0_policy", "diagonal"), self.seed, mean)

    def _export_basis(self, basis: PcaBasis, path: str):
        frame = pd.DataFrame(basis.W, columns=[f"w_{k + 1}" for k in range(basis.q)])
        frame.insert(0, "mean", basis.mean)
        frame.insert(0, "sensor_id", list(self.trace().sensor_ids))
        frame.to_csv(path, index=False, float_format="%.9g")

    # Subcommands

    def run_tree(self) -> Dict[str, Any]:
        tree, neighborhoods = self.routing()
        stats = tree_stats(tree)
        export_tree(tree, self._path("tree.csv"))
        return {
            "p": tree.p,
            "range": self.radio_range(),
            "depth": stats.depth,
            "C_max": stats.max_children,
            "root": tree.root,
            "max_neighbors": neighborhoods.max_size(),
        }

    def run_cov(self) -> Dict[str, Any]:
        _, neighborhoods = self.routing()
        neighborhoods = self._neighborhoods_for_covariance(neighborhoods)
        samples = self._training_samples()
        masked, load = stream_masked_covariance(samples, neighborhoods)
        masked.to_csv(self._path("covariance.csv"))
        load.to_csv(self._path("covariance_loads.csv"))
        return {
            "p": len(masked.sensor_ids),
            "epochs": samples.shape[0],
            "entries": int(neighborhoods.mask().sum()),
            "max_load_per_epoch": load.max_node_load / samples.shape[0],
        }

    def run_basis(self) -> Dict[str, Any]:
        trace = self.trace()
        q = int(self.section("pim").get("q", 1))
        self._check_q(q, trace.p, "pim.q")
        neighborhoods = None
        if self.section("covariance").get("masked", True):
            _, neighborhoods = self.routing()
        samples = self._training_samples()
        basis = self._centralized_basis(samples, q, neighborhoods)
        self._export_basis(basis, self._path("basis.csv"))
        spectrum = reference_eigendecomposition(covariance_batch(samples))
        total = [max(pair.value, 0.0) for pair in spectrum]
        return {
            "q": basis.q,
            "lambda_1": float(basis.values[0]) if basis.q else 0.0,
            "train_retained": retained_variance(total, basis.q) if basis.q else 0.0,
        }

    def run_pim(self) -> Dict[str, Any]:
        tree, neighborhoods = self.routing()
        neighborhoods = self._neighborhoods_for_covariance(neighborhoods)
        pim = self.section("pim")
        trace = self.trace()
        q = int(pim.get("q", 1))
        self._check_q(q, trace.p, "pim.q")
        samples = self._training_samples()

        states, cov_load = stream_cov_states(samples, neighborhoods)
        network = network_from_cov_states(states)
        config = PimConfig(q, float(pim.get("delta", 1e-3)), int(pim.get("t_max", 50)),
                           pim.get("v0_policy", "diagonal"), self.seed)
        result = run_distributed_pim(network, tree, config)
        result.export_log(self._path("pim_iterations.csv"))
        result.load.to_csv(self._path("pim_loads.csv"))
        self._export_basis(result.basis, self._path("pim_basis.csv"))
        dissemination = distribute_basis_centralized(tree, result.basis)
        return {
            "accepted": result.accepted,
            "iterations": ",".join(str(t) for t in result.iteration_counts),
            "mean_load": result.load.mean_node_load,
            "max_load": result.load.max_node_load,
            "centralized_dissemination_max": dissemination.max_node_load,
            "covariance_max_load": cov_load.max_node_load,
            "stop": result.stop_reason.replace(" ", "_"),
        }

    def run_score(self) -> Dict[str, Any]:
        tree, neighborhoods = self.routing()
        runtime = self.section("runtime")
        trace = self.trace()
        q = int(runtime.get("q", 1))
        self._check_q(q, trace.p, "runtime.q")
        samples = trace.samples()
        masked = self.section("covariance").get("masked", True)
        basis = self._centralized_basis(self._training_samples(), q, neighborhoods if masked else None)

        epsilon = runtime.get("epsilon")
        q_prime = runtime.get("q_prime")
        if q_prime is not None and not 1 <= int(q_prime) <= basis.q:
            raise ConfigError(f"runtime.q_prime must be in [1, {basis.q}], got {q_prime}")
        compression = SupervisedCompression(tree, basis, None if epsilon is None else float(epsilon),
                                            None if q_prime is None else int(q_prime))
        epochs = runtime.get("epochs")
        run = compression.run(samples if not epochs else samples[:int(epochs)])
        run.export_scores(self._path("scores.csv"))
        run.export_reconstruction(self._path("reconstruction.csv"))
        run.load.to_csv(self._path("runtime_loads.csv"))
        return {
            "epochs": run.epochs,
            "q": compression.basis.q,
            "violations": run.violation_count,
            "max_known_error": run.max_known_error(),
            "max_load": run.load.max_node_load,
        }

    def run_xval(self) -> Dict[str, Any]:
        config = self.experiment_config()
        trace = self.trace()
        if config.folds > trace.T:
            raise ConfigError(f"experiments.folds={config.folds} exceeds the {trace.T} epochs")
        self._check_q(config.q_max, trace.p, "experiments.q_values")
        harness = ExperimentHarness(config, trace, self.field())

        reports = [harness.xval_retained_variance()]
        options = self.section("experiments")
        if options.get("masked_study", False):
            reports.append(harness.masked_retained_variance())
        if options.get("accuracy_study", False):
            reports.append(harness.pim_accuracy_study())
        if options.get("k_sweep", False):
            reports.append(harness.k_sweep())
        export_reports(reports, self.output_dir)

        xval = reports[0]
        upper = xval.frame.groupby("q")["upper_bound"].mean()
        self.printer.print_retained_variance(xval.summary, {f"q={q}": float(v) for q, v in upper.items()})
        return {"folds": config.folds, "rows": len(xval.frame), **xval.summary}

    def run_loads(self) -> Dict[str, Any]:
        config = self.experiment_config()
        harness = ExperimentHarness(config, self.trace(), self.field())
        reports = harness.load_study()
        export_reports(reports, self.output_dir)
        loads = reports[0].frame
        self.printer.print_load_table(loads)
        skipped = reports[0].summary.get("skipped_ranges", [])
        return {
            "ranges": len(config.radio_ranges) - len(skipped),
            "skipped": ",".join(f"{r:g}" for r in skipped) or "none",
        }

    def run_synth(self) -> Dict[str, Any]:
        field = self.field() if self.section("data").get("positions") else self._synthetic_field()
        trace = self._synthetic_trace(field)
        trace.to_csv(self._path("synthetic_trace.csv"))
        export_positions(field, self._path("synthetic_positions.csv"))
        return {"p": trace.p, "T": trace.T, "root": field.root_id}

    def run(self, command: str) -> Dict[str, Any]:
        if command not in SUBCOMMANDS:
            raise ConfigError(f"Unknown subcommand '{command}'")
        summary = getattr(self, f"run_{command}")()
        self.printer.print_summary(command, summary)
        return summary


def create_runner(config_path: str = "config.yaml", overrides: Optional[Dict[str, Any]] = None) -> PcagRunner:
    """Factory function to create a runner"""
    return PcagRunner(config_path, overrides)
