"""
Unit tests for the distributed power iteration
Oracle comparisons against the centralized path and load accounting
"""

import numpy as np
import pytest

from src.aggregation import LoadReport, Operation, analytic_loads
from src.dist_cov import MaskedCovariance, exchange_loads, mask_covariance, stream_cov_states
from src.dist_pim import (
    PimConfig,
    PimNodeState,
    aggregate_scalars,
    build_pim_network,
    distribute_basis_centralized,
    local_matvec,
    network_from_cov_states,
    pim_iteration,
    run_distributed_pim,
)
from src.errors import DegenerateInputError, IncompleteRoundError
from src.io_data import SynthSpec, generate_field, generate_synthetic
from src.linalg import (
    PcaBasis,
    basis_from_pairs,
    compute_basis,
    covariance_batch,
    power_iteration,
    reference_eigendecomposition,
)
from src.topology import (
    Neighborhoods,
    RoutingTree,
    SensorField,
    build_neighborhoods,
    build_routing_tree,
    minimum_connecting_range,
)


def random_spd(rng, values):
    p = len(values)
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    C = Q @ np.diag(values) @ Q.T
    return (C + C.T) / 2.0


def full_network(C, tree_ids=None):
    ids = tuple(range(1, C.shape[0] + 1))
    neighborhoods = Neighborhoods.complete(ids)
    network = build_pim_network(MaskedCovariance(C, neighborhoods))
    return network, RoutingTree.chain(list(tree_ids or ids))


class TestLocalPrimitives:
    """Test the node-local mat-vec and scalar aggregation"""

    def setup_method(self):
        self.rng = np.random.default_rng(4)

    def test_two_node_matvec(self):
        network, _ = full_network(np.array([[2.0, 1.0], [1.0, 2.0]]))
        for node in network:
            node.v_local = 1.0
        assert local_matvec(network[0], {2: 1.0}) == pytest.approx(3.0)
        assert local_matvec(network[1], {1: 1.0}) == pytest.approx(3.0)

    def test_diagonal_matvec(self):
        node = PimNodeState(1, (), {1: 4.0}, v_local=0.5)
        assert local_matvec(node, {}) == 2.0

    def test_missing_neighbor(self):
        network, _ = full_network(np.eye(3))
        with pytest.raises(IncompleteRoundError):
            local_matvec(network[0], {2: 1.0})

    def test_matvec_matches_dense(self):
        positions = self.rng.uniform(0.0, 20.0, size=(12, 2))
        field = SensorField(tuple(range(1, 13)), positions, 1)
        neighborhoods = build_neighborhoods(field, 8.0)
        A = self.rng.standard_normal((12, 12))
        masked = mask_covariance(A @ A.T, neighborhoods)
        network = build_pim_network(masked)
        v = self.rng.standard_normal(12)
        for node, value in zip(network, v):
            node.v_local = float(value)
        heard = {node.sensor_id: node.v_local for node in network}
        local = [local_matvec(node, {j: heard[j] for j in node.neighbors}) for node in network]
        assert np.allclose(local, masked.matrix @ v, atol=1e-10)

    def test_aggregate_norm(self):
        sums, _ = aggregate_scalars(RoutingTree.chain([1, 2]), {1: [9.0], 2: [16.0]})
        assert np.sqrt(sums[0]) == pytest.approx(5.0)

    def test_aggregate_dot_products(self):
        tree = RoutingTree.star(list(range(1, 9)))
        v = self.rng.standard_normal(8)
        W = self.rng.standard_normal((8, 3))
        sums, load = aggregate_scalars(tree, v[:, None] * W)
        assert np.allclose(sums, W.T @ v, atol=1e-10)
        assert load.equals(analytic_loads(tree, Operation.aggregate(3)))


class TestPimIteration:
    """Test one synchronized iteration"""

    def setup_method(self):
        self.rng = np.random.default_rng(8)
        positions = self.rng.uniform(0.0, 25.0, size=(14, 2))
        self.field = SensorField(tuple(range(1, 15)), positions, 1)

    def test_iteration_load_is_sum_of_phases(self):
        radio_range = max(12.0, minimum_connecting_range(self.field))
        tree = build_routing_tree(self.field, radio_range)
        neighborhoods = build_neighborhoods(self.field, radio_range)
        A = self.rng.standard_normal((14, 14))
        network = build_pim_network(mask_covariance(A @ A.T, neighborhoods))
        for node in network:
            node.v_local = node.cov_row[node.sensor_id]
        result = pim_iteration(network, tree, 1)
        expected = (exchange_loads(neighborhoods)
                    + analytic_loads(tree, Operation.aggregate(1))
                    + analytic_loads(tree, Operation.feedback(1)))
        assert result.load.equals(expected)

    def test_diagonal_converges(self):
        network, tree = full_network(np.diag([2.0, 1.0]))
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-3, t_max=50))
        assert run.iteration_counts[0] <= 50
        assert np.allclose(run.basis.W[:, 0], [1.0, 0.0], atol=2e-3)

    def test_first_component_tracks_centralized_iterates(self):
        """Same start vector and budget as the centralized power iteration"""
        C = random_spd(self.rng, [9.0, 5.0, 3.0, 2.0, 1.0, 0.5])
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-15, t_max=10))
        pair, iterations = power_iteration(C, np.diag(C), delta=1e-15, t_max=10)
        assert run.iteration_counts == [iterations] == [10]
        assert np.allclose(run.basis.W[:, 0], pair.vector, atol=1e-9)


class TestDistributedRun:
    """Test complete runs of the distributed power iteration"""

    def setup_method(self):
        self.rng = np.random.default_rng(12)

    def test_subspace_matches_reference(self):
        """100 seeded random SPD instances"""
        for _ in range(100):
            p = int(self.rng.integers(6, 13))
            values = np.concatenate([[12.0, 7.0, 4.0], np.linspace(1.5, 0.1, p - 3)])
            C = random_spd(self.rng, values)
            network, tree = full_network(C)
            run = run_distributed_pim(network, tree, PimConfig(3, delta=1e-10, t_max=500))
            exact = basis_from_pairs(reference_eigendecomposition(C), np.zeros(p), 3)
            assert run.accepted == 3
            P = run.basis.W @ run.basis.W.T
            assert np.linalg.norm(P - exact.W @ exact.W.T) <= 1e-4
            assert np.allclose(run.basis.values, exact.values, rtol=1e-4)

    def test_components_are_orthonormal(self):
        C = random_spd(self.rng, [10.0, 6.0, 3.0, 1.0, 0.5, 0.2, 0.1])
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(4, delta=1e-6, t_max=300))
        W = run.basis.W
        assert np.max(np.abs(W.T @ W - np.eye(run.accepted))) <= 1e-6

    def test_nodes_hold_their_rows(self):
        C = random_spd(self.rng, [5.0, 2.0, 1.0])
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(2, delta=1e-9, t_max=300))
        for k, node in enumerate(network):
            assert np.allclose(run.node_rows[node.sensor_id], run.basis.W[k])
            assert len(node.w_locals) == 2

    def test_negative_eigenvalue_stops_after_one_component(self):
        """Chain mask drops c_13; the spectrum becomes 1 + 2 sqrt 2, 1, 1 - 2 sqrt 2"""
        neighborhoods = Neighborhoods({1: {2}, 2: {1, 3}, 3: {2}}, 1.0)
        C = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        network = build_pim_network(MaskedCovariance(C, neighborhoods))
        run = run_distributed_pim(network, RoutingTree.chain([1, 2, 3]), PimConfig(3, delta=1e-9, t_max=300))
        assert run.accepted == 1
        assert run.basis.values[0] == pytest.approx(1.0 + 2.0 * np.sqrt(2.0), rel=1e-6)
        assert "nonpositive" in run.stop_reason
        assert compute_basis(C, 3, delta=1e-9, t_max=300, v0_policy="diagonal").q == 1

    def test_cumulative_load_is_quadratic(self):
        """A fixed iteration count per component leaves only the record-size growth"""
        values = 2.0 ** -np.arange(12)
        C = random_spd(self.rng, values)
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(8, delta=1e-14, t_max=30))
        assert run.iteration_counts == [30] * 8
        q = np.arange(1, 9)
        loads = np.array([load.mean_node_load for load in run.component_loads])
        coefficients, residuals, *_ = np.polyfit(q, loads, 2, full=True)
        assert coefficients[0] > 0
        fitted = np.polyval(coefficients, q)
        assert np.max(np.abs(fitted - loads)) / loads.max() < 0.05

    def test_loads_are_cumulative(self):
        C = random_spd(self.rng, [4.0, 2.0, 1.0, 0.5])
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(3, delta=1e-6, t_max=100))
        totals = [load.total for load in run.component_loads]
        assert totals == sorted(totals)
        assert run.component_loads[-1].equals(run.load)
        assert len(run.iteration_log) == sum(run.iteration_counts)

    def test_iteration_log_csv(self, tmp_path):
        network, tree = full_network(np.diag([3.0, 1.0]))
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-3, t_max=50))
        path = tmp_path / "log.csv"
        run.export_log(str(path))
        assert path.read_text().splitlines()[0] == "component,iteration,norm,delta_v,load_total"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PimConfig(1, delta=0.0)
        with pytest.raises(ValueError):
            PimConfig(1, t_max=0)
        with pytest.raises(ValueError):
            PimConfig(4).validate(3)
        with pytest.raises(ValueError):
            PimConfig(1, v0_policy="sideways")

    def test_stop_reasons(self):
        run = run_distributed_pim(*full_network(random_spd(self.rng, [5.0, 2.0, 1.0])),
                                  PimConfig(2, delta=1e-9, t_max=300))
        assert run.stop_reason == "q_target reached"
        assert run.accepted == 2

        neighborhoods = Neighborhoods({1: {2}, 2: {1, 3}, 3: {2}}, 1.0)
        C = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        network = build_pim_network(MaskedCovariance(C, neighborhoods))
        run = run_distributed_pim(network, RoutingTree.chain([1, 2, 3]), PimConfig(2, delta=1e-9, t_max=300))
        assert run.stop_reason == "nonpositive eigenvalue at component 2"
        # the rejected component's rounds are still charged
        assert len(run.component_loads) == len(run.iteration_counts) == 2
        assert run.component_loads[1].total > run.component_loads[0].total

    def test_eigenvalue_after_single_iteration(self):
        """With t_max = 1 the estimate is ||C v0|| for the unit start vector"""
        B = self.rng.uniform(0.0, 1.0, size=(6, 6))
        C = B @ B.T + 0.5 * np.eye(6)
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-3, t_max=1))
        v0 = np.diag(C) / np.linalg.norm(np.diag(C))
        spectrum = np.linalg.eigvalsh(C)
        assert run.iteration_counts == [1]
        assert run.basis.values[0] == pytest.approx(np.linalg.norm(C @ v0), rel=1e-9)
        assert spectrum[0] - 1e-9 <= run.basis.values[0] <= spectrum[-1] + 1e-9


class TestZeroNormRounds:
    """Rounds ending in a zero aggregated norm still cost packets"""

    def setup_method(self):
        self.ids = (1, 2)
        self.tree = RoutingTree.chain(list(self.ids))
        self.start = analytic_loads(self.tree, Operation.aggregate(1)) + analytic_loads(self.tree, Operation.feedback(1))
        self.iteration = (exchange_loads(Neighborhoods.complete(self.ids))
                          + analytic_loads(self.tree, Operation.aggregate(1))
                          + analytic_loads(self.tree, Operation.feedback(1)))
        self.acceptance = analytic_loads(self.tree, Operation.aggregate(3)) + analytic_loads(self.tree, Operation.feedback(1))

    def test_retry_charges_failed_round(self):
        """The diagonal start lies in the null space; the random restart converges"""
        C = np.array([[1.0, -1.0], [-1.0, 1.0]])
        network, tree = full_network(C)
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-3, t_max=5))
        assert run.accepted == 1
        assert run.basis.values[0] == pytest.approx(2.0, rel=1e-9)
        assert run.iteration_counts == [2]
        expected = self.start.scaled(2) + self.iteration.scaled(1 + 2) + self.acceptance
        assert run.load.equals(expected)
        assert run.load.total == 2 * 5 + 3 * 9 + 11
        # the failed round is charged but not logged
        assert len(run.iteration_log) == 2

    def test_abort_charges_failed_rounds(self):
        network, tree = full_network(np.zeros((2, 2)))
        run = run_distributed_pim(network, tree, PimConfig(1, delta=1e-3, t_max=5))
        assert run.accepted == 0
        assert run.stop_reason == "zero-norm iterate at component 1"
        assert run.load.equals(self.start.scaled(2) + self.iteration.scaled(2))
        assert run.component_loads[-1].equals(run.load)


class TestStreamedNetwork:
    """PIM started from streamed node sums against the batch-masked matrix"""

    def setup_method(self):
        field = generate_field(10, seed=5)
        self.samples = generate_synthetic(SynthSpec(10, 300, 15.0, 0.3, 5), field).samples()
        radio_range = max(20.0, minimum_connecting_range(field))
        self.neighborhoods = build_neighborhoods(field, radio_range)
        self.tree = build_routing_tree(field, radio_range)

    def test_rows_and_means_match_batch(self):
        states, load = stream_cov_states(self.samples, self.neighborhoods)
        streamed = network_from_cov_states(states)
        batch = build_pim_network(mask_covariance(covariance_batch(self.samples), self.neighborhoods),
                                  self.samples.mean(axis=0))
        assert load.equals(exchange_loads(self.neighborhoods).scaled(300))
        for a, b in zip(streamed, batch):
            assert a.sensor_id == b.sensor_id
            assert set(a.neighbors) == set(b.neighbors)
            assert a.mean == pytest.approx(b.mean, rel=1e-12, abs=1e-9)
            assert a.cov_row.keys() == b.cov_row.keys()
            for j, c_ij in a.cov_row.items():
                assert c_ij == pytest.approx(b.cov_row[j], rel=1e-9, abs=1e-9)

    def test_same_basis_as_batch(self):
        config = PimConfig(2, delta=1e-9, t_max=500)
        states, _ = stream_cov_states(self.samples, self.neighborhoods)
        streamed = run_distributed_pim(network_from_cov_states(states), self.tree, config)
        masked = mask_covariance(covariance_batch(self.samples), self.neighborhoods)
        batch = run_distributed_pim(build_pim_network(masked, self.samples.mean(axis=0)), self.tree, config)
        assert streamed.accepted == batch.accepted >= 1
        P = streamed.basis.W @ streamed.basis.W.T
        assert np.linalg.norm(P - batch.basis.W @ batch.basis.W.T) <= 1e-6
        assert np.allclose(streamed.basis.values, batch.basis.values, rtol=1e-6)
        assert np.allclose(streamed.basis.mean, batch.basis.mean)

    def test_needs_two_epochs(self):
        states, _ = stream_cov_states(self.samples[:1], self.neighborhoods)
        with pytest.raises(DegenerateInputError):
            network_from_cov_states(states)


class TestCentralizedDissemination:
    """Test the cost of flooding a centrally computed basis"""

    def test_one_component_on_chain(self):
        basis = PcaBasis((), np.zeros(3))
        tree = RoutingTree.chain([1, 2, 3])
        assert distribute_basis_centralized(tree, basis).total == 0

        C = np.diag([3.0, 2.0, 1.0])
        basis = basis_from_pairs(reference_eigendecomposition(C), np.zeros(3), 1)
        assert distribute_basis_centralized(tree, basis).loads.tolist() == [3, 6, 3]

    def test_zero_loads_type(self):
        load = distribute_basis_centralized(RoutingTree.star([1, 2]), PcaBasis((), np.zeros(2)))
        assert isinstance(load, LoadReport)
        assert load.loads.tolist() == [0, 0]
