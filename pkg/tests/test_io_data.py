"""
Unit tests for trace ingestion and synthetic data
"""

import numpy as np
import pytest

from src.errors import DegenerateInputError, DimensionError, TraceFormatError
from src.io_data import EpochTrace, SynthSpec, generate_field, generate_synthetic, load_trace
from src.linalg import covariance_batch, reference_eigendecomposition, retained_variance

TRACE = """timestamp_s,sensor_id,value
0,1,10
10,1,11
0,2,20
35,2,21
70,2,
40,3,30
65,1,12
"""


def write(tmp_path, text, name="trace.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def spectrum(trace):
    pairs = reference_eigendecomposition(covariance_batch(trace.samples()))
    return [pair.value for pair in pairs]


class TestLoadTrace:
    """Test bucketing, imputation and parse errors"""

    def test_last_reading_wins(self, tmp_path):
        trace = load_trace(write(tmp_path, TRACE), epoch_seconds=30)
        assert trace.sensor_ids == (1, 2, 3)
        assert trace.T == 3
        assert trace.values[0].tolist() == [11.0, 11.0, 12.0]

    def test_gaps_are_carried(self, tmp_path):
        trace = load_trace(write(tmp_path, TRACE), epoch_seconds=30)
        # empty value cell at 70 s leaves the previous reading in place
        assert trace.values[1].tolist() == [20.0, 21.0, 21.0]
        # leading gap takes the first observation
        assert trace.values[2].tolist() == [30.0, 30.0, 30.0]
        assert np.allclose(trace.epochs, [0.0, 30.0, 60.0])

    def test_mean_stat(self, tmp_path):
        trace = load_trace(write(tmp_path, TRACE), epoch_seconds=30, bucket_stat="mean")
        assert trace.values[0, 0] == pytest.approx(10.5)

    def test_exclusions(self, tmp_path):
        trace = load_trace(write(tmp_path, TRACE), excluded=[2])
        assert trace.sensor_ids == (1, 3)

    def test_sensor_without_readings_dropped(self, tmp_path):
        trace = load_trace(write(tmp_path, TRACE + "5,4,\n"))
        assert 4 not in trace.sensor_ids

    def test_bad_row_reports_line(self, tmp_path):
        text = "timestamp_s,sensor_id,value\n0,1,10\nabc,1,11\n"
        with pytest.raises(TraceFormatError) as error:
            load_trace(write(tmp_path, text))
        assert error.value.line == 3

    def test_bad_value(self, tmp_path):
        text = "timestamp_s,sensor_id,value\n0,1,10\n30,1,warm\n"
        with pytest.raises(TraceFormatError) as error:
            load_trace(write(tmp_path, text))
        assert error.value.line == 3

    def test_missing_columns(self, tmp_path):
        with pytest.raises(TraceFormatError):
            load_trace(write(tmp_path, "t,sensor_id,value\n0,1,1\n"))

    def test_everything_excluded(self, tmp_path):
        with pytest.raises(DegenerateInputError):
            load_trace(write(tmp_path, TRACE), excluded=[1, 2, 3])

    def test_argument_validation(self, tmp_path):
        path = write(tmp_path, TRACE)
        with pytest.raises(ValueError):
            load_trace(path, epoch_seconds=0)
        with pytest.raises(ValueError):
            load_trace(path, bucket_stat="median")

    def test_export_then_load(self, tmp_path):
        trace = EpochTrace((2, 7), np.array([0.0, 30.0, 60.0]), np.array([[20.5, 21.0, 21.25], [18.0, 18.5, 19.0]]))
        path = str(tmp_path / "trace.csv")
        trace.to_csv(path)
        loaded = load_trace(path, epoch_seconds=30)
        assert loaded.sensor_ids == trace.sensor_ids
        assert np.array_equal(loaded.values, trace.values)
        assert np.array_equal(loaded.epochs, trace.epochs)

    def test_unix_timestamps_survive_export(self, tmp_path):
        """Wall-clock seconds and long readings come back in the same buckets, unchanged"""
        epochs = 1078099215.0 + 30.0 * np.arange(5)
        values = np.array([[20.123456789012, 20.2, 20.3, 20.4, 20.5],
                           [17.987654321098, 18.000000001, 18.1, 18.2, 18.3]])
        trace = EpochTrace((1, 2), epochs, values)
        path = str(tmp_path / "trace.csv")
        trace.to_csv(path)
        loaded = load_trace(path, epoch_seconds=30)
        assert np.array_equal(loaded.epochs, trace.epochs)
        assert np.array_equal(loaded.values, trace.values)


class TestEpochTrace:
    """Test trace validation and subsetting"""

    def setup_method(self):
        self.trace = EpochTrace((1, 2, 3), np.arange(4) * 30.0, np.arange(12, dtype=float).reshape(3, 4))

    def test_samples_are_epoch_major(self):
        assert self.trace.samples().shape == (4, 3)
        assert self.trace.samples()[0].tolist() == [0.0, 4.0, 8.0]

    def test_subset(self):
        sub = self.trace.subset([3, 1], slice(1, 3))
        assert sub.sensor_ids == (1, 3)
        assert sub.values.tolist() == [[1.0, 2.0], [9.0, 10.0]]

    def test_unknown_sensor(self):
        with pytest.raises(DimensionError):
            self.trace.subset([9])

    def test_validation(self):
        with pytest.raises(ValueError):
            EpochTrace((1,), np.array([0.0, 0.0]), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            EpochTrace((1,), np.array([0.0, 30.0]), np.array([[1.0, np.nan]]))
        with pytest.raises(ValueError):
            EpochTrace((2, 1), np.array([0.0]), np.zeros((2, 1)))
        with pytest.raises(DimensionError):
            EpochTrace((1, 2), np.array([0.0]), np.zeros((1, 1)))


class TestSynthetic:
    """Test the synthetic field generator"""

    def setup_method(self):
        self.field = generate_field(10, seed=5)

    def test_deterministic(self):
        spec = SynthSpec(p=10, T=50, seed=9)
        a = generate_synthetic(spec, self.field)
        b = generate_synthetic(spec, self.field)
        assert np.array_equal(a.values, b.values)
        assert a.sensor_ids == self.field.sensor_ids

    def test_infinite_correlation_is_rank_one(self):
        spec = SynthSpec(p=10, T=300, correlation_length=float("inf"), noise_level=0.0, seed=1)
        values = spectrum(generate_synthetic(spec, self.field))
        assert retained_variance(values, 1) >= 0.999

    def test_noise_only_spreads_variance(self):
        spec = SynthSpec(p=10, T=2000, correlation_length=0.0, noise_level=1.0, seed=2)
        values = spectrum(generate_synthetic(spec, self.field))
        assert retained_variance(values, 2) == pytest.approx(0.2, abs=0.06)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(p=0, T=10)
        with pytest.raises(ValueError):
            SynthSpec(p=3, T=1)
        with pytest.raises(ValueError):
            SynthSpec(p=3, T=10, noise_level=-1.0)
        with pytest.raises(DimensionError):
            generate_synthetic(SynthSpec(p=3, T=10), self.field)

    def test_field_root_is_top_right(self):
        scores = self.field.positions.sum(axis=1)
        assert self.field.sensor_ids == tuple(range(1, 11))
        assert self.field.root_id == self.field.sensor_ids[int(np.argmax(scores))]
