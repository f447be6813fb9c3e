"""
Measurement traces: CSV ingestion with epoch bucketing and imputation,
export, and synthetic spatially correlated data
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import DegenerateInputError, DimensionError, TraceFormatError
from .topology import SensorField, top_right_sensor

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["timestamp_s", "sensor_id", "value"]
BUCKET_STATS = ("last", "mean")


@dataclass(frozen=True)
class EpochTrace:
    """Dense p x T measurement matrix on a fixed epoch grid"""
    sensor_ids: Tuple[int, ...]
    epochs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.sensor_ids)
        epochs = np.asarray(self.epochs, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(ids), epochs.shape[0]):
            raise DimensionError(f"Values have shape {values.shape}, expected ({len(ids)}, {epochs.shape[0]})")
        if np.any(np.diff(epochs) <= 0):
            raise ValueError("Epoch timestamps must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("Trace has missing or non-finite values")
        if list(ids) != sorted(set(ids)):
            raise ValueError("Sensor ids must be unique and sorted")
        object.__setattr__(self, "sensor_ids", ids)
        object.__setattr__(self, "epochs", epochs)
        object.__setattr__(self, "values", values)

    @property
    def p(self) -> int:
        return len(self.sensor_ids)

    @property
    def T(self) -> int:
        return self.epochs.shape[0]

    def samples(self) -> np.ndarray:
        """T x p matrix, one measurement vector per row"""
        return self.values.T.copy()

    def subset(self, sensor_ids: Optional[Iterable[int]] = None,
               epochs: Optional[slice] = None) -> "EpochTrace":
        """Restrict to some sensors and/or a slice of epochs"""
        keep = self.sensor_ids if sensor_ids is None else tuple(sorted(int(i) for i in sensor_ids))
        unknown = set(keep) - set(self.sensor_ids)
        if unknown:
            raise DimensionError(f"Unknown sensors {sorted(unknown)}")
        rows = [self.sensor_ids.index(i) for i in keep]
        cols = slice(None) if epochs is None else epochs
        return EpochTrace(keep, self.epochs[cols], self.values[rows][:, cols])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "timestamp_s": np.tile(self.epochs, self.p),
            "sensor_id": np.repeat(self.sensor_ids, self.T),
            "value": self.values.ravel(),
        })

    def to_csv(self, path: str):
        """Write timestamp_s,sensor_id,value; load_trace reads it back unchanged"""
        # shortest round-trip repr, not the %.9g used for reports
        self.to_frame().to_csv(path, index=False)


def _number(text) -> float:
    # Python float() is correctly rounded, so exported traces reload bit for bit
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _parse_trace(frame: pd.DataFrame, path: str) -> pd.DataFrame:
    missing = set(TRACE_COLUMNS) - set(frame.columns)
    if missing:
        raise TraceFormatError(f"Trace {path} lacks columns {sorted(missing)}", line=1)
    parsed = pd.DataFrame({column: frame[column].map(_number) for column in TRACE_COLUMNS})
    # an empty value cell is a missing reading, anything else unparseable is an error
    bad = parsed["timestamp_s"].isna() | parsed["sensor_id"].isna() | (parsed["value"].isna() & frame["value"].notna())
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise TraceFormatError(f"Unparseable trace row in {path}: {frame.iloc[row].tolist()}", line=row + 2)
    parsed["sensor_id"] = parsed["sensor_id"].astype(int)
    return parsed


def load_trace(path: str, epoch_seconds: float = 30.0, excluded: Sequence[int] = (),
               bucket_stat: str = "last") -> EpochTrace:
    """
    Read a timestamp_s,sensor_id,value CSV onto a fixed epoch grid

    Readings are bucketed into epoch_seconds intervals from the first
    timestamp. Per bucket the last reading wins (or the mean). Gaps are
    carried forward, leading gaps take the first observed value.

    Args:
        path: CSV path
        epoch_seconds: bucket width in seconds
        excluded: sensor ids to drop
        bucket_stat: 'last' or 'mean'
    """
    if epoch_seconds <= 0:
        raise ValueError(f"epoch_seconds must be positive, got {epoch_seconds}")
    if bucket_stat not in BUCKET_STATS:
        raise ValueError(f"Unknown bucket_stat '{bucket_stat}' (use 'last' or 'mean')")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=True)
    except (OSError, pd.errors.ParserError) as e:
        raise TraceFormatError(f"Cannot read trace {path}: {e}") from e

    readings = _parse_trace(frame, path)
    readings = readings[~readings["sensor_id"].isin(set(int(i) for i in excluded))]
    if readings.empty:
        raise DegenerateInputError(f"Trace {path} has no readings after exclusions")

    t0 = float(readings["timestamp_s"].min())
    readings = readings.assign(
        bucket=np.floor((readings["timestamp_s"] - t0) / epoch_seconds + 1e-9).astype(int)
    ).sort_values(["bucket", "timestamp_s"], kind="mergesort")

    grouped = readings.dropna(subset=["value"]).groupby(["bucket", "sensor_id"])["value"]
    bucketed = grouped.last() if bucket_stat == "last" else grouped.mean()
    n_buckets = int(readings["bucket"].max()) + 1
    grid = bucketed.unstack("sensor_id").reindex(range(n_buckets))
    all_ids = sorted(readings["sensor_id"].unique())
    grid = grid.reindex(columns=all_ids).sort_index(axis=1)

    empty = [int(i) for i in grid.columns[grid.isna().all(axis=0)]]
    if empty:
        logger.warning(f"Dropping sensors without any reading: {empty}")
        grid = grid.drop(columns=empty)
    if grid.shape[1] == 0:
        raise DegenerateInputError(f"Trace {path} has no usable sensors")
    grid = grid.ffill().bfill()

    epochs = t0 + np.arange(n_buckets) * float(epoch_seconds)
    logger.info(f"Loaded trace {path}: {grid.shape[1]} sensors x {n_buckets} epochs of {epoch_seconds}s")
    return EpochTrace(tuple(int(i) for i in grid.columns), epochs, grid.to_numpy(dtype=float).T)


@dataclass(frozen=True)
class SynthSpec:
    """Spatially correlated synthetic field data"""
    p: int
    T: int
    correlation_length: float = 10.0
    noise_level: float = 0.1
    seed: int = 0
    sources: int = 3
    epoch_seconds: float = 30.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.correlation_length < 0:
            raise ValueError(f"correlation_length must be >= 0, got {self.correlation_length}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.sources < 1:
            raise ValueError(f"sources must be >= 1, got {self.sources}")


def _spatial_weights(distances: np.ndarray, correlation_length: float) -> np.ndarray:
    if math.isinf(correlation_length):
        return np.ones_like(distances)
    if correlation_length == 0:
        return np.zeros_like(distances)
    return np.exp(-distances / correlation_length)


def generate_synthetic(spec: SynthSpec, field: SensorField) -> EpochTrace:
    """
    Smooth temporal sources at random spots in the field, each sensor
    weighting them by exp(-d / correlation_length), plus white noise

    An infinite correlation length gives every sensor the same signal
    (rank one after centering); zero leaves only the noise.
    """
    if field.p != spec.p:
        raise DimensionError(f"Field has {field.p} sensors, spec asks for {spec.p}")
    rng = np.random.default_rng(spec.seed)

    lo = field.positions.min(axis=0)
    hi = field.positions.max(axis=0)
    source_positions = rng.uniform(lo, hi, size=(spec.sources, 2))
    periods = rng.uniform(0.2, 1.0, size=spec.sources) * spec.T
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.sources)
    amplitudes = rng.uniform(1.0, 3.0, size=spec.sources)

    t = np.arange(spec.T)
    signals = amplitudes[:, None] * np.sin(2.0 * np.pi * t[None, :] / periods[:, None] + phases[:, None])

    distances = cdist(field.positions, source_positions)
    weights = _spatial_weights(distances, spec.correlation_length)
    baseline = 20.0 + rng.normal(0.0, 0.5, size=(spec.p, 1))
    noise = spec.noise_level * rng.standard_normal((spec.p, spec.T))
    values = baseline + weights @ signals + noise

    epochs = np.arange(spec.T) * float(spec.epoch_seconds)
    return EpochTrace(field.sensor_ids, epochs, values)


def generate_field(p: int, width: float = 40.0, height: float = 30.0, seed: int = 0) -> SensorField:
    """Uniform random positions for sensors 1..p, rooted at the top-right sensor"""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    rng = np.random.default_rng(seed)
    positions = np.column_stack([rng.uniform(0.0, width, p), rng.uniform(0.0, height, p)])
    ids = tuple(range(1, p + 1))
    return SensorField(ids, positions, top_right_sensor(ids, positions))
