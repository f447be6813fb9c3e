"""
Centralized linear algebra for principal component aggregation
Covariance estimation, deflated power iteration, reference Jacobi
decomposition and the retained-variance metrics
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    NonSymmetricError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

# Plain numpy arrays carry vectors (shape (p,)) and matrices (shape (p, m))
Vector = np.ndarray
Matrix = np.ndarray

UNIT_NORM_TOLERANCE = 1e-9
ORTHOGONALITY_TOLERANCE = 1e-6
JACOBI_TOLERANCE = 1e-12


def as_vector(values: Union[Sequence[float], np.ndarray], length: Optional[int] = None) -> Vector:
    """Validate and copy values into a finite 1-D float array"""
    vector = np.array(values, dtype=float)
    if vector.ndim != 1:
        raise DimensionError(f"Expected a vector, got shape {vector.shape}")
    if length is not None and vector.shape[0] != length:
        raise DimensionError(f"Expected length {length}, got {vector.shape[0]}")
    if not np.all(np.isfinite(vector)):
        raise ValueError("Vector has non-finite elements")
    return vector


def as_matrix(values: Union[Sequence[Sequence[float]], np.ndarray]) -> Matrix:
    """Validate and copy values into a finite 2-D float array"""
    matrix = np.array(values, dtype=float)
    if matrix.ndim != 2:
        raise DimensionError(f"Expected a matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("Matrix has non-finite elements")
    return matrix


def _as_symmetric(C: Union[Sequence[Sequence[float]], np.ndarray]) -> Matrix:
    matrix = as_matrix(C)
    rows, cols = matrix.shape
    if rows != cols:
        raise NonSymmetricError(f"Matrix must be square, got {rows}x{cols}")
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-9 * scale):
        raise NonSymmetricError("Matrix is not symmetric")
    return matrix


def _as_samples(samples: Union[Iterable[Sequence[float]], np.ndarray]) -> Matrix:
    """Stack samples into a T x p array"""
    try:
        X = np.array(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
    except ValueError as e:
        raise DimensionError(f"Samples have inconsistent lengths: {e}") from e
    if X.ndim != 2:
        raise DimensionError(f"Samples have inconsistent lengths (shape {X.shape})")
    return X


@dataclass(frozen=True)
class EigenPair:
    """Unit eigenvector with its eigenvalue estimate"""
    vector: Vector
    value: float

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"Eigenvector must be unit norm, got {norm:.12f}")

    @classmethod
    def canonical(cls, vector: Vector, value: float) -> "EigenPair":
        """Normalize and flip so the first nonzero element is positive"""
        vector = as_vector(vector)
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise ZeroVectorError("Cannot build an eigenpair from a zero vector")
        return cls(vector / norm * canonical_sign(vector), float(value))


def canonical_sign(vector: Vector) -> float:
    """+1 if the first nonzero element is positive, -1 otherwise"""
    nonzero = np.flatnonzero(vector)
    if nonzero.size == 0:
        return 1.0
    return 1.0 if vector[nonzero[0]] > 0 else -1.0


@dataclass(frozen=True)
class PcaBasis:
    """Ordered principal components plus the training centroid"""
    pairs: Tuple[EigenPair, ...]
    mean: Vector

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "mean", as_vector(self.mean))
        p = self.mean.shape[0]
        values = [pair.value for pair in self.pairs]
        if any(pair.vector.shape[0] != p for pair in self.pairs):
            raise DimensionError("Eigenvector length does not match mean length")
        if any(value < 0 for value in values):
            raise ValueError("Basis cannot hold negative eigenvalues")
        if any(b > a for a, b in zip(values, values[1:])):
            raise ValueError(f"Eigenvalues must be nonincreasing: {values}")
        if self.pairs:
            W = self.W
            gram = W.T @ W
            off = gram - np.diag(np.diag(gram))
            if np.max(np.abs(off), initial=0.0) > ORTHOGONALITY_TOLERANCE:
                raise ValueError("Basis vectors are not orthogonal")

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def q(self) -> int:
        return len(self.pairs)

    @property
    def W(self) -> Matrix:
        """p x q matrix whose columns are the components"""
        if not self.pairs:
            return np.zeros((self.p, 0))
        return np.column_stack([pair.vector for pair in self.pairs])

    @property
    def values(self) -> Vector:
        return np.array([pair.value for pair in self.pairs], dtype=float)

    def truncated(self, q: int) -> "PcaBasis":
        """Keep the q highest-variance components"""
        if q < 0 or q > self.q:
            raise DimensionError(f"Cannot truncate a {self.q}-component basis to {q}")
        return PcaBasis(self.pairs[:q], self.mean)


@dataclass(frozen=True)
class CovAccumulator:
    """Running sums t, S_i and S_ij for the recursive covariance estimate"""
    t: int
    sums: Vector
    cross: Matrix

    @classmethod
    def empty(cls, p: int) -> "CovAccumulator":
        return cls(0, np.zeros(p), np.zeros((p, p)))

    @property
    def p(self) -> int:
        return self.sums.shape[0]

    def mean(self) -> Vector:
        if self.t == 0:
            raise DegenerateInputError("No samples accumulated")
        return self.sums / self.t

    def covariance(self) -> Matrix:
        """c_ij(t) = S_ij / t - S_i S_j / t^2"""
        if self.t == 0:
            raise DegenerateInputError("No samples accumulated")
        t = float(self.t)
        return self.cross / t - np.outer(self.sums, self.sums) / (t * t)


class InitPolicy(Enum):
    """How the power iteration picks its starting vector"""
    RANDOM = "random"
    DIAGONAL = "diagonal"

    @classmethod
    def parse(cls, value: Union[str, "InitPolicy"]) -> "InitPolicy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            raise ValueError(f"Unknown v0 policy '{value}' (use 'random' or 'diagonal')") from e


def covariance_batch(samples: Union[Iterable[Sequence[float]], np.ndarray]) -> Matrix:
    """
    Biased sample covariance (1/t) X X^T - mean mean^T

    Args:
        samples: t vectors of equal length p (rows of a t x p array)

    Returns:
        Symmetric p x p covariance matrix
    """
    X = _as_samples(samples)
    t = X.shape[0]
    if t < 2:
        raise DegenerateInputError(f"Covariance needs at least 2 samples, got {t}")
    if not np.all(np.isfinite(X)):
        raise ValueError("Samples have non-finite elements")
    mean = X.mean(axis=0)
    C = (X.T @ X) / t - np.outer(mean, mean)
    return (C + C.T) / 2.0


def recursive_cov_update(state: CovAccumulator, x: Union[Sequence[float], np.ndarray]) -> CovAccumulator:
    """Fold one measurement vector into the running sums"""
    x = as_vector(x)
    if x.shape[0] != state.p:
        raise DimensionError(f"Accumulator has dimension {state.p}, got vector of length {x.shape[0]}")
    return CovAccumulator(state.t + 1, state.sums + x, state.cross + np.outer(x, x))


def eigen_sign(v_prev: Vector, v_next: Vector) -> int:
    """sign(sum_i sign(v_prev[i] * v_next[i])); 0 when undetermined"""
    v_prev = np.asarray(v_prev, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    if v_prev.shape != v_next.shape:
        raise DimensionError(f"Vectors differ in length: {v_prev.shape} vs {v_next.shape}")
    return int(np.sign(np.sum(np.sign(v_prev * v_next))))


def resolve_sign(v_prev: Vector, v_next: Vector) -> int:
    """Sign criterion with the dot product as tie-breaker"""
    sign = eigen_sign(v_prev, v_next)
    if sign == 0:
        sign = int(np.sign(float(np.dot(v_prev, v_next))))
    return sign


def _deflated_power_iteration(C: Matrix, v0: Vector, accepted: Sequence[Vector],
                              delta: float, t_max: int) -> Tuple[Vector, float, int]:
    """Power iteration with per-iteration orthogonalization against accepted vectors"""
    norm0 = np.linalg.norm(v0)
    if norm0 == 0:
        raise ZeroVectorError("Initial vector is zero")
    v = v0 / norm0
    value = 0.0
    t = 0
    while True:
        y = C @ v
        for w in accepted:
            y = y - np.dot(y, w) * w
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            raise ZeroVectorError(f"C v is zero after {t} iterations")
        v_next = y / norm
        aligned = v_next if np.dot(v_next, v) >= 0 else -v_next
        change = float(np.linalg.norm(aligned - v))
        sign = resolve_sign(v, v_next)
        value = sign * norm
        v = v_next
        t += 1
        if change <= delta or t >= t_max:
            break
    return v, value, t


def _validate_iteration_args(delta: float, t_max: int):
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if t_max < 1:
        raise ValueError(f"t_max must be at least 1, got {t_max}")


def power_iteration(C: Union[Sequence[Sequence[float]], np.ndarray], v0: Union[Sequence[float], np.ndarray],
                    delta: float, t_max: int) -> Tuple[EigenPair, int]:
    """
    Dominant eigenpair by the standard power iteration

    Args:
        C: symmetric p x p matrix
        v0: nonzero starting vector
        delta: stop once the sign-aligned change of the iterate is <= delta
        t_max: maximum number of iterations

    Returns:
        (eigenpair with signed eigenvalue, iterations performed)
    """
    C = _as_symmetric(C)
    v0 = as_vector(v0, C.shape[0])
    _validate_iteration_args(delta, t_max)
    v, value, iterations = _deflated_power_iteration(C, v0, [], delta, t_max)
    return EigenPair.canonical(v, value), iterations


def initial_vector(C: Matrix, policy: InitPolicy, rng: np.random.Generator) -> Vector:
    """Starting vector: C's diagonal or a seeded gaussian draw"""
    if policy is InitPolicy.DIAGONAL:
        v0 = np.diag(C).astype(float).copy()
        if np.linalg.norm(v0) > 0:
            return v0
        logger.debug("Diagonal start vector is zero, falling back to random")
    return rng.standard_normal(C.shape[0])


def compute_basis(C: Union[Sequence[Sequence[float]], np.ndarray], q: int, delta: float, t_max: int,
                  v0_policy: Union[str, InitPolicy] = InitPolicy.RANDOM, seed: int = 0,
                  mean: Optional[Union[Sequence[float], np.ndarray]] = None,
                  iteration_counts: Optional[List[int]] = None) -> PcaBasis:
    """
    First q eigenpairs by power iteration with deflation

    Stops early, without keeping the pair, as soon as the sign test
    reports a negative eigenvalue.
    """
    C = _as_symmetric(C)
    p = C.shape[0]
    if not 1 <= q <= p:
        raise DimensionError(f"q must be in [1, {p}], got {q}")
    _validate_iteration_args(delta, t_max)
    policy = InitPolicy.parse(v0_policy)
    mean = np.zeros(p) if mean is None else as_vector(mean, p)
    rng = np.random.default_rng(seed)

    accepted: List[Vector] = []
    pairs: List[EigenPair] = []
    for k in range(q):
        v0 = initial_vector(C, policy, rng)
        v, value, iterations = _deflated_power_iteration(C, v0, accepted, delta, t_max)
        if iteration_counts is not None:
            iteration_counts.append(iterations)
        if value < 0:
            logger.info(f"Negative eigenvalue detected at component {k + 1} - stopping with {len(pairs)}")
            break
        accepted.append(v)
        pairs.append(EigenPair.canonical(v, value))
        logger.debug(f"Component {k + 1}: lambda={value:.6g} after {iterations} iterations")

    # budget-limited runs may leave neighbouring estimates slightly out of order
    pairs.sort(key=lambda pair: -pair.value)
    return PcaBasis(tuple(pairs), mean)


def reference_eigendecomposition(C: Union[Sequence[Sequence[float]], np.ndarray],
                                 tolerance: float = JACOBI_TOLERANCE,
                                 max_sweeps: int = 100) -> List[EigenPair]:
    """
    Full spectrum of a symmetric matrix by cyclic Jacobi rotations

    Sweeps stop once the off-diagonal Frobenius norm is at most
    tolerance * ||C||_F, at any scale of C; a zero matrix needs no sweep.

    Returns:
        Eigenpairs sorted by nonincreasing eigenvalue
    """
    A = _as_symmetric(C).copy()
    p = A.shape[0]
    V = np.eye(p)
    threshold = tolerance * float(np.linalg.norm(A))

    for sweep in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= threshold:
            break
        for i in range(p - 1):
            for j in range(i + 1, p):
                a_ij = A[i, j]
                if a_ij == 0.0:
                    continue
                theta = (A[j, j] - A[i, i]) / (2.0 * a_ij)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_i = A[:, i].copy()
                col_j = A[:, j].copy()
                A[:, i] = c * col_i - s * col_j
                A[:, j] = s * col_i + c * col_j
                row_i = A[i, :].copy()
                row_j = A[j, :].copy()
                A[i, :] = c * row_i - s * row_j
                A[j, :] = s * row_i + c * row_j
                A[i, j] = A[j, i] = 0.0

                v_i = V[:, i].copy()
                v_j = V[:, j].copy()
                V[:, i] = c * v_i - s * v_j
                V[:, j] = s * v_i + c * v_j
    else:
        logger.warning(f"Jacobi did not reach tolerance after {max_sweeps} sweeps")

    values = np.diag(A)
    order = np.argsort(-values, kind="stable")
    return [EigenPair.canonical(V[:, k], float(values[k])) for k in order]


def basis_from_pairs(pairs: Sequence[EigenPair], mean: Union[Sequence[float], np.ndarray],
                     q: Optional[int] = None) -> PcaBasis:
    """Keep nonnegative pairs (up to q) from a sorted spectrum"""
    kept = [pair for pair in pairs if pair.value >= 0]
    if len(kept) < len(pairs):
        logger.debug(f"Discarded {len(pairs) - len(kept)} negative eigenvalues")
    if q is not None:
        kept = kept[:q]
    return PcaBasis(tuple(kept), mean)


def retained_variance(values: Sequence[float], q: int) -> float:
    """Share of total variance carried by the first q eigenvalues"""
    values = as_vector(values)
    if values.shape[0] == 0:
        raise DegenerateInputError("No eigenvalues given")
    if not 1 <= q <= values.shape[0]:
        raise DimensionError(f"q must be in [1, {values.shape[0]}], got {q}")
    total = float(np.sum(values))
    if total <= 0:
        raise DegenerateInputError("Total variance is zero")
    if q == values.shape[0]:
        return 1.0
    return float(np.sum(values[:q])) / total


def project(W: Union[Sequence[Sequence[float]], np.ndarray], x: Union[Sequence[float], np.ndarray],
            mean: Union[Sequence[float], np.ndarray]) -> Vector:
    """Principal component scores z = W^T (x - mean)"""
    W = as_matrix(W)
    p = W.shape[0]
    x = as_vector(x, p)
    mean = as_vector(mean, p)
    return W.T @ (x - mean)


def reconstruct(W: Union[Sequence[Sequence[float]], np.ndarray], z: Union[Sequence[float], np.ndarray],
                mean: Union[Sequence[float], np.ndarray]) -> Vector:
    """Approximation x_hat = W z + mean"""
    W = as_matrix(W)
    z = as_vector(z, W.shape[1])
    mean = as_vector(mean, W.shape[0])
    return W @ z + mean


def empirical_retained_variance(basis: PcaBasis, test: Union[Iterable[Sequence[float]], np.ndarray]) -> float:
    """
    1 - sum ||x - x_hat||^2 / sum ||x - mean||^2 over the test vectors,
    centered on the basis' training mean
    """
    X = _as_samples(test)
    if X.shape[0] == 0:
        raise DegenerateInputError("Empty test set")
    if X.shape[1] != basis.p:
        raise DimensionError(f"Basis has dimension {basis.p}, test vectors have {X.shape[1]}")
    centered = X - basis.mean
    total = float(np.sum(centered ** 2))
    if total == 0:
        raise DegenerateInputError("Test set has zero variance around the training mean")
    W = basis.W
    residual = centered - (centered @ W) @ W.T
    return 1.0 - float(np.sum(residual ** 2)) / total
