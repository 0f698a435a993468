"""State-entropy estimators: Gaussian KDE, Kozachenko-Leonenko kNN and
matrix-based Renyi entropy, plus the kNN-truncation gap check.

Kernel used throughout: k_sigma(a, b) = exp(-||a - b||^2 / (2 sigma)).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numba
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform
from scipy.special import digamma, gammaln

from encoder import as_state_array
from errors import DegenerateDistance, EmptyInput, InvalidArgument, NumericalFailure

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
NEGATIVE_EIGEN_TOL = 1e-10
JACOBI_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class LogBase(str, Enum):
    NATURAL = "natural"
    BASE2 = "base2"


class Estimator(str, Enum):
    KDE = "kde"
    KNN = "knn"
    RENYI = "renyi"


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgument(f"sigma must be > 0, got {self.sigma}", field="sigma")


@dataclass(frozen=True)
class GramMatrix:
    entries: np.ndarray
    trace_normalized: bool = False

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def normalized(self) -> "GramMatrix":
        if self.trace_normalized:
            return self
        return GramMatrix(self.entries / np.trace(self.entries), trace_normalized=True)


@dataclass(frozen=True)
class EntropyValue:
    value: float
    log_base: LogBase
    estimator: Estimator

    def to_base2(self) -> "EntropyValue":
        if self.log_base is LogBase.BASE2:
            return self
        return EntropyValue(self.value / math.log(2.0), LogBase.BASE2, self.estimator)

    def to_natural(self) -> "EntropyValue":
        if self.log_base is LogBase.NATURAL:
            return self
        return EntropyValue(self.value * math.log(2.0), LogBase.NATURAL, self.estimator)

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator choice plus its parameters; ``max_states`` enables even subsampling."""

    name: str = "kde"
    sigma: float = 1.0
    k: int = 5
    alpha: float = 3.0
    max_states: Optional[int] = None

    def __post_init__(self):
        if self.name not in {e.value for e in Estimator}:
            raise InvalidArgument(f"unknown estimator '{self.name}'", field="name")
        if not self.sigma > 0:
            raise InvalidArgument(f"sigma must be > 0, got {self.sigma}", field="sigma")
        if int(self.k) != self.k or self.k < 1:
            raise InvalidArgument(f"k must be a positive integer, got {self.k}", field="k")
        if not self.alpha > 0 or self.alpha == 1:
            raise InvalidArgument(f"alpha must be > 0 and != 1, got {self.alpha}", field="alpha")
        if self.max_states is not None and self.max_states < 1:
            raise InvalidArgument(f"max_states must be >= 1, got {self.max_states}", field="max_states")

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.sigma)


def _require_states(states) -> np.ndarray:
    arr = as_state_array(states)
    if arr.shape[0] == 0:
        raise EmptyInput("no states given")
    return arr


def _squared_distances(arr: np.ndarray) -> np.ndarray:
    if arr.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(arr, "sqeuclidean"))


def gram_matrix(states, cfg: KernelConfig) -> GramMatrix:
    arr = _require_states(states)
    entries = np.exp(-_squared_distances(arr) / (2.0 * cfg.sigma))
    np.fill_diagonal(entries, 1.0)
    return GramMatrix(entries)


def kde_entropy(states, cfg: KernelConfig) -> EntropyValue:
    gram = gram_matrix(states, cfg).entries
    inner = gram.mean(axis=1)
    value = -float(np.mean(np.log(inner)))
    return EntropyValue(value, LogBase.NATURAL, Estimator.KDE)


def kth_neighbour_distances(arr: np.ndarray, k: int) -> np.ndarray:
    """Distance from every point to its kth nearest other point."""
    dists, _ = cKDTree(arr).query(arr, k=k + 1)
    return dists[:, k] if dists.ndim == 2 else dists


def knn_entropy(states, k: int) -> EntropyValue:
    arr = _require_states(states)
    n, d = arr.shape
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}", field="k")
    if n <= k:
        raise InvalidArgument(f"knn entropy needs more than k={k} states, got {n}", field="k")

    rho = kth_neighbour_distances(arr, k)
    if np.any(rho <= 0.0):
        raise DegenerateDistance(
            f"{int(np.sum(rho <= 0.0))} state(s) have a zero distance to their {k}-th neighbour"
        )

    log_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    terms = math.log(n) + d * np.log(rho) + log_ball - math.log(k)
    bias = math.log(k) - digamma(k)
    return EntropyValue(float(np.mean(terms) + bias), LogBase.NATURAL, Estimator.KNN)


@numba.njit(cache=True)
def _jacobi_sweeps(a, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        off = math.sqrt(2.0 * off)
        if off <= tol:
            return np.diag(a).copy(), True, sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    if i != p and i != q:
                        aip = a[i, p]
                        aiq = a[i, q]
                        a[i, p] = aip * c - aiq * s
                        a[p, i] = a[i, p]
                        a[i, q] = aiq * c + aip * s
                        a[q, i] = a[i, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
    return np.diag(a).copy(), False, max_sweeps


def symmetric_eigenvalues(m) -> np.ndarray:
    """All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"expected a square matrix, got shape {a.shape}", field="m")
    if a.shape[0] == 0:
        return np.empty(0)
    asym = float(np.max(np.abs(a - a.T)))
    if asym > SYMMETRY_TOL:
        raise InvalidArgument(f"matrix is not symmetric (max asymmetry {asym:.3g})", field="m")

    a = 0.5 * (a + a.T)
    tol = JACOBI_REL_TOL * float(np.linalg.norm(a))
    values, converged, sweeps = _jacobi_sweeps(a, tol, JACOBI_MAX_SWEEPS)
    if not converged:
        raise NumericalFailure(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")
    logger.debug("jacobi converged after %d sweeps on %dx%d", sweeps, a.shape[0], a.shape[0])
    return np.sort(values)[::-1]


def renyi_matrix_entropy(states, alpha: float, cfg: KernelConfig) -> EntropyValue:
    """Matrix-based Renyi entropy of order alpha, in bits."""
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be > 0, got {alpha}", field="alpha")
    if alpha == 1:
        raise InvalidArgument("alpha = 1 is undefined; use a nearby value such as 1.001", field="alpha")

    a = gram_matrix(states, cfg).normalized().entries
    n = a.shape[0]
    if float(alpha).is_integer() and alpha >= 2:
        power_sum = float(np.trace(np.linalg.matrix_power(a, int(alpha))))
    else:
        lam = symmetric_eigenvalues(a)
        if lam.size and lam[-1] < -NEGATIVE_EIGEN_TOL:
            raise NumericalFailure(f"Gram matrix has eigenvalue {lam[-1]:.3g} < 0")
        lam = np.clip(lam, 0.0, None)
        power_sum = float(np.sum(lam ** alpha))

    value = math.log2(power_sum) / (1.0 - alpha)
    value = float(np.clip(value, 0.0, math.log2(n)))
    return EntropyValue(value, LogBase.BASE2, Estimator.RENYI)


def _knn_order(sq: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k nearest other points; ties by index."""
    sq = sq.copy()
    np.fill_diagonal(sq, np.inf)
    return np.argsort(sq, axis=1, kind="stable")[:, :k]


def kernel_sum_gap(states, k: int, cfg: KernelConfig, epsilon: float = 1e-6) -> Tuple[float, bool]:
    """Largest kernel mass lost by truncating each row sum to its k nearest neighbours.

    Returns ``(gap, threshold_ok)`` where ``threshold_ok`` holds iff every kth-NN
    distance is at least sqrt(2 sigma ln((N - k) / epsilon)).
    """
    arr = _require_states(states)
    n = arr.shape[0]
    if n <= k:
        raise InvalidArgument(f"need more than k={k} states, got {n}", field="k")
    if not epsilon > 0:
        raise InvalidArgument(f"epsilon must be > 0, got {epsilon}", field="epsilon")

    sq = _squared_distances(arr)
    kernel = np.exp(-sq / (2.0 * cfg.sigma))
    order = _knn_order(sq, k)

    outside = kernel.copy()
    np.fill_diagonal(outside, 0.0)
    np.put_along_axis(outside, order, 0.0, axis=1)
    gap = float(np.max(outside.sum(axis=1)))

    kth = np.sqrt(np.take_along_axis(sq, order[:, -1:], axis=1)[:, 0])
    ratio = (n - k) / epsilon
    threshold = math.sqrt(2.0 * cfg.sigma * math.log(ratio)) if ratio > 1.0 else 0.0
    return gap, bool(np.all(kth >= threshold))


def kde_entropy_truncated(states, k: int, cfg: KernelConfig) -> EntropyValue:
    """KDE entropy with each kernel row sum restricted to self plus the k nearest neighbours."""
    arr = _require_states(states)
    n = arr.shape[0]
    if n <= k:
        raise InvalidArgument(f"need more than k={k} states, got {n}", field="k")
    sq = _squared_distances(arr)
    order = _knn_order(sq, k)
    near = np.exp(-np.take_along_axis(sq, order, axis=1) / (2.0 * cfg.sigma))
    inner = (1.0 + near.sum(axis=1)) / n
    return EntropyValue(-float(np.mean(np.log(inner))), LogBase.NATURAL, Estimator.KDE)


def renyi2_truncated(states, k: int, cfg: KernelConfig) -> EntropyValue:
    """Order-2 Renyi entropy from the Gram matrix restricted to kNN links (symmetrised)."""
    arr = _require_states(states)
    n = arr.shape[0]
    if n <= k:
        raise InvalidArgument(f"need more than k={k} states, got {n}", field="k")
    sq = _squared_distances(arr)
    order = _knn_order(sq, k)
    keep = np.zeros_like(sq, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    keep |= keep.T
    np.fill_diagonal(keep, True)
    kernel = np.where(keep, np.exp(-sq / (2.0 * cfg.sigma)), 0.0)
    value = -math.log2(float(np.sum(kernel * kernel)) / (n * n))
    return EntropyValue(float(np.clip(value, 0.0, math.log2(n))), LogBase.BASE2, Estimator.RENYI)


def threshold_separated_states(rng: np.random.Generator, epsilon: float = 1e-6):
    """Random ``(states, k, kernel)`` meeting the kernel-sum threshold for ``epsilon``.

    k states sit within 1e-3 of the origin; the rest occupy a lattice whose
    spacing exceeds sqrt(2 sigma ln((N - k) / epsilon)).
    """
    k = int(rng.integers(1, 6))
    n = int(rng.integers(k + 2, 41))
    dim = int(rng.integers(1, 4))
    sigma = float(rng.uniform(0.25, 4.0))
    threshold = math.sqrt(2.0 * sigma * math.log((n - k) / epsilon))
    spacing = threshold * float(rng.uniform(1.0, 1.5)) + 0.01

    side = int(math.ceil((n - k + 1) ** (1.0 / dim))) + 1
    lattice = np.stack(np.meshgrid(*[np.arange(side)] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    lattice = lattice[np.any(lattice != 0, axis=1)]
    chosen = lattice[rng.choice(lattice.shape[0], size=n - k, replace=False)]
    cluster = rng.uniform(-5e-4, 5e-4, size=(k, dim))
    states = np.concatenate([cluster, chosen * spacing])
    return states[rng.permutation(n)], k, KernelConfig(sigma)


def subsample_evenly(states: np.ndarray, max_states: Optional[int]) -> np.ndarray:
    if max_states is None or states.shape[0] <= max_states:
        return states
    idx = np.round(np.linspace(0, states.shape[0] - 1, max_states)).astype(np.int64)
    return states[idx]


def estimate(states, cfg: EstimatorConfig) -> EntropyValue:
    arr = subsample_evenly(_require_states(states), cfg.max_states)
    if cfg.name == Estimator.KDE.value:
        return kde_entropy(arr, cfg.kernel)
    if cfg.name == Estimator.KNN.value:
        return knn_entropy(arr, cfg.k)
    return renyi_matrix_entropy(arr, cfg.alpha, cfg.kernel)
