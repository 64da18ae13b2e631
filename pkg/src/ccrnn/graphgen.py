"""Data-driven adjacency construction and its low-rank factorization.

The demand history observed on the training range is compressed per station
with a truncated SVD, pairwise station similarity becomes a Gaussian-kernel
adjacency, the adjacency is row-normalized, and a second truncated SVD splits
it into the source/target node embeddings that the model then trains.
Alternative initializations used by the ablation harness live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import pairwise_haversine_km
from .tensor import Tensor

# kernel entries below this are zeroed in the distance-based initialization
DISTANCE_KERNEL_FLOOR = 0.1


@dataclass
class StationEmbedding:
    """Per-station factor of the reshaped demand history (N x xi)."""

    xs: np.ndarray


@dataclass
class FactorPair:
    """Source/target node embeddings whose product implies an adjacency."""

    e1: Tensor
    e2: Tensor

    @property
    def trainable(self) -> bool:
        return self.e1.requires_grad

    @property
    def rank(self) -> int:
        return self.e1.shape[1]

    def implied_adjacency(self) -> np.ndarray:
        return self.e1.data @ self.e2.data.T


def truncated_svd(mx: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-`rank` factorization: U (R x rank), S (rank,), V (C x rank).

    Singular values are descending and nonnegative. Sign convention: the
    largest-magnitude entry of each left singular vector is nonnegative, so
    repeated runs produce identical factors.
    """
    mx = np.asarray(mx, dtype=np.float64)
    if mx.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {mx.shape}")
    if rank > min(mx.shape):
        raise ValueError(f"rank {rank} exceeds min dimension of shape {mx.shape}")
    u, s, vt = np.linalg.svd(mx, full_matrices=False)
    u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    for i in range(rank):
        pivot = np.argmax(np.abs(u[:, i]))
        if u[pivot, i] < 0:
            u[:, i] = -u[:, i]
            vt[i] = -vt[i]
    return u, s, vt.T


def station_representations(training_demand: np.ndarray, xi: int) -> StationEmbedding:
    """Compact station features from the standardized training demand.

    The (T x N x d) history is flattened to a (T*d) x N matrix whose columns
    are stations; a rank-`xi` SVD keeps the dominant shared patterns and the
    station-side factor is scaled by sqrt of the singular values so row
    distances reflect the weight of each retained component.
    """
    demand = np.asarray(training_demand, dtype=np.float64)
    if demand.ndim != 3:
        raise ValueError(f"expected T x N x d demand, got shape {demand.shape}")
    t, n, d = demand.shape
    if xi > n:
        raise ValueError(f"station feature dimension {xi} exceeds station count {n}")
    if t * d < xi:
        raise ValueError(f"history too short: {t}*{d} rows < {xi}")
    flat = demand.transpose(0, 2, 1).reshape(t * d, n)
    _, s, v = truncated_svd(flat, xi)
    return StationEmbedding(xs=v * np.sqrt(s)[None, :])


def default_epsilon(embedding: StationEmbedding | np.ndarray) -> float:
    """Kernel width used when none is configured: std of distinct-pair distances."""
    xs = embedding.xs if isinstance(embedding, StationEmbedding) else np.asarray(embedding, dtype=np.float64)
    n = xs.shape[0]
    if n < 2:
        raise ValueError("need at least two stations")
    sq = ((xs[:, None, :] - xs[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(np.maximum(sq, 0.0))
    return float(np.std(dist[np.triu_indices(n, k=1)]))


def gaussian_adjacency(embedding: StationEmbedding | np.ndarray, epsilon: float | None = None) -> np.ndarray:
    """Dense similarity matrix A[x, y] = exp(-||xs_x - xs_y||^2 / eps^2).

    When `epsilon` is not given it defaults to the standard deviation of the
    distinct-pair distance population.
    """
    xs = embedding.xs if isinstance(embedding, StationEmbedding) else np.asarray(embedding, dtype=np.float64)
    n = xs.shape[0]
    if n < 2:
        raise ValueError("need at least two stations")
    sq = ((xs[:, None, :] - xs[None, :, :]) ** 2).sum(axis=2)
    if epsilon is None:
        epsilon = default_epsilon(xs)
    if epsilon == 0.0:
        raise ValueError("kernel width epsilon is zero")
    return np.exp(-sq / (epsilon * epsilon))


def normalize_random_walk(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalize by node degree so every row sums to one."""
    a = np.asarray(adjacency, dtype=np.float64)
    degrees = a.sum(axis=1)
    dead = np.flatnonzero(degrees <= 0.0)
    if dead.size:
        raise ValueError(f"zero-degree station(s) {dead.tolist()}: random-walk normalization undefined")
    return a / degrees[:, None]


def factorize_adjacency(normalized: np.ndarray, rank: int, trainable: bool = True) -> FactorPair:
    """Split the normalized adjacency into N x L embeddings via truncated SVD.

    The singular values are shared as sqrt(S) to each side, keeping the two
    factors at comparable scale for optimization.
    """
    a = np.asarray(normalized, dtype=np.float64)
    n = a.shape[0]
    if rank > n:
        raise ValueError(f"factor rank {rank} exceeds station count {n}")
    u, s, v = truncated_svd(a, rank)
    root = np.sqrt(s)[None, :]
    return FactorPair(
        e1=Tensor(u * root, requires_grad=trainable, name="factors.e1"),
        e2=Tensor(v * root, requires_grad=trainable, name="factors.e2"),
    )


def demand_driven_factors(training_demand: np.ndarray, xi: int, rank: int,
                          epsilon: float | None = None, trainable: bool = True) -> FactorPair:
    """Full pipeline: station features -> kernel adjacency -> normalize -> factorize."""
    emb = station_representations(training_demand, xi)
    return factorize_adjacency(normalize_random_walk(gaussian_adjacency(emb, epsilon)), rank, trainable)


# ---------------------------------------------------------------------------
# alternative initializations for the ablation study
# ---------------------------------------------------------------------------

def distance_kernel(lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Gaussian kernel over great-circle distances, sparsified below the floor."""
    d = pairwise_haversine_km(np.asarray(lons, float), np.asarray(lats, float))
    n = d.shape[0]
    sigma = float(np.std(d[np.triu_indices(n, k=1)]))
    if sigma == 0.0:
        raise ValueError("all stations are co-located; distance kernel undefined")
    kernel = np.exp(-(d / sigma) ** 2)
    kernel[kernel < DISTANCE_KERNEL_FLOOR] = 0.0
    return kernel


def distance_init(lons: np.ndarray, lats: np.ndarray, rank: int) -> FactorPair:
    """Factors from a thresholded Gaussian kernel over station distances."""
    return factorize_adjacency(normalize_random_walk(distance_kernel(lons, lats)), rank)


def pcc_kernel(training_demand: np.ndarray) -> np.ndarray:
    """Pairwise correlation of total per-station demand, negatives clipped to 0."""
    demand = np.asarray(training_demand, dtype=np.float64)
    series = demand.sum(axis=2)  # (T x N) total demand per station
    stds = series.std(axis=0)
    flat_stations = np.flatnonzero(stds == 0.0)
    if flat_stations.size:
        raise ValueError(
            f"station(s) {flat_stations.tolist()} have constant demand; correlation undefined"
        )
    return np.clip(np.corrcoef(series, rowvar=False), 0.0, None)


def pcc_init(training_demand: np.ndarray, rank: int) -> FactorPair:
    """Factors from pairwise correlation of total per-station demand series."""
    return factorize_adjacency(normalize_random_walk(pcc_kernel(training_demand)), rank)


def random_init(n: int, rank: int, rng: np.random.Generator) -> FactorPair:
    """Uniform(-0.1, 0.1) factors, no structural prior."""
    return FactorPair(
        e1=Tensor(rng.uniform(-0.1, 0.1, size=(n, rank)), requires_grad=True, name="factors.e1"),
        e2=Tensor(rng.uniform(-0.1, 0.1, size=(n, rank)), requires_grad=True, name="factors.e2"),
    )


def ablation_init(variant: str, *, rank: int,
                  training_demand: np.ndarray | None = None,
                  lons: np.ndarray | None = None,
                  lats: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> FactorPair:
    """Dispatch the Table-style graph initializations by tag."""
    if variant == "distance":
        if lons is None or lats is None:
            raise ValueError("distance init needs station coordinates")
        return distance_init(lons, lats, rank)
    if variant == "pcc":
        if training_demand is None:
            raise ValueError("pcc init needs the training demand")
        return pcc_init(training_demand, rank)
    if variant == "random":
        if rng is None:
            raise ValueError("random init needs a seeded generator")
        n = len(lons) if lons is not None else np.asarray(training_demand).shape[1]
        return random_init(n, rank, rng)
    raise ValueError(f"unknown ablation init {variant!r}")


def dense_parameter_count(n: int) -> int:
    return n * n


def factored_parameter_count(n: int, rank: int) -> int:
    return 2 * n * rank


def frobenius_tail(singular_values: np.ndarray, rank: int) -> float:
    """Error of the best rank-`rank` approximation given all singular values."""
    tail = np.asarray(singular_values, dtype=np.float64)[rank:]
    return math.sqrt(float((tail**2).sum()))
