"""Similarity search, local PCA and reproducible random streams.

All functions are pure over numpy float64 arrays. Vectors are 1-D arrays;
point sets are 2-D arrays with one point per row (higher-rank point sets,
e.g. (n, K, d) subgoal sequences, are flattened to rows).
"""

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]

Metric = Literal["cosine", "euclidean"]

_STREAM_DRAW = 0
_STREAM_CHILD = 1


@dataclass
class RngStream:
    """Seeded random stream with counter-addressed draws.

    Draw number ``counter`` is produced by a PCG64 generator keyed on
    ``(seed, counter)``, so any (seed, counter) pair replays identically on
    every platform. Streams are single-owner; parallel work takes
    ``child(i)`` streams instead of sharing one.
    """

    seed: int
    counter: int = 0

    def _next(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(_STREAM_DRAW, self.counter))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, index: int) -> "RngStream":
        seq = np.random.SeedSequence(self.seed, spawn_key=(_STREAM_CHILD, index))
        return RngStream(seed=int(seq.generate_state(1, np.uint64)[0]))

    def normal(self, size: int | tuple[int, ...] | None = None, scale: float = 1.0) -> Array:
        return self._next().normal(0.0, scale, size)

    def uniform(
        self, low: float = 0.0, high: float = 1.0, size: int | tuple[int, ...] | None = None
    ) -> Array:
        return self._next().uniform(low, high, size)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None):
        return self._next().integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = True) -> npt.NDArray[np.int64]:
        return self._next().choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._next().permutation(n)


@dataclass(frozen=True)
class PcaBasis:
    """Affine PCA subspace: ``mean`` plus the span of ``basis`` columns."""

    mean: Array
    basis: Array  # d x r, orthonormal columns
    rank: int
    retained_ratio: float
    singular_values: Array = field(default_factory=lambda: np.zeros(0))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def _as_points(points: Sequence[Array] | Array) -> Array:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        raise ValueError("expected a set of points, got a single vector")
    return arr.reshape(arr.shape[0], -1)


def cosine_similarity(a: Array, b: Array) -> float:
    """Cosine of the angle between ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector (degenerate latent)")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarities(query: Array, dataset: Array, metric: Metric = "cosine") -> Array:
    """Similarity of ``query`` to every row of ``dataset`` (higher is closer)."""
    q = np.asarray(query, dtype=np.float64).ravel()
    data = _as_points(dataset)
    if data.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: query {q.shape[0]} vs dataset {data.shape[1]}")
    if metric == "euclidean":
        return -np.linalg.norm(data - q, axis=1)
    qn = np.linalg.norm(q)
    dn = np.linalg.norm(data, axis=1)
    if qn == 0.0 or np.any(dn == 0.0):
        raise ValueError("cosine similarity of a zero-norm vector (degenerate latent)")
    return np.clip(data @ q / (dn * qn), -1.0, 1.0)


def knn(query: Array, dataset: Array, k: int, metric: Metric = "cosine") -> npt.NDArray[np.int64]:
    """Indices of the ``k`` most similar rows, most similar first.

    Ties resolve to the lowest index (stable sort).
    """
    data = _as_points(dataset) if len(dataset) else np.zeros((0, 0))
    if data.shape[0] == 0:
        raise ValueError("knn over an empty dataset")
    if k < 1 or k > data.shape[0]:
        raise ValueError(f"k={k} outside 1..{data.shape[0]}")
    sims = similarities(query, data, metric)
    return np.argsort(-sims, kind="stable")[:k]


def pca_basis(points: Sequence[Array] | Array, variance_retention: float) -> PcaBasis:
    """Mean-centred PCA keeping the smallest rank reaching ``variance_retention``.

    Uses the SVD of the centred data matrix. Zero total variance yields a
    rank-0 basis (projection collapses to the mean).
    """
    if not 0.0 < variance_retention <= 1.0:
        raise ValueError(f"variance_retention must be in (0, 1], got {variance_retention}")
    data = _as_points(points)
    n, d = data.shape
    if n < 2:
        raise ValueError(f"pca_basis needs at least 2 points, got {n}")

    mean = data.mean(axis=0)
    centred = data - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    var = s**2
    total = var.sum()
    if total <= 0.0:
        return PcaBasis(mean=mean, basis=np.zeros((d, 0)), rank=0, retained_ratio=1.0,
                        singular_values=s)

    ratio = np.cumsum(var) / total
    rank = int(np.searchsorted(ratio, variance_retention - 1e-12) + 1)
    rank = min(rank, n, d)
    basis = vt[:rank].T.copy()
    # sign convention: largest-magnitude entry of each column is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(rank)])
    basis *= np.where(signs == 0, 1.0, signs)
    return PcaBasis(
        mean=mean,
        basis=basis,
        rank=rank,
        retained_ratio=float(ratio[rank - 1]),
        singular_values=s,
    )


def local_basis(points: Sequence[Array] | Array, variance_retention: float) -> PcaBasis:
    """``pca_basis`` that tolerates a single neighbour, collapsing onto it."""
    data = _as_points(points)
    if len(data) < 2:
        return PcaBasis(
            mean=data.mean(axis=0), basis=np.zeros((data.shape[1], 0)), rank=0, retained_ratio=1.0
        )
    return pca_basis(data, variance_retention)


def project_affine(z: Array, basis: PcaBasis) -> Array:
    """Project ``z`` (a vector or rows of vectors) onto ``mean + span(basis)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != basis.dim:
        raise ValueError(f"dimension mismatch: {z.shape[-1]} vs basis {basis.dim}")
    if basis.rank == 0:
        return np.broadcast_to(basis.mean, z.shape).copy()
    u = basis.basis
    return basis.mean + (z - basis.mean) @ u @ u.T
