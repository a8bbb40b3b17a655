"""Fixed-radius neighbor search on a spatial hash grid.

Points are binned into cubic cells of edge cell_size (= the build radius);
a query against radius r <= cell_size only has to inspect the 3x3x3 cell
block around the query. Inclusion is the closed ball, tested on squared
distances. Results are deterministic: neighbors are ordered by query index,
then distance, then point index, and a cap keeps the nearest with ties
broken toward the smaller index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ContractViolation


@dataclass
class HashGrid:
    points: np.ndarray          # (N, 3) float64, the positions as built
    cell_size: float
    origin: np.ndarray          # (3,) int64 minimum cell coordinate
    dims: np.ndarray            # (3,) int64 cell counts per axis
    sorted_keys: np.ndarray     # (N,) int64 linear cell keys, ascending
    order: np.ndarray           # (N,) int64 point index per sorted key slot

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborList:
    """CSR neighbor sets for a batch of queries."""

    offsets: np.ndarray    # (Q+1,) int64
    indices: np.ndarray    # (P,) int64 point indices
    distances: np.ndarray  # (P,) float64
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.diff(self.offsets)

    @property
    def n_pairs(self) -> int:
        return int(self.indices.shape[0])

    def query_ids(self) -> np.ndarray:
        """Per-pair query index, aligned with indices/distances."""
        return np.repeat(np.arange(self.counts.shape[0], dtype=np.int64), self.counts)


def build_grid(points: np.ndarray, radius: float) -> HashGrid:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractViolation(f"build_grid expects (N, 3) positions, got {points.shape}")
    if not np.isfinite(points).all():
        raise ContractViolation("build_grid: positions must be finite")
    if not (radius > 0.0):
        raise ContractViolation(f"build_grid: radius must be positive, got {radius}")
    if points.shape[0] == 0:
        return HashGrid(
            points,
            float(radius),
            np.zeros(3, dtype=np.int64),
            np.ones(3, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )
    coords = np.floor(points / radius).astype(np.int64)
    origin = coords.min(axis=0)
    shifted = coords - origin[None, :]
    dims = shifted.max(axis=0) + 1
    keys = (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]
    order = np.argsort(keys, kind="stable").astype(np.int64)
    return HashGrid(points, float(radius), origin, dims, keys[order], order)


def query(
    grid: HashGrid,
    queries: np.ndarray,
    radius: float | None = None,
    cap: int = 0,
    exclude_self: bool = False,
) -> NeighborList:
    """Neighbors of each query within the closed ball of the given radius.

    radius defaults to the build radius and must not exceed it. cap == 0
    means unlimited. exclude_self drops pairs whose point index equals the
    query index (use only when querying the grid's own point set).
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != 3:
        raise ContractViolation(f"query expects (Q, 3) positions, got {queries.shape}")
    if not np.isfinite(queries).all():
        raise ContractViolation("query: positions must be finite")
    r = grid.cell_size if radius is None else float(radius)
    if r > grid.cell_size * (1.0 + 1e-12):
        raise ContractViolation(
            f"query radius {r} exceeds grid cell size {grid.cell_size}; rebuild with the larger radius"
        )
    offsets, indices, distances = backend.grid_query(
        grid.sorted_keys,
        grid.order,
        grid.points,
        grid.origin,
        grid.dims,
        grid.cell_size,
        queries,
        r,
        int(cap),
        bool(exclude_self),
    )
    return NeighborList(offsets, indices, distances)


def neighbor_counts(
    grid: HashGrid, queries: np.ndarray, radius: float | None = None, exclude_self: bool = False
) -> np.ndarray:
    """Neighbor count per query (no cap)."""
    return query(grid, queries, radius=radius, cap=0, exclude_self=exclude_self).counts


def nearest_distances(points_from: np.ndarray, points_to: np.ndarray) -> np.ndarray:
    """Exact distance from each row of points_from to its nearest row of points_to.

    Grid-accelerated with an expanding search radius; small inputs fall back
    to the vectorized all-pairs computation. Distances use the same squared
    form as the grid queries, so results match a brute-force oracle exactly.
    """
    a = np.ascontiguousarray(points_from, dtype=np.float64)
    b = np.ascontiguousarray(points_to, dtype=np.float64)
    if b.shape[0] == 0:
        raise ContractViolation("nearest_distances: target set is empty")
    if a.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    if a.shape[0] * b.shape[0] <= 262144:
        dx = a[:, None, 0] - b[None, :, 0]
        dy = a[:, None, 1] - b[None, :, 1]
        dz = a[:, None, 2] - b[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        return np.sqrt(d2.min(axis=1))

    # start near the typical spacing and expand until every query has a hit
    span = max(float(b.max() - b.min()), 1e-9)
    r = max(span * (b.shape[0] ** (-1.0 / 3.0)), 1e-9)
    out = np.full(a.shape[0], np.inf, dtype=np.float64)
    pending = np.arange(a.shape[0])
    while pending.size:
        grid = build_grid(b, r)
        nl = query(grid, a[pending], radius=r, cap=1)
        hit = nl.counts > 0
        hit_rows = pending[hit]
        out[hit_rows] = nl.distances
        pending = pending[~hit]
        r *= 2.0
    return out
