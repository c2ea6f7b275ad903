"""Data model for multiway-clustered samples and margin aggregation.

A sample lives on a k-dimensional lattice of cells, one cluster per
dimension. Cell coordinates are 1-based tuples ``(j_1, ..., j_k)`` with
``1 <= j_i <= C_i`` (matching the on-disk formats); dimension indices in
function arguments are 0-based axes, numpy style. Cells are stored dense
in row-major order over the ``pi_c = prod(C_i)`` lattice, so every
aggregate below runs in O(pi_c * m) without enumerating cell pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "CellStatistic",
    "CellSums",
    "ClusteredSample",
    "Dimensions",
    "cell_sums",
    "count_statistic",
    "identity_statistic",
    "load_sample",
    "margin_sum",
    "pair_counts",
    "subset_margin_sum",
]


@dataclass(frozen=True)
class Dimensions:
    """Cluster counts ``C = (C_1, ..., C_k)`` of a k-way layout."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) < 1:
            raise ValueError("need at least one clustering dimension")
        if any(c < 1 for c in counts):
            raise ValueError(f"every dimension needs >= 1 cluster, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def pi_c(self) -> int:
        """Total number of cells, prod(C_i)."""
        return math.prod(self.counts)

    @property
    def c_min(self) -> int:
        """Smallest cluster count; the asymptotic driver min(C_i)."""
        return min(self.counts)

    def lambda_hats(self) -> np.ndarray:
        """Plug-in dimension weights c_min / C_i."""
        return self.c_min / np.asarray(self.counts, dtype=np.float64)

    def flat_index(self, coords: Sequence[int]) -> int:
        """Row-major flat id of a 1-based coordinate tuple."""
        if len(coords) != self.k:
            raise IndexError(f"expected {self.k} coordinates, got {len(coords)}")
        flat = 0
        for c, n in zip(coords, self.counts):
            c = int(c)
            if not 1 <= c <= n:
                raise IndexError(f"coordinate {coords} out of bounds for C={self.counts}")
            flat = flat * n + (c - 1)
        return flat

    def coords_of(self, flat: int) -> tuple[int, ...]:
        """Inverse of :meth:`flat_index`; returns 1-based coordinates."""
        out = []
        for n in reversed(self.counts):
            out.append(flat % n + 1)
            flat //= n
        return tuple(reversed(out))


@dataclass(frozen=True)
class ClusteredSample:
    """Immutable multiway-clustered sample.

    ``values`` holds all unit observation vectors stacked (n_units, obs_dim),
    grouped by cell: the units of the cell with flat id c occupy rows
    ``offsets[c]:offsets[c + 1]``, in their original input order.
    """

    dims: Dimensions
    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError("values must be 2-d (n_units, obs_dim)")
        if self.offsets.shape != (self.dims.pi_c + 1,):
            raise ShapeError("offsets must have length pi_c + 1")

    @property
    def obs_dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @cached_property
    def cell_sizes(self) -> np.ndarray:
        """N_j for every cell, flat row-major order, shape (pi_c,)."""
        return np.diff(self.offsets)

    @cached_property
    def unit_cell_ids(self) -> np.ndarray:
        """Flat cell id of every unit row, shape (n_units,)."""
        return np.repeat(np.arange(self.dims.pi_c), self.cell_sizes)

    def cell(self, coords: Sequence[int]) -> np.ndarray:
        """Observation rows of one cell (1-based coordinates), input order."""
        c = self.dims.flat_index(coords)
        return self.values[self.offsets[c] : self.offsets[c + 1]]


@dataclass(frozen=True)
class CellStatistic:
    """A vectorized unit-level statistic f mapping (n, obs_dim) -> (n, out_dim)."""

    fn: Callable[[np.ndarray], np.ndarray]
    out_dim: int

    def __call__(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(values), dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (values.shape[0], self.out_dim):
            raise ShapeError(
                f"statistic returned shape {out.shape}, "
                f"expected ({values.shape[0]}, {self.out_dim})"
            )
        return out


def identity_statistic(obs_dim: int) -> CellStatistic:
    """f(y) = y."""
    return CellStatistic(lambda v: v, obs_dim)


def count_statistic() -> CellStatistic:
    """f(y) = 1, so the cell sums recover the cell sizes N_j."""
    return CellStatistic(lambda v: np.ones((v.shape[0], 1)), 1)


@dataclass(frozen=True)
class CellSums:
    """Per-cell vector sums S_j, dense over the lattice: values (pi_c, out_dim)."""

    dims: Dimensions
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.dims.pi_c or self.values.ndim != 2:
            raise ShapeError(
                f"values shape {self.values.shape} does not match pi_c={self.dims.pi_c}"
            )

    @property
    def out_dim(self) -> int:
        return self.values.shape[1]

    def grid(self) -> np.ndarray:
        """View shaped (C_1, ..., C_k, out_dim)."""
        return self.values.reshape(*self.dims.counts, self.out_dim)


def load_sample(
    records: Iterable[tuple[Sequence[int], Sequence[float]]],
    dims: Dimensions,
    obs_dim: int | None = None,
) -> ClusteredSample:
    """Assemble a sample from (1-based cell coordinates, observation vector) records.

    Cells not named by any record are empty. Record order is preserved
    within each cell. ``obs_dim`` is inferred from the first record and
    only needed when ``records`` is empty (defaults to 1 then).
    """
    records = list(records)
    if not records:
        d = 1 if obs_dim is None else int(obs_dim)
        return ClusteredSample(
            dims, np.empty((0, d)), np.zeros(dims.pi_c + 1, dtype=np.int64)
        )
    d = len(records[0][1]) if obs_dim is None else int(obs_dim)
    flat_ids = np.empty(len(records), dtype=np.int64)
    values = np.empty((len(records), d), dtype=np.float64)
    for r, (coords, y) in enumerate(records):
        flat_ids[r] = dims.flat_index(coords)
        if len(y) != d:
            raise ShapeError(
                f"record {r}: observation length {len(y)} != {d}"
            )
        values[r] = y
    order = np.argsort(flat_ids, kind="stable")
    sizes = np.bincount(flat_ids, minlength=dims.pi_c)
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    return ClusteredSample(dims, values[order], offsets.astype(np.int64))


def cell_sums(sample: ClusteredSample, stat: CellStatistic) -> CellSums:
    """S_j = sum over the units of cell j of stat(Y); zero vector for empty cells."""
    out = np.zeros((sample.dims.pi_c, stat.out_dim))
    if sample.n_units:
        np.add.at(out, sample.unit_cell_ids, stat(sample.values))
    return CellSums(sample.dims, out)


def margin_sum(sums: CellSums, axis: int) -> np.ndarray:
    """Sum S_j over all cells sharing each cluster of one dimension.

    Returns an array of shape (C_axis, out_dim); row r is the sum over the
    cells whose coordinate on ``axis`` is the cluster r + 1.
    """
    k = sums.dims.k
    if not 0 <= axis < k:
        raise IndexError(f"axis {axis} out of range for k={k}")
    other = tuple(i for i in range(k) if i != axis)
    return sums.grid().sum(axis=other)


def subset_margin_sum(sums: CellSums, axes: Sequence[int]) -> np.ndarray:
    """Joint margin sums over a nonempty subset of dimensions.

    Cells agreeing on every dimension in ``axes`` are pooled. Returns shape
    (prod of the subset's C_i, out_dim), groups in row-major order of the
    subset coordinates. With all k axes this is S itself; with a single
    axis it coincides with :func:`margin_sum`.
    """
    k = sums.dims.k
    axes = sorted(set(int(a) for a in axes))
    if not axes:
        raise ValueError("axes subset must be nonempty")
    if axes[0] < 0 or axes[-1] >= k:
        raise IndexError(f"axes {axes} out of range for k={k}")
    other = tuple(i for i in range(k) if i not in axes)
    out = sums.grid().sum(axis=other) if other else sums.grid()
    return out.reshape(-1, sums.out_dim)


def pair_counts(dims: Dimensions, axis: int) -> tuple[int, int]:
    """Count cell pairs agreeing on dimension ``axis``.

    Returns (|A_i|, |B_i|): pairs sharing exactly that cluster and no other,
    C_i * prod_{s != i} C_s (C_s - 1), and pairs sharing at least that
    cluster, C_i * prod_{s != i} C_s^2. Empty products are 1, so both
    collapse to C_i in the one-way case.
    """
    if not 0 <= axis < dims.k:
        raise IndexError(f"axis {axis} out of range for k={dims.k}")
    a = b = dims.counts[axis]
    for s, c in enumerate(dims.counts):
        if s != axis:
            a *= c * (c - 1)
            b *= c * c
    return a, b
