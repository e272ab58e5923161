"""Octree construction and z-order serialization of point clouds.

Points are normalized into the unit cube, quantized to a 2^d grid, and each
cell is given a shuffled key: the bits of the three coordinates interleaved
MSB-first, so sorting by key walks the 3-D z-order curve and all children of
one octree node occupy a contiguous key range (they share the leading
3*(d-1) bits). The sorted occupied leaves are the serialized token sequence
the sequence model consumes; coarser levels are obtained by dropping the
last bit triplet (key >> 3) and deduplicating.

Construction is canonical: points are ordered by (key, x, y, z) before
grouping, so any permutation of the same distinct points yields the same
leaf key sequence and bitwise-identical pooled leaf features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AXIS_ORDERS = ("xyz", "xzy", "yxz", "yzx", "zxy", "zyx")

MAX_DEPTH = 21  # 3*21 = 63 bits in a uint64


def _check_depth(depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")


def _axis_columns(axis_order: str) -> list[int]:
    if axis_order not in AXIS_ORDERS:
        raise ValueError(f"axis_order must be one of {AXIS_ORDERS}, got {axis_order!r}")
    return ["xyz".index(ch) for ch in axis_order]


def interleave_bits(coords, depth: int, axis_order: str = "xyz") -> np.ndarray:
    """Shuffled keys for integer grid coordinates (..., 3).

    Bit i of each coordinate (i = 0 the most significant of the d bits)
    lands in key triplet i, first axis of ``axis_order`` first, so leading
    key bits partition space coarsest.
    """
    _check_depth(depth)
    cols = _axis_columns(axis_order)
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) coordinates, got shape {coords.shape}")
    if np.any(coords < 0) or np.any(coords >= (1 << depth)):
        raise ValueError(f"coordinates out of range [0, 2^{depth})")
    c = coords[..., cols].astype(np.uint64)
    key = np.zeros(coords.shape[:-1], dtype=np.uint64)
    for i in range(depth):
        bits = (c >> np.uint64(depth - 1 - i)) & np.uint64(1)
        base = np.uint64(3 * (depth - 1 - i))
        key |= (bits[..., 0] << (base + np.uint64(2))) | (bits[..., 1] << (base + np.uint64(1))) | (
            bits[..., 2] << base
        )
    return key


def deinterleave_bits(keys, depth: int, axis_order: str = "xyz") -> np.ndarray:
    """Inverse of interleave_bits: keys -> integer grid coordinates (..., 3)."""
    _check_depth(depth)
    cols = _axis_columns(axis_order)
    keys = np.asarray(keys, dtype=np.uint64)
    if np.any(keys >> np.uint64(3 * depth)):
        raise ValueError(f"key out of range [0, 2^{3 * depth})")
    c = np.zeros(keys.shape + (3,), dtype=np.uint64)
    for i in range(depth):
        base = np.uint64(3 * (depth - 1 - i))
        shift = np.uint64(depth - 1 - i)
        c[..., 0] |= ((keys >> (base + np.uint64(2))) & np.uint64(1)) << shift
        c[..., 1] |= ((keys >> (base + np.uint64(1))) & np.uint64(1)) << shift
        c[..., 2] |= ((keys >> base) & np.uint64(1)) << shift
    out = np.zeros_like(c, dtype=np.int64)
    for slot, col in enumerate(cols):
        out[..., col] = c[..., slot]
    return out


def shuffled_key(x: int, y: int, z: int, depth: int, axis_order: str = "xyz") -> int:
    """Scalar convenience wrapper around interleave_bits."""
    return int(interleave_bits(np.array([x, y, z]), depth, axis_order))


def normalize_points(points, features=None, scale: float | None = None):
    """Map points isotropically into the unit cube.

    Subtracts the per-axis minimum and divides by the largest axis extent,
    preserving shape. A fully degenerate cloud (single point or all points
    coincident) maps to (0.5, 0.5, 0.5). Extra features pass through.

    A positive ``scale`` divides by that fixed length instead of the fitted
    extent (the knob standing in for metric voxel sizes); the cloud must
    then fit inside it.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {points.shape}")
    if points.shape[0] < 1:
        raise ValueError("normalize_points: empty input")
    if not np.all(np.isfinite(points)):
        raise ValueError("normalize_points: non-finite coordinates")
    mins = points.min(axis=0)
    extent = float((points.max(axis=0) - mins).max())
    if scale is not None and scale > 0:
        if extent > scale:
            raise ValueError(
                f"normalize_points: cloud extent {extent:g} exceeds the fixed scale {scale:g}"
            )
        return (points - mins) / scale, features
    if extent <= 0.0:
        out = np.full_like(points, 0.5)
    else:
        out = (points - mins) / extent
    return out, features


@dataclass(frozen=True)
class Octree:
    """Sorted per-depth key arrays plus point-to-leaf bookkeeping.

    ``level_keys[l]`` holds the strictly increasing keys of occupied nodes
    at depth l (level_keys[depth] are the leaves, level_keys[0] == [0]).
    ``parent_index[l]`` maps each node at depth l to its parent's position
    at depth l-1 (parent_index[0] is empty). Points are stored CSR-style:
    ``point_order[leaf_starts[i]:leaf_starts[i+1]]`` are the original
    indices of the points in leaf i, in canonical order. ``leaf_features``
    columns are the per-leaf mean of (normalized position, extra features).
    """

    depth: int
    axis_order: str
    level_keys: tuple[np.ndarray, ...]
    parent_index: tuple[np.ndarray, ...]
    leaf_of_point: np.ndarray
    point_order: np.ndarray
    leaf_starts: np.ndarray
    leaf_features: np.ndarray
    num_points: int

    @property
    def num_leaves(self) -> int:
        return len(self.level_keys[self.depth])

    @property
    def leaf_keys(self) -> np.ndarray:
        return self.level_keys[self.depth]

    @property
    def leaf_counts(self) -> np.ndarray:
        return np.diff(self.leaf_starts)

    def leaf_grid(self) -> np.ndarray:
        return deinterleave_bits(self.leaf_keys, self.depth, self.axis_order)

    def leaf_centers(self) -> np.ndarray:
        return (self.leaf_grid().astype(np.float64) + 0.5) / (1 << self.depth)

    def nodes_at(self, level: int) -> np.ndarray:
        return self.level_keys[level]


def build_octree(points, features=None, depth: int = 6, axis_order: str = "xyz") -> Octree:
    """Build the occupied-node hierarchy for unit-cube points.

    Grid coordinate per axis is min(floor(u * 2^d), 2^d - 1). Co-located
    points merge into one leaf whose feature row is the mean of their
    (position, extra-feature) rows.
    """
    _check_depth(depth)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {points.shape}")
    n = points.shape[0]
    if n == 0:
        raise ValueError("build_octree: empty input")
    if np.any(points < -1e-12) or np.any(points > 1.0 + 1e-12):
        raise ValueError("build_octree: points must lie in the unit cube (normalize first)")
    if features is None:
        vals = points
    else:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != n:
            raise ValueError(f"features rows ({features.shape[0]}) do not match points ({n})")
        vals = np.concatenate([points, features], axis=1)

    scale = 1 << depth
    grid = np.minimum(np.floor(points * scale).astype(np.int64), scale - 1)
    np.clip(grid, 0, scale - 1, out=grid)
    keys = interleave_bits(grid, depth, axis_order)

    # canonical order: key, then position, makes grouping permutation-proof
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], keys))
    ks = keys[order]
    boundary = np.empty(n, dtype=bool)
    boundary[0] = True
    boundary[1:] = ks[1:] != ks[:-1]
    starts_idx = np.flatnonzero(boundary)
    leaf_keys = ks[starts_idx]
    leaf_starts = np.append(starts_idx, n)
    counts = np.diff(leaf_starts)

    leaf_of_point = np.empty(n, dtype=np.int64)
    leaf_of_point[order] = np.cumsum(boundary) - 1

    pooled = np.add.reduceat(vals[order], starts_idx, axis=0) / counts[:, None]

    level_keys: list[np.ndarray] = [leaf_keys]
    for _ in range(depth):
        level_keys.append(np.unique(level_keys[-1] >> np.uint64(3)))
    level_keys.reverse()  # index by depth level: 0 .. depth

    parent_index: list[np.ndarray] = [np.empty(0, dtype=np.int64)]
    for lvl in range(1, depth + 1):
        parent_index.append(
            np.searchsorted(level_keys[lvl - 1], level_keys[lvl] >> np.uint64(3)).astype(np.int64)
        )

    return Octree(
        depth=depth,
        axis_order=axis_order,
        level_keys=tuple(level_keys),
        parent_index=tuple(parent_index),
        leaf_of_point=leaf_of_point,
        point_order=order,
        leaf_starts=leaf_starts,
        leaf_features=pooled,
        num_points=n,
    )


def parent_groups(octree: Octree, level: int) -> np.ndarray:
    """CSR boundaries grouping depth-`level` nodes under their parents.

    Returns ``starts`` of length P+1: children of parent p (at level-1)
    occupy indices ``starts[p]:starts[p+1]`` in the level's key array.
    Groups are contiguous because siblings share a key prefix and levels
    are sorted.
    """
    if not 1 <= level <= octree.depth:
        raise ValueError(f"level must be in [1, {octree.depth}]; level 0 has no parent")
    child_parents = octree.level_keys[level] >> np.uint64(3)
    parents = octree.level_keys[level - 1]
    starts = np.searchsorted(child_parents, parents, side="left")
    return np.append(starts, len(child_parents)).astype(np.int64)


def serialize_table(octree: Octree) -> str:
    """Human-readable serialization: leaf index, key, grid coords, point count."""
    grid = octree.leaf_grid()
    counts = octree.leaf_counts
    width = (3 * octree.depth + 3) // 4  # hex digits for 3d bits
    lines = [f"{'leaf':>6}  {'key':>{width + 2}}  {'x':>5} {'y':>5} {'z':>5}  {'points':>6}"]
    for i, key in enumerate(octree.leaf_keys):
        lines.append(
            f"{i:>6}  0x{int(key):0{width}x}  {grid[i, 0]:>5} {grid[i, 1]:>5} {grid[i, 2]:>5}  {int(counts[i]):>6}"
        )
    return "\n".join(lines)


def nearest_neighbor_ranks(centers: np.ndarray) -> np.ndarray:
    """Index of each row's nearest other row (brute force, exact)."""
    l = centers.shape[0]
    if l < 2:
        raise ValueError("need at least two leaves for neighbor ranks")
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.argmin(d2, axis=1)


def zorder_locality(octree: Octree, rng: np.random.Generator) -> tuple[float, float]:
    """Mean sequence distance to the nearest spatial neighbor.

    Returns (zorder_mean, random_mean): the same metric under the octree's
    serialized order and under a uniformly random order of the same leaves.
    Lower is better; z-order should beat random on nearly every cloud.
    """
    centers = octree.leaf_centers()
    nn = nearest_neighbor_ranks(centers)
    l = centers.shape[0]
    pos = np.arange(l)
    z_mean = float(np.mean(np.abs(pos - nn)))
    perm = rng.permutation(l)
    rand_mean = float(np.mean(np.abs(perm - perm[nn])))
    return z_mean, rand_mean
