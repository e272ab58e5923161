"""Z-order keys, octree construction, serialization properties."""

import numpy as np
import pytest

from octmamba.octree import (
    AXIS_ORDERS,
    build_octree,
    deinterleave_bits,
    interleave_bits,
    normalize_points,
    parent_groups,
    serialize_table,
    shuffled_key,
    zorder_locality,
)


def oracle_key(x: int, y: int, z: int, depth: int, axis_order: str = "xyz") -> int:
    """Brute-force oracle: build the interleaved bit string and parse it."""
    coords = {"x": x, "y": y, "z": z}
    bits = ""
    for i in range(depth):
        for ax in axis_order:
            bits += str((coords[ax] >> (depth - 1 - i)) & 1)
    return int(bits, 2)


# ---------------------------------------------------------------------------
# normalization


def test_normalize_cube_corners():
    pts = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    out, _ = normalize_points(pts)
    np.testing.assert_array_equal(out, [[0, 0, 0], [1, 1, 1]])


def test_normalize_single_point_degenerate():
    out, _ = normalize_points(np.array([[7.0, -3.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.5, 0.5, 0.5]])


def test_normalize_anisotropic_pair():
    out, _ = normalize_points(np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]]))
    np.testing.assert_array_equal(out, [[0, 0, 0], [1, 0.5, 0]])


def test_normalize_passes_features_through():
    feats = np.arange(6.0).reshape(2, 3)
    _, out_feats = normalize_points(np.random.default_rng(0).normal(size=(2, 3)), feats)
    assert out_feats is feats


def test_normalize_rejects_bad_input():
    with pytest.raises(ValueError):
        normalize_points(np.empty((0, 3)))
    with pytest.raises(ValueError):
        normalize_points(np.array([[np.inf, 0, 0]]))


# ---------------------------------------------------------------------------
# shuffled keys


def test_key_origin_is_zero():
    assert shuffled_key(0, 0, 0, 3) == 0


def test_key_unit_x_depth1():
    # direct bit substitution: x0=1, y0=0, z0=0 -> 0b100
    assert shuffled_key(1, 0, 0, 1) == 4


def test_key_312_depth2_against_oracle():
    assert oracle_key(3, 1, 2, 2) == 0b101110 == 46
    assert shuffled_key(3, 1, 2, 2) == 46


def test_all_depth2_keys_match_oracle():
    for x in range(4):
        for y in range(4):
            for z in range(4):
                assert shuffled_key(x, y, z, 2) == oracle_key(x, y, z, 2)


@pytest.mark.parametrize("order", AXIS_ORDERS)
def test_axis_orders_match_oracle(order):
    rng = np.random.default_rng(4)
    for _ in range(50):
        d = int(rng.integers(1, 7))
        x, y, z = (int(v) for v in rng.integers(0, 1 << d, size=3))
        assert shuffled_key(x, y, z, d, order) == oracle_key(x, y, z, d, order)


def test_key_roundtrip_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        d = int(rng.integers(1, 11))
        order = AXIS_ORDERS[int(rng.integers(0, 6))]
        coords = rng.integers(0, 1 << d, size=(500, 3))
        keys = interleave_bits(coords, d, order)
        np.testing.assert_array_equal(deinterleave_bits(keys, d, order), coords)


def test_key_order_equals_bitstring_order():
    rng = np.random.default_rng(6)
    for order in AXIS_ORDERS:
        coords = rng.integers(0, 8, size=(200, 3))
        keys = interleave_bits(coords, 3, order)
        strings = np.array([format(int(k), "09b") for k in keys])
        np.testing.assert_array_equal(
            np.argsort(keys, kind="stable"), np.argsort(strings, kind="stable")
        )


def test_key_range_errors():
    with pytest.raises(ValueError, match="out of range"):
        shuffled_key(4, 0, 0, 2)
    with pytest.raises(ValueError, match="out of range"):
        interleave_bits(np.array([[-1, 0, 0]]), 2)
    with pytest.raises(ValueError, match="depth"):
        shuffled_key(0, 0, 0, 0)
    with pytest.raises(ValueError, match="axis_order"):
        shuffled_key(0, 0, 0, 2, "xxz")


# ---------------------------------------------------------------------------
# octree construction


def _cells_to_points(keys, depth):
    grid = deinterleave_bits(np.asarray(keys, dtype=np.uint64), depth)
    return (grid.astype(np.float64) + 0.5) / (1 << depth)


def test_octant_corners_depth1():
    corners = np.array(
        [[x, y, z] for x in (0.01, 0.99) for y in (0.01, 0.99) for z in (0.01, 0.99)]
    )
    tree = build_octree(corners, depth=1)
    np.testing.assert_array_equal(tree.leaf_keys.astype(int), np.arange(8))
    assert tree.num_leaves == 8


def test_coincident_points_mean_pooling():
    pts = np.array([[0.3, 0.3, 0.3], [0.3, 0.3, 0.3]])
    feats = np.array([[0.0], [2.0]])
    tree = build_octree(pts, feats, depth=3)
    assert tree.num_leaves == 1
    assert tree.leaf_features[0, 3] == 1.0  # mean of the extra feature
    np.testing.assert_array_equal(tree.leaf_features[0, :3], [0.3, 0.3, 0.3])


def test_permutation_canonicalization_bitwise():
    rng = np.random.default_rng(7)
    pts = rng.uniform(size=(200, 3))
    feats = rng.normal(size=(200, 2))
    tree = build_octree(pts, feats, depth=5)
    perm = rng.permutation(200)
    tree_p = build_octree(pts[perm], feats[perm], depth=5)
    np.testing.assert_array_equal(tree.leaf_keys, tree_p.leaf_keys)
    np.testing.assert_array_equal(tree.leaf_features, tree_p.leaf_features)
    # same leaf for the same original point
    np.testing.assert_array_equal(tree.leaf_of_point, tree_p.leaf_of_point[np.argsort(perm)])


def test_levels_strictly_increasing_and_rooted():
    rng = np.random.default_rng(8)
    tree = build_octree(rng.uniform(size=(300, 3)), depth=4)
    for lvl in range(5):
        keys = tree.level_keys[lvl].astype(np.int64)
        assert np.all(np.diff(keys) > 0)
    assert list(tree.level_keys[0]) == [0]


def test_every_point_in_exactly_one_leaf():
    rng = np.random.default_rng(9)
    tree = build_octree(rng.uniform(size=(123, 3)), depth=4)
    assert tree.leaf_of_point.shape == (123,)
    assert int(tree.leaf_counts.sum()) == 123
    # CSR grouping and leaf_of_point agree
    for leaf in range(tree.num_leaves):
        members = tree.point_order[tree.leaf_starts[leaf] : tree.leaf_starts[leaf + 1]]
        assert np.all(tree.leaf_of_point[members] == leaf)


def test_build_rejects_bad_input():
    with pytest.raises(ValueError, match="empty"):
        build_octree(np.empty((0, 3)))
    with pytest.raises(ValueError, match="unit cube"):
        build_octree(np.array([[1.5, 0.0, 0.0]]))


def test_boundary_point_clamps_to_last_cell():
    tree = build_octree(np.array([[1.0, 1.0, 1.0]]), depth=3)
    np.testing.assert_array_equal(tree.leaf_grid()[0], [7, 7, 7])


# ---------------------------------------------------------------------------
# parent grouping


def test_parent_groups_ranges():
    pts = _cells_to_points([0, 1, 2, 7, 8, 9], depth=2)
    tree = build_octree(pts, depth=2)
    np.testing.assert_array_equal(tree.leaf_keys.astype(int), [0, 1, 2, 7, 8, 9])
    starts = parent_groups(tree, 2)
    np.testing.assert_array_equal(starts, [0, 4, 6])
    np.testing.assert_array_equal(tree.level_keys[1].astype(int), [0, 1])


def test_parent_groups_single_child():
    tree = build_octree(_cells_to_points([42], depth=2), depth=2)
    starts = parent_groups(tree, 2)
    np.testing.assert_array_equal(starts, [0, 1])
    assert int(tree.level_keys[1][0]) == 42 >> 3 == 5


def test_parent_groups_full_level():
    tree = build_octree(_cells_to_points(np.arange(64), depth=2), depth=2)
    starts = parent_groups(tree, 2)
    np.testing.assert_array_equal(np.diff(starts), np.full(8, 8))


def test_parent_groups_cover_level_once():
    rng = np.random.default_rng(10)
    tree = build_octree(rng.uniform(size=(400, 3)), depth=5)
    for lvl in range(1, 6):
        starts = parent_groups(tree, lvl)
        assert starts[0] == 0 and starts[-1] == len(tree.level_keys[lvl])
        assert np.all(np.diff(starts) >= 1)
        child_parents = tree.level_keys[lvl] >> np.uint64(3)
        for p, key in enumerate(tree.level_keys[lvl - 1]):
            seg = child_parents[starts[p] : starts[p + 1]]
            assert np.all(seg == key)


def test_parent_groups_level_zero_rejected():
    tree = build_octree(np.array([[0.5, 0.5, 0.5]]), depth=2)
    with pytest.raises(ValueError, match="level 0"):
        parent_groups(tree, 0)


# ---------------------------------------------------------------------------
# serialization artifacts


def test_serialize_table_lists_every_leaf():
    rng = np.random.default_rng(11)
    tree = build_octree(rng.uniform(size=(50, 3)), depth=3)
    table = serialize_table(tree)
    lines = table.splitlines()
    assert len(lines) == tree.num_leaves + 1
    assert "key" in lines[0] and "points" in lines[0]
    assert f"0x{int(tree.leaf_keys[0]):03x}" in lines[1]


def test_zorder_locality_beats_random_on_most_clouds():
    rng = np.random.default_rng(12)
    wins = 0
    for _ in range(20):
        pts, _ = normalize_points(rng.uniform(size=(512, 3)))
        tree = build_octree(pts, depth=6)
        z_mean, rand_mean = zorder_locality(tree, rng)
        wins += z_mean < rand_mean
    assert wins >= 19
