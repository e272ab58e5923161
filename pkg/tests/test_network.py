"""Hierarchical model: embedding, stages, FPN, heads, checkpoints."""

import numpy as np
import pytest

from octmamba.block import block_forward
from octmamba.network import (
    Affine,
    ModelConfig,
    classify_head,
    config_from_text,
    config_to_text,
    downsample,
    embed_features,
    fpn_decode,
    init_model_params,
    leaf_input_features,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    seg_default,
    segment_head,
    stage,
)
from octmamba.octree import build_octree, deinterleave_bits, normalize_points
from octmamba.data import synth_shape
from octmamba.tensor import Tensor

CLS_CFG = ModelConfig(
    stage_blocks=(1, 1), stage_channels=(8, 12), octree_depth=3, state_size=4, use_normals=False
)
SEG_CFG = ModelConfig(
    task="segment",
    num_classes=5,
    stage_blocks=(1, 1, 1),
    stage_channels=(8, 10, 12),
    octree_depth=3,
    state_size=4,
    use_normals=False,
)


def _cloud(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 3))


# ---------------------------------------------------------------------------
# embedding


def test_leaf_at_cell_center_has_zero_offset():
    # one point exactly at the center of a depth-3 cell
    center = (np.array([2, 5, 1]) + 0.5) / 8
    tree = build_octree(center[None], depth=3)
    feats = leaf_input_features(tree, CLS_CFG)
    np.testing.assert_allclose(feats[0, :3], 0.0, atol=1e-12)
    np.testing.assert_allclose(feats[0, 3:6], center, atol=0)


def test_embedding_deterministic_and_permutation_proof():
    pts = _cloud()
    params = init_model_params(CLS_CFG, np.random.default_rng(0))
    tree1 = build_octree(pts, depth=3)
    tree2 = build_octree(pts, depth=3)
    e1 = embed_features(tree1, CLS_CFG, params).data
    e2 = embed_features(tree2, CLS_CFG, params).data
    np.testing.assert_array_equal(e1, e2)
    perm = np.random.default_rng(1).permutation(len(pts))
    tree3 = build_octree(pts[perm], depth=3)
    np.testing.assert_array_equal(embed_features(tree3, CLS_CFG, params).data, e1)


def test_embedding_width_mismatch_rejected():
    tree = build_octree(_cloud(), depth=3)
    cfg = ModelConfig(
        stage_blocks=(1,), stage_channels=(8,), octree_depth=3, use_normals=True
    )
    params = init_model_params(CLS_CFG, np.random.default_rng(0))
    with pytest.raises(ValueError, match="normal"):
        embed_features(tree, cfg, params)


# ---------------------------------------------------------------------------
# stages and downsampling


def test_stage_with_no_blocks_is_identity():
    x = Tensor(np.random.default_rng(2).normal(size=(6, 8)))
    assert stage(x, [], "simplified") is x


def test_stage_of_zero_projection_blocks_is_identity():
    rng = np.random.default_rng(3)
    params = init_model_params(CLS_CFG, rng)
    blocks = params.stages[0]
    for bp in blocks:
        bp.w_p.data[:] = 0.0
    x = Tensor(rng.normal(size=(6, 8)))
    np.testing.assert_array_equal(stage(x, blocks, "simplified").data, x.data)


def test_stage_single_block_equals_block_forward():
    rng = np.random.default_rng(4)
    params = init_model_params(CLS_CFG, rng)
    x = Tensor(rng.normal(size=(6, 8)))
    out1 = stage(x, params.stages[0][:1], "simplified").data
    out2 = block_forward(x, params.stages[0][0], "simplified").data
    np.testing.assert_array_equal(out1, out2)


def test_downsample_row_count_and_pooling():
    rng = np.random.default_rng(5)
    pts = _cloud(300, seed=5)
    tree = build_octree(pts, depth=3)
    params = init_model_params(CLS_CFG, rng)
    feats = Tensor(rng.normal(size=(tree.num_leaves, 8)))
    out = downsample(feats, tree, tree.depth, params.downs[0])
    assert out.shape == (len(tree.level_keys[tree.depth - 1]), 12)


def test_segment_max_pools_children():
    from octmamba.tensor import segment_max

    x = Tensor(np.array([[1.0, 9.0], [3.0, 2.0], [5.0, 0.0]]))
    out = segment_max(x, np.array([0, 2]))
    np.testing.assert_array_equal(out.data, [[3.0, 9.0], [5.0, 0.0]])


# ---------------------------------------------------------------------------
# FPN decode


def _seg_setup(seed=6):
    rng = np.random.default_rng(seed)
    pts = _cloud(400, seed=seed)
    tree = build_octree(pts, depth=3)
    params = init_model_params(SEG_CFG, rng)
    outs = []
    for i, c in enumerate(SEG_CFG.stage_channels):
        lvl = tree.depth - i
        outs.append(Tensor(rng.normal(size=(len(tree.level_keys[lvl]), c))))
    return tree, params, outs


def test_fpn_single_stage_is_lateral_projection_only():
    tree, params, outs = _seg_setup()
    cfg1 = ModelConfig(
        task="segment", num_classes=5, stage_blocks=(1,), stage_channels=(8,),
        octree_depth=3, use_normals=False,
    )
    params1 = init_model_params(cfg1, np.random.default_rng(7))
    f = fpn_decode(outs[:1], tree, cfg1, params1)
    want = outs[0].data @ params1.laterals[0].weight.data + params1.laterals[0].bias.data
    np.testing.assert_allclose(f.data, want, atol=1e-15)


def test_fpn_zero_laterals_is_pure_parent_broadcast():
    tree, params, outs = _seg_setup()
    for lat in params.laterals[:-1]:
        lat.weight.data[:] = 0.0
        lat.bias.data[:] = 0.0
    f = fpn_decode(outs, tree, SEG_CFG, params).data
    top = params.laterals[-1]
    coarse = outs[-1].data @ top.weight.data + top.bias.data
    # walk each leaf up to its stage-2 ancestor; rows must match exactly
    lvl = tree.depth
    anc = np.arange(len(tree.level_keys[lvl]))
    for up in range(len(outs) - 1):
        anc = tree.parent_index[lvl - up][anc]
    np.testing.assert_allclose(f, coarse[anc], atol=1e-15)


def test_fpn_siblings_identical_under_zero_lateral():
    tree, params, outs = _seg_setup()
    for lat in params.laterals[:-1]:
        lat.weight.data[:] = 0.0
        lat.bias.data[:] = 0.0
    f = fpn_decode(outs, tree, SEG_CFG, params).data
    parents = tree.parent_index[tree.depth]
    for p in np.unique(parents)[:10]:
        rows = f[parents == p]
        np.testing.assert_array_equal(rows, np.tile(rows[0], (len(rows), 1)))


# ---------------------------------------------------------------------------
# heads


def test_classify_head_single_leaf_mean_equals_max():
    rng = np.random.default_rng(8)
    params = init_model_params(CLS_CFG, rng)
    row = rng.normal(size=(1, 12))
    logits = classify_head(Tensor(row), params).data
    pooled = np.concatenate([row, row], axis=1)
    h = pooled @ params.head[0].weight.data + params.head[0].bias.data
    h = h * (1.0 / (1.0 + np.exp(-h)))
    want = (h @ params.head[1].weight.data + params.head[1].bias.data)[0]
    np.testing.assert_allclose(logits, want, atol=1e-12)


def test_classify_head_invariant_to_duplicated_rows():
    rng = np.random.default_rng(9)
    params = init_model_params(CLS_CFG, rng)
    rows = rng.normal(size=(4, 12))
    dup = np.concatenate([rows, rows, rows], axis=0)
    l1 = classify_head(Tensor(rows), params).data
    l2 = classify_head(Tensor(dup), params).data
    np.testing.assert_allclose(l1, l2, atol=1e-12)


def test_classify_head_invariant_to_row_permutation():
    rng = np.random.default_rng(10)
    params = init_model_params(CLS_CFG, rng)
    rows = rng.normal(size=(6, 12))
    perm = rng.permutation(6)
    l1 = classify_head(Tensor(rows), params).data
    l2 = classify_head(Tensor(rows[perm]), params).data
    np.testing.assert_allclose(l1, l2, atol=1e-12)


def test_segment_head_broadcasts_leaf_logits():
    tree, params, outs = _seg_setup(seed=11)
    leaf_feats = Tensor(np.random.default_rng(11).normal(size=(tree.num_leaves, 12)))
    logits = segment_head(leaf_feats, tree, params).data
    assert logits.shape == (tree.num_points, SEG_CFG.num_classes)
    # two points in the same leaf share a logit row
    counts = tree.leaf_counts
    leaf = int(np.argmax(counts))
    members = np.flatnonzero(tree.leaf_of_point == leaf)
    if len(members) >= 2:
        np.testing.assert_array_equal(logits[members[0]], logits[members[1]])


def test_segment_head_uniform_features_uniform_logits():
    tree, params, _ = _seg_setup(seed=12)
    leaf_feats = Tensor(np.ones((tree.num_leaves, 12)))
    logits = segment_head(leaf_feats, tree, params).data
    np.testing.assert_array_equal(logits, np.tile(logits[0], (len(logits), 1)))


# ---------------------------------------------------------------------------
# full model


def test_model_forward_classify_shape_and_determinism():
    params = init_model_params(CLS_CFG, np.random.default_rng(13))
    pts = _cloud(250, seed=13)
    l1 = model_forward(pts, None, CLS_CFG, params).data
    l2 = model_forward(pts, None, CLS_CFG, params).data
    assert l1.shape == (CLS_CFG.num_classes,)
    np.testing.assert_array_equal(l1, l2)


def test_model_forward_permutation_invariance():
    params = init_model_params(CLS_CFG, np.random.default_rng(14))
    pts = _cloud(300, seed=14)
    base = model_forward(pts, None, CLS_CFG, params).data
    rng = np.random.default_rng(15)
    for _ in range(3):
        perm = rng.permutation(len(pts))
        got = model_forward(pts[perm], None, CLS_CFG, params).data
        assert float(np.max(np.abs(got - base))) <= 1e-5


def test_model_forward_segment_covers_every_point():
    params = init_model_params(SEG_CFG, np.random.default_rng(16))
    pts = _cloud(220, seed=16)
    logits, tree = model_forward(pts, None, SEG_CFG, params, return_octree=True)
    assert logits.shape == (220, SEG_CFG.num_classes)
    assert int(tree.leaf_counts.sum()) == 220


def test_hierarchy_conserves_points_and_shrinks():
    pts = _cloud(500, seed=17)
    tree = build_octree(pts, depth=4)
    assert int(tree.leaf_counts.sum()) == 500
    sizes = [len(k) for k in tree.level_keys]
    assert all(sizes[i] <= sizes[i + 1] for i in range(len(sizes) - 1))


def test_model_with_normals():
    cfg = ModelConfig(
        stage_blocks=(1,), stage_channels=(8,), octree_depth=3, state_size=4
    )
    params = init_model_params(cfg, np.random.default_rng(18))
    cloud = synth_shape("sphere", 64, 18)
    pts, normals = normalize_points(cloud.positions, cloud.normals)
    logits = model_forward(cloud.positions, cloud.normals, cfg, params)
    assert logits.shape == (4,)
    with pytest.raises(ValueError, match="normals"):
        model_forward(cloud.positions, None, cfg, params)


# ---------------------------------------------------------------------------
# config text and checkpoints


def test_config_text_round_trip():
    cfg = seg_default()
    assert config_from_text(config_to_text(cfg)) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        config_from_text("task = classify\nblock_chanels = 96,192\n")


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="comma-separated"):
        config_from_text("stage_blocks = a,b\n")
    with pytest.raises(ValueError, match="true/false"):
        config_from_text("use_normals = maybe\n")
    with pytest.raises(ValueError, match="equal length"):
        config_from_text("stage_blocks = 2,2\nstage_channels = 8\n")


def test_checkpoint_round_trip_bitwise(tmp_path):
    params = init_model_params(CLS_CFG, np.random.default_rng(19))
    pts = _cloud(150, seed=19)
    before = model_forward(pts, None, CLS_CFG, params).data
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), CLS_CFG, params)
    cfg2, params2 = load_checkpoint(str(path))
    assert cfg2 == CLS_CFG
    after = model_forward(pts, None, cfg2, params2).data
    np.testing.assert_array_equal(before, after)


def test_checkpoint_magic_is_stable(tmp_path):
    params = init_model_params(CLS_CFG, np.random.default_rng(20))
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), CLS_CFG, params)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"PMBA"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(path))
