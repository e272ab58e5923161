"""Hierarchical point-cloud model: embedding, block stages, heads, checkpoints.

The pipeline is: normalize points, build the octree, embed one feature row
per occupied leaf, then alternate stacks of sequence blocks with
parent-group downsampling. Stage i runs on the occupied nodes at octree
depth d - i, so each downsample consumes one octree level. Classification
pools the coarsest stage; segmentation decodes back to the leaves with a
small top-down feature pyramid and broadcasts leaf logits to points.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import octree as octree_mod
from .block import BlockParams, block_forward, init_block_params
from .octree import Octree, build_octree, normalize_points, parent_groups
from .ssm import DISCRETIZATION_MODES
from .tensor import (
    Tensor,
    add,
    concat,
    index_select,
    layer_norm,
    matmul,
    segment_max,
    silu,
    tmax,
    tmean,
)

CHECKPOINT_MAGIC = b"PMBA"
CHECKPOINT_VERSION = 1

TASKS = ("classify", "segment")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "classify"
    num_classes: int = 4
    octree_depth: int = 6
    axis_order: str = "xyz"
    stage_blocks: tuple[int, ...] = (6, 6)
    stage_channels: tuple[int, ...] = (96, 192)
    state_size: int = 16
    conv_width: int = 4
    expansion: int = 2
    discretization: str = "simplified"
    use_normals: bool = True

    def validate(self) -> "ModelConfig":
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.axis_order not in octree_mod.AXIS_ORDERS:
            raise ValueError(f"axis_order must be one of {octree_mod.AXIS_ORDERS}")
        if self.discretization not in DISCRETIZATION_MODES:
            raise ValueError(f"discretization must be one of {DISCRETIZATION_MODES}")
        if len(self.stage_blocks) != len(self.stage_channels):
            raise ValueError("stage_blocks and stage_channels must have equal length")
        if len(self.stage_blocks) < 1:
            raise ValueError("need at least one stage")
        if len(self.stage_blocks) > self.octree_depth + 1:
            raise ValueError("more stages than octree levels")
        vals = (
            (self.num_classes, "num_classes"),
            (self.octree_depth, "octree_depth"),
            (self.state_size, "state_size"),
            (self.conv_width, "conv_width"),
            (self.expansion, "expansion"),
        )
        for v, name in vals:
            if v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if any(v < 0 for v in self.stage_blocks) or any(v < 1 for v in self.stage_channels):
            raise ValueError("stage_blocks must be >= 0 and stage_channels >= 1")
        return self

    @property
    def in_features(self) -> int:
        return 9 if self.use_normals else 6

    @property
    def num_stages(self) -> int:
        return len(self.stage_blocks)


def seg_default(num_classes: int = 8) -> ModelConfig:
    return ModelConfig(
        task="segment",
        num_classes=num_classes,
        stage_blocks=(2, 2, 18, 2),
        stage_channels=(96, 192, 384, 384),
    )


@dataclass
class LinearNorm:
    """Linear projection followed by LayerNorm (used by embed/downsample)."""

    weight: Tensor
    bias: Tensor
    ln_scale: Tensor
    ln_bias: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.ln_scale", self.ln_scale
        yield f"{prefix}.ln_bias", self.ln_bias


@dataclass
class Affine:
    weight: Tensor
    bias: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class ModelParams:
    embed: LinearNorm
    stages: list[list[BlockParams]]
    downs: list[LinearNorm]
    laterals: list[Affine]  # segmentation only: per stage, projection to FPN width
    head: list[Affine]

    def named(self):
        yield from self.embed.named("embed")
        for i, blocks in enumerate(self.stages):
            for j, bp in enumerate(blocks):
                yield from bp.named(f"stage{i}.block{j}")
        for i, dn in enumerate(self.downs):
            yield from dn.named(f"down{i}")
        for i, lat in enumerate(self.laterals):
            yield from lat.named(f"lateral{i}")
        for i, aff in enumerate(self.head):
            yield from aff.named(f"head{i}")


def _linear_norm(rng: np.random.Generator, fan_in: int, fan_out: int) -> LinearNorm:
    bound = 1.0 / np.sqrt(fan_in)
    return LinearNorm(
        weight=Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
        ln_scale=Tensor(np.ones(fan_out), requires_grad=True),
        ln_bias=Tensor(np.zeros(fan_out), requires_grad=True),
    )


def _affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> Affine:
    bound = 1.0 / np.sqrt(fan_in)
    return Affine(
        weight=Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
    )


def init_model_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    config.validate()
    chans = config.stage_channels
    stages = [
        [
            init_block_params(
                chans[i], rng, config.state_size, config.conv_width, config.expansion
            )
            for _ in range(config.stage_blocks[i])
        ]
        for i in range(config.num_stages)
    ]
    downs = [
        _linear_norm(rng, chans[i], chans[i + 1]) for i in range(config.num_stages - 1)
    ]
    laterals: list[Affine] = []
    if config.task == "segment":
        width = chans[-1]
        laterals = [_affine(rng, c, width) for c in chans]
    if config.task == "classify":
        hidden = chans[-1]
        head = [_affine(rng, 2 * chans[-1], hidden), _affine(rng, hidden, config.num_classes)]
    else:
        head = [_affine(rng, chans[-1], config.num_classes)]
    return ModelParams(
        embed=_linear_norm(rng, config.in_features, chans[0]),
        stages=stages,
        downs=downs,
        laterals=laterals,
        head=head,
    )


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for _, t in params.named())


# ---------------------------------------------------------------------------
# Forward pieces


def leaf_input_features(octree: Octree, config: ModelConfig) -> np.ndarray:
    """Raw per-leaf input rows, before any learned transform.

    Columns: offset of the mean point position within its cell (in cell
    units, zero at the center), the mean position itself, and the mean
    normals when configured.
    """
    pooled = octree.leaf_features
    mean_pos = pooled[:, :3]
    scale = 1 << octree.depth
    offset = mean_pos * scale - octree.leaf_grid().astype(np.float64) - 0.5
    cols = [offset, mean_pos]
    if config.use_normals:
        if pooled.shape[1] < 6:
            raise ValueError("config.use_normals is set but the octree has no normal features")
        cols.append(pooled[:, 3:6])
    return np.concatenate(cols, axis=1)


def embed_features(octree: Octree, config: ModelConfig, params: ModelParams) -> Tensor:
    """One embedded row per occupied leaf: linear -> LayerNorm -> SiLU."""
    feats = Tensor(leaf_input_features(octree, config))
    if feats.shape[1] != config.in_features:
        raise ValueError(
            f"embedding width mismatch: built {feats.shape[1]} features, config expects {config.in_features}"
        )
    e = params.embed
    return silu(layer_norm(add(matmul(feats, e.weight), e.bias), e.ln_scale, e.ln_bias))


def stage(feats: Tensor, blocks: list[BlockParams], mode: str) -> Tensor:
    for bp in blocks:
        feats = block_forward(feats, bp, mode)
    return feats


def downsample(feats: Tensor, octree: Octree, level: int, proj: LinearNorm) -> Tensor:
    """Max over each parent's children, then linear -> LayerNorm -> SiLU."""
    starts = parent_groups(octree, level)
    pooled = segment_max(feats, starts[:-1])
    return silu(
        layer_norm(add(matmul(pooled, proj.weight), proj.bias), proj.ln_scale, proj.ln_bias)
    )


def fpn_decode(
    stage_outputs: list[Tensor], octree: Octree, config: ModelConfig, params: ModelParams
) -> Tensor:
    """Top-down decode back to leaf resolution.

    The coarsest stage is projected to the common width; each step up copies
    a parent's feature to all its children and adds the laterally projected
    finer stage output. Returns features at the leaf level.
    """
    k = len(stage_outputs)
    top = params.laterals[k - 1]
    f = add(matmul(stage_outputs[-1], top.weight), top.bias)
    for i in range(k - 2, -1, -1):
        child_level = octree.depth - i
        f = index_select(f, octree.parent_index[child_level])
        lat = params.laterals[i]
        f = add(f, add(matmul(stage_outputs[i], lat.weight), lat.bias))
    return f


def classify_head(feats: Tensor, params: ModelParams) -> Tensor:
    """Mean+max pool over nodes, two-layer head; returns (num_classes,) logits."""
    pooled = concat(
        [tmean(feats, axis=0, keepdims=True), tmax(feats, axis=0, keepdims=True)], axis=1
    )
    h1, h2 = params.head
    hidden = silu(add(matmul(pooled, h1.weight), h1.bias))
    logits = add(matmul(hidden, h2.weight), h2.bias)
    return logits.reshape((logits.shape[1],))


def segment_head(leaf_feats: Tensor, octree: Octree, params: ModelParams) -> Tensor:
    """Per-leaf logits broadcast to every input point; returns (N, k)."""
    (aff,) = params.head
    leaf_logits = add(matmul(leaf_feats, aff.weight), aff.bias)
    return index_select(leaf_logits, octree.leaf_of_point)


def model_forward(
    positions: np.ndarray,
    normals: np.ndarray | None,
    config: ModelConfig,
    params: ModelParams,
    return_octree: bool = False,
):
    """Full pipeline from raw points to logits.

    Classification returns (num_classes,); segmentation returns one logit
    row per input point.
    """
    if config.use_normals and normals is None:
        raise ValueError("config.use_normals is set but no normals were provided")
    pts, feats_in = normalize_points(positions, normals)
    octree = build_octree(pts, feats_in, config.octree_depth, config.axis_order)

    feats = embed_features(octree, config, params)
    mode = config.discretization
    stage_outputs: list[Tensor] = []
    for i in range(config.num_stages):
        feats = stage(feats, params.stages[i], mode)
        stage_outputs.append(feats)
        if i < config.num_stages - 1:
            feats = downsample(feats, octree, octree.depth - i, params.downs[i])

    if config.task == "classify":
        logits = classify_head(stage_outputs[-1], params)
    else:
        leaf_feats = fpn_decode(stage_outputs, octree, config, params)
        logits = segment_head(leaf_feats, octree, params)
    return (logits, octree) if return_octree else logits


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, config text block, named-tensor table


def config_to_text(config: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    known = {f.name: f for f in fields(ModelConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_field(key, known[key].type, val)
    return ModelConfig(**values).validate()


def _parse_field(key: str, ftype: str, val: str):
    if "tuple" in str(ftype):
        try:
            return tuple(int(x) for x in val.split(",") if x.strip() != "")
        except ValueError:
            raise ValueError(f"config key {key!r}: expected comma-separated ints, got {val!r}") from None
    if "bool" in str(ftype):
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected true/false, got {val!r}")
    if "int" in str(ftype):
        return int(val)
    return val


def save_checkpoint(path: str, config: ModelConfig, params: ModelParams) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    ctext = config_to_text(config).encode("utf-8")
    buf.write(struct.pack("<Q", len(ctext)))
    buf.write(ctext)
    named = list(params.named())
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", 1, t.ndim))  # dtype tag 1 = float64
        for dim in t.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<Q", buf.read(8))
    config = config_from_text(buf.read(clen).decode("utf-8"))
    (count,) = struct.unpack("<I", buf.read(4))
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        dtype_tag, ndim = struct.unpack("<BB", buf.read(2))
        if dtype_tag != 1:
            raise ValueError(f"tensor {name!r}: unsupported dtype tag {dtype_tag}")
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n_elem = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n_elem), dtype="<f8").reshape(shape)
        loaded[name] = data.astype(np.float64)

    params = init_model_params(config, np.random.default_rng(0))
    expected = dict(params.named())
    if set(expected) != set(loaded):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ValueError(f"checkpoint tensor names mismatch: missing {missing}, extra {extra}")
    for name, t in expected.items():
        if loaded[name].shape != t.shape:
            raise ValueError(
                f"tensor {name!r}: checkpoint shape {loaded[name].shape} != expected {t.shape}"
            )
        t.data = loaded[name].copy()
    return config, params
