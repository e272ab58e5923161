"""Octree-ordered bidirectional selective state-space backbone for point clouds.

Layers of the library, bottom up:

- ``tensor``: float64 tensors with tape-based reverse-mode autodiff.
- ``octree``: unit-cube normalization, shuffled (Morton) keys, octree levels,
  the z-order serialization the sequence model runs over.
- ``ssm``: discretization, the selective recurrence, the LTI kernel oracle.
- ``block``: the bidirectional gated block mixing a serialized sequence.
- ``network``: hierarchical model, classification/segmentation heads,
  checkpoint I/O.
- ``data``: XYZ file I/O, synthetic shapes, augmentations.
- ``train``: Adam, losses, accuracy/mIoU, the toy training loop.
- ``verify``: the oracle suites behind the ``check`` command.
- ``bench``: FLOP/time/memory scaling measurements.
"""

from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    finite_diff_check,
    flop_count,
    reset_flops,
)
from .octree import (
    Octree,
    build_octree,
    deinterleave_bits,
    interleave_bits,
    normalize_points,
    parent_groups,
    shuffled_key,
    zorder_locality,
)
from .ssm import (
    conv_apply,
    discretize,
    lti_kernel,
    recurrent_scan,
    recurrent_scan_reference,
    selective_scan,
)
from .block import (
    BlockParams,
    block_forward,
    block_reversal_symmetry_check,
    init_block_params,
    swap_directions,
)
from .network import (
    ModelConfig,
    ModelParams,
    init_model_params,
    leaf_input_features,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .data import PointCloud, augment, load_xyz_ascii, make_shape_dataset, save_xyz_ascii, synth_shape
from .train import Adam, TrainingDiverged, evaluate, mean_iou, train_model

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AutodiffError",
    "BlockParams",
    "ModelConfig",
    "ModelParams",
    "NonFiniteError",
    "Octree",
    "PointCloud",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainingDiverged",
    "augment",
    "block_forward",
    "block_reversal_symmetry_check",
    "build_octree",
    "conv_apply",
    "deinterleave_bits",
    "discretize",
    "evaluate",
    "finite_diff_check",
    "flop_count",
    "init_block_params",
    "init_model_params",
    "interleave_bits",
    "leaf_input_features",
    "load_checkpoint",
    "load_xyz_ascii",
    "lti_kernel",
    "make_shape_dataset",
    "mean_iou",
    "model_forward",
    "normalize_points",
    "parent_groups",
    "recurrent_scan",
    "recurrent_scan_reference",
    "reset_flops",
    "save_checkpoint",
    "save_xyz_ascii",
    "selective_scan",
    "shuffled_key",
    "swap_directions",
    "synth_shape",
    "train_model",
    "zorder_locality",
]
