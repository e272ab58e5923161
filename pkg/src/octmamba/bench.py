"""Scaling measurements: FLOPs, wall time, and peak transient memory vs N.

Bench clouds are jittered samples of N *distinct* grid cells, so the
serialized sequence length equals the requested N exactly. Surface- or
volume-sampled clouds saturate octree occupancy at large N (leaf count goes
sublinear in point count), which would corrupt exactly the linearity this
module exists to measure. Requires 8^depth >= N.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .block import Tensor, block_flop_count, block_forward, init_block_params, reset_block_flops
from .network import ModelConfig, ModelParams, model_forward
from .octree import deinterleave_bits
from .tensor import flop_count, reset_flops


@dataclass
class BenchRow:
    n_points: int
    leaves: int
    block_flops: int
    total_flops: int
    median_time_s: float
    peak_bytes: int

    @staticmethod
    def csv_header() -> str:
        return "n_points,leaves,block_flops,total_flops,median_time_s,peak_bytes"

    def csv(self) -> str:
        return (
            f"{self.n_points},{self.leaves},{self.block_flops},{self.total_flops},"
            f"{self.median_time_s:.6f},{self.peak_bytes}"
        )


def distinct_cell_cloud(n: int, depth: int, rng: np.random.Generator) -> np.ndarray:
    """N points occupying N distinct cells of the 2^depth grid.

    The two extreme corner cells are always present with points at exactly
    (0,0,0) and (1,1,1), which makes unit-cube normalization the identity,
    so the serialized sequence length stays exactly N through the model.
    """
    total = 1 << (3 * depth)
    if n > total:
        raise ValueError(f"cannot place {n} distinct cells at depth {depth} (only {total})")
    if n < 2:
        return np.zeros((n, 3))
    keys = 1 + rng.choice(total - 2, size=n - 2, replace=False).astype(np.uint64)
    grid = deinterleave_bits(keys, depth).astype(np.float64)
    jitter = rng.uniform(0.1, 0.9, size=(n - 2, 3))
    pts = (grid + jitter) / (1 << depth)
    return np.concatenate([np.zeros((1, 3)), pts, np.ones((1, 3))], axis=0)


def _unit_normals(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def measure_model_scaling(
    config: ModelConfig,
    params: ModelParams,
    sizes: list[int],
    seed: int = 0,
    repeats: int = 5,
) -> list[BenchRow]:
    """model_forward at each size: instrumented FLOPs, median wall time, peak bytes."""
    rows = []
    for n in sizes:
        rng = np.random.default_rng(seed)
        pts = distinct_cell_cloud(n, config.octree_depth, rng)
        normals = _unit_normals(rng, n) if config.use_normals else None

        reset_flops()
        reset_block_flops()
        logits, octree = model_forward(pts, normals, config, params, return_octree=True)
        total_flops = flop_count()
        block_flops = block_flop_count()
        del logits

        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model_forward(pts, normals, config, params)
            times.append(time.perf_counter() - t0)

        tracemalloc.start()
        model_forward(pts, normals, config, params)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        rows.append(
            BenchRow(
                n_points=n,
                leaves=octree.num_leaves,
                block_flops=block_flops,
                total_flops=total_flops,
                median_time_s=float(np.median(times)),
                peak_bytes=int(peak),
            )
        )
    return rows


def measure_block_scaling(
    sizes: list[int],
    channels: int = 16,
    state_size: int = 16,
    seed: int = 0,
    repeats: int = 5,
) -> list[BenchRow]:
    """block_forward on raw sequences of each length (no octree in the loop)."""
    rng = np.random.default_rng(seed)
    params = init_block_params(channels, rng, state_size=state_size)
    rows = []
    for n in sizes:
        p_in = Tensor(rng.normal(size=(n, channels)))
        reset_flops()
        reset_block_flops()
        block_forward(p_in, params)
        flops = block_flop_count()

        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            block_forward(p_in, params)
            times.append(time.perf_counter() - t0)

        tracemalloc.start()
        block_forward(p_in, params)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        rows.append(
            BenchRow(
                n_points=n,
                leaves=n,
                block_flops=flops,
                total_flops=flops,
                median_time_s=float(np.median(times)),
                peak_bytes=int(peak),
            )
        )
    return rows


def doubling_ratios(rows: list[BenchRow], attr: str) -> list[float]:
    """ratio[i] = value(rows[i+1]) / value(rows[i]) for consecutive sizes."""
    vals = [getattr(r, attr) for r in rows]
    return [vals[i + 1] / vals[i] for i in range(len(vals) - 1)]
