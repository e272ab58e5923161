"""Bidirectional selective-scan token mixer over a serialized point sequence.

One block: LayerNorm, x/z projections, then per direction (forward and
reversed sequence) a depthwise causal conv + SiLU, input-dependent B/C/dt
projections, discretization, and the selective recurrence. Both direction
outputs are gated by SiLU(z), summed, projected back to the token width,
and added to the residual. Each direction owns its conv, projections, decay
spectrum A_log, and skip gain D; the gate and the in/out projections are
shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssm
from .tensor import (
    Tensor,
    ShapeError,
    add,
    causal_conv1d,
    exp,
    flop_count,
    layer_norm,
    matmul,
    mul,
    neg,
    reverse,
    silu,
    softplus,
)

_block_flops = 0


def reset_block_flops() -> None:
    global _block_flops
    _block_flops = 0


def block_flop_count() -> int:
    return _block_flops


@dataclass
class DirectionParams:
    conv_w: Tensor  # (E, k), tap j multiplies the token j steps back
    conv_b: Tensor  # (E,)
    w_b: Tensor  # (E, M)
    w_c: Tensor  # (E, M)
    w_dt: Tensor  # (E, E)
    b_dt: Tensor  # (E,)
    a_log: Tensor  # (E, M); A = -exp(a_log)
    d: Tensor  # (E,)

    def named(self, prefix: str):
        yield f"{prefix}.conv_w", self.conv_w
        yield f"{prefix}.conv_b", self.conv_b
        yield f"{prefix}.w_b", self.w_b
        yield f"{prefix}.w_c", self.w_c
        yield f"{prefix}.w_dt", self.w_dt
        yield f"{prefix}.b_dt", self.b_dt
        yield f"{prefix}.a_log", self.a_log
        yield f"{prefix}.d", self.d


@dataclass
class BlockParams:
    norm_scale: Tensor  # (C,)
    norm_bias: Tensor  # (C,)
    w_x: Tensor  # (C, E)
    w_z: Tensor  # (C, E)
    fwd: DirectionParams
    bwd: DirectionParams
    w_p: Tensor  # (E, C)

    @property
    def channels(self) -> int:
        return self.w_x.shape[0]

    def named(self, prefix: str):
        yield f"{prefix}.norm_scale", self.norm_scale
        yield f"{prefix}.norm_bias", self.norm_bias
        yield f"{prefix}.w_x", self.w_x
        yield f"{prefix}.w_z", self.w_z
        yield from self.fwd.named(f"{prefix}.fwd")
        yield from self.bwd.named(f"{prefix}.bwd")
        yield f"{prefix}.w_p", self.w_p

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named("block")]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_direction(
    rng: np.random.Generator, e: int, m: int, conv_width: int
) -> DirectionParams:
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
    if m > 1:
        neg_a = np.exp(np.linspace(0.0, np.log(m), m))  # -A spans [1, M] log-spaced
    else:
        neg_a = np.ones(1)
    return DirectionParams(
        conv_w=Tensor(_uniform(rng, (e, conv_width), conv_width), requires_grad=True),
        conv_b=Tensor(np.zeros(e), requires_grad=True),
        w_b=Tensor(_uniform(rng, (e, m), e), requires_grad=True),
        w_c=Tensor(_uniform(rng, (e, m), e), requires_grad=True),
        w_dt=Tensor(_uniform(rng, (e, e), e), requires_grad=True),
        b_dt=Tensor(np.log(np.expm1(dt)), requires_grad=True),  # softplus inverse
        a_log=Tensor(np.tile(np.log(neg_a), (e, 1)), requires_grad=True),
        d=Tensor(np.ones(e), requires_grad=True),
    )


def init_block_params(
    channels: int,
    rng: np.random.Generator,
    state_size: int = 16,
    conv_width: int = 4,
    expansion: int = 2,
) -> BlockParams:
    e = expansion * channels
    return BlockParams(
        norm_scale=Tensor(np.ones(channels), requires_grad=True),
        norm_bias=Tensor(np.zeros(channels), requires_grad=True),
        w_x=Tensor(_uniform(rng, (channels, e), channels), requires_grad=True),
        w_z=Tensor(_uniform(rng, (channels, e), channels), requires_grad=True),
        fwd=_init_direction(rng, e, state_size, conv_width),
        bwd=_init_direction(rng, e, state_size, conv_width),
        w_p=Tensor(_uniform(rng, (e, channels), e), requires_grad=True),
    )


def _branch(x: Tensor, p: DirectionParams, mode: str, backwards: bool) -> Tensor:
    xo = reverse(x) if backwards else x
    act = silu(causal_conv1d(xo, p.conv_w, p.conv_b))
    b = matmul(act, p.w_b)
    c = matmul(act, p.w_c)
    dt = softplus(add(matmul(act, p.w_dt), p.b_dt))
    a = neg(exp(p.a_log))
    if mode == "simplified":
        y = ssm.selective_scan(dt, b, c, a, p.d, act)
    else:
        abar, bbar = ssm.discretize(a, b, dt, mode)
        y = ssm.recurrent_scan(abar, bbar, c, p.d, act)
    return reverse(y) if backwards else y


def block_branch_outputs(p_in: Tensor, params: BlockParams, mode: str = "simplified"):
    """Pre-gating outputs (y_forward, y_backward), both in sequence order."""
    p2, _ = _as_2d(p_in)
    pn = layer_norm(p2, params.norm_scale, params.norm_bias)
    x = matmul(pn, params.w_x)
    return (
        _branch(x, params.fwd, mode, backwards=False),
        _branch(x, params.bwd, mode, backwards=True),
    )


def _as_2d(p_in: Tensor) -> tuple[Tensor, bool]:
    if p_in.ndim == 3:
        if p_in.shape[0] != 1:
            raise ShapeError(f"block_forward: leading batch dim must be 1, got {p_in.shape}")
        return p_in.reshape(p_in.shape[1:]), True
    if p_in.ndim != 2:
        raise ShapeError(f"block_forward: expected (N, C) or (1, N, C), got {p_in.shape}")
    return p_in, False


def block_forward(p_in: Tensor, params: BlockParams, mode: str = "simplified") -> Tensor:
    """Apply one block; output shape equals input shape ((N,C) or (1,N,C))."""
    global _block_flops
    p2, squeeze = _as_2d(p_in)
    n, c = p2.shape
    if n < 1:
        raise ShapeError("block_forward: empty sequence")
    if c != params.channels:
        raise ShapeError(
            f"block_forward: input width {c} does not match block width {params.channels}"
        )
    before = flop_count()

    pn = layer_norm(p2, params.norm_scale, params.norm_bias)
    x = matmul(pn, params.w_x)
    z = matmul(pn, params.w_z)
    gate = silu(z)
    y_f = _branch(x, params.fwd, mode, backwards=False)
    y_b = _branch(x, params.bwd, mode, backwards=True)
    fused = add(mul(y_f, gate), mul(y_b, gate))
    out = add(matmul(fused, params.w_p), p2)

    _block_flops += flop_count() - before
    return out.reshape((1, n, c)) if squeeze else out


def swap_directions(params: BlockParams) -> BlockParams:
    """Same block with the forward and backward parameter bundles exchanged."""
    return BlockParams(
        norm_scale=params.norm_scale,
        norm_bias=params.norm_bias,
        w_x=params.w_x,
        w_z=params.w_z,
        fwd=params.bwd,
        bwd=params.fwd,
        w_p=params.w_p,
    )


def block_reversal_symmetry_check(
    p_in: Tensor, params: BlockParams, mode: str = "simplified"
) -> float:
    """Max |block(reverse(x); swapped dirs) - reverse(block(x))|.

    Sequence reversal plus swapping the direction bundles must commute with
    the block; the contract is agreement within 1e-10.
    """
    p2, _ = _as_2d(p_in)
    out = block_forward(p2, params, mode)
    out_rev = block_forward(reverse(p2), swap_directions(params), mode)
    return float(np.max(np.abs(out_rev.data - np.flip(out.data, axis=0))))
