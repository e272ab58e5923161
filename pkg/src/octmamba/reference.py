"""Straight-line re-implementations used as oracles by the check suites.

Everything here is written independently of the production code paths: no
tape, no shared helpers, plain loops over tokens and channels. Slow on
purpose; the production block and scan must agree with these to 1e-12.
"""

from __future__ import annotations

import math

import numpy as np

from .block import BlockParams


def _sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    ev = math.exp(v)
    return ev / (1.0 + ev)


def _silu_rows(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        flat_out[i] = flat_in[i] * _sigmoid_scalar(flat_in[i])
    return out


def _direction_pass(
    x: np.ndarray, dp, mode: str, backwards: bool
) -> np.ndarray:
    n, e_dim = x.shape
    conv_w = dp.conv_w.data
    k = conv_w.shape[1]
    m_dim = dp.w_b.data.shape[1]

    seq = x[::-1].copy() if backwards else x

    # depthwise causal conv: tap j reads the token j steps back
    conv = np.zeros((n, e_dim))
    for t in range(n):
        for e in range(e_dim):
            acc = dp.conv_b.data[e]
            for j in range(k):
                if t - j >= 0:
                    acc += conv_w[e, j] * seq[t - j, e]
            conv[t, e] = acc
    act = _silu_rows(conv)

    b = act @ dp.w_b.data
    c = act @ dp.w_c.data
    pre_dt = act @ dp.w_dt.data + dp.b_dt.data
    dt = np.empty_like(pre_dt)
    dt_flat, pre_flat = dt.reshape(-1), pre_dt.reshape(-1)
    for i in range(pre_flat.size):
        v = pre_flat[i]
        dt_flat[i] = math.log1p(math.exp(-abs(v))) + max(v, 0.0)  # softplus, stable

    a = -np.exp(dp.a_log.data)

    y = np.zeros((n, e_dim))
    for e in range(e_dim):
        h = np.zeros(m_dim)
        for t in range(n):
            acc = 0.0
            for m in range(m_dim):
                abar = math.exp(dt[t, e] * a[e, m])
                if mode == "exact_zoh":
                    bbar = (abar - 1.0) / a[e, m] * b[t, m]
                else:
                    bbar = dt[t, e] * b[t, m]
                h[m] = abar * h[m] + bbar * act[t, e]
                acc += c[t, m] * h[m]
            y[t, e] = acc + dp.d.data[e] * act[t, e]

    return y[::-1].copy() if backwards else y


def block_forward_reference(
    p_in: np.ndarray, params: BlockParams, mode: str = "simplified", eps: float = 1e-5
) -> np.ndarray:
    """The block recomputed token by token, start to finish."""
    p_in = np.asarray(p_in, dtype=np.float64)
    if p_in.ndim == 3:
        p_in = p_in[0]
    n, c_dim = p_in.shape

    normed = np.empty_like(p_in)
    for t in range(n):
        row = p_in[t]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        normed[t] = params.norm_scale.data * ((row - mu) / math.sqrt(var + eps)) + params.norm_bias.data

    x = normed @ params.w_x.data
    z = normed @ params.w_z.data
    gate = _silu_rows(z)

    y_f = _direction_pass(x, params.fwd, mode, backwards=False)
    y_b = _direction_pass(x, params.bwd, mode, backwards=True)

    fused = y_f * gate + y_b * gate
    return fused @ params.w_p.data + p_in
