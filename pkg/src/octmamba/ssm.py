"""Selective state-space core: discretization, recurrence, LTI kernel form.

The continuous system  h' = A h + B x,  y = C h + D x  is discretized per
step size dt > 0 (A diagonal per state, stored negative) and evaluated as

    h_k = Abar_k * h_{k-1} + Bbar_k * x_k        (state: E channels x M states)
    y_k = <C_k, h_k> + D * x_k

``recurrent_scan`` is the production path (vectorized step loop for short
sequences, chunked two-pass scan for long ones, streamed in segments when no
gradient is being recorded). ``recurrent_scan_reference`` is the committed
oracle: a plain scalar loop that any optimized variant must match to 1e-12.
For time-invariant parameters the whole scan collapses to a causal
convolution with the kernel (C Bbar, C Abar Bbar, C Abar^2 Bbar, ...), which
``lti_kernel`` + ``conv_apply`` provide as an independent second route.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, _coerce, active_tape, add_flops, exp, make_op, mul, sub, div

DISCRETIZATION_MODES = ("simplified", "exact_zoh")

# chunked scan kicks in above this length, but only when the per-step state
# is small (vectorizing across chunks trades per-step dispatch for full-array
# traffic, which loses once each step already carries enough work); no-grad
# evaluation streams segments
_CHUNK_THRESHOLD = 192
_CHUNK_MAX_TAIL = 256
_SEGMENT_LEN = 4096


def discretize(a, b, dt, mode: str = "simplified") -> tuple[Tensor, Tensor]:
    """Turn continuous (A, B) plus step sizes into per-step (Abar, Bbar).

    a: (E, M) strictly negative, b: (N, M), dt: (N, E) strictly positive.
    Both modes share Abar = exp(dt * A); Bbar is dt * B in ``simplified``
    mode (the selective-scan convention) or the exact zero-order hold
    (exp(dt * A) - 1) / A * B in ``exact_zoh`` mode.
    """
    a, b, dt = _coerce(a), _coerce(b), _coerce(dt)
    if mode not in DISCRETIZATION_MODES:
        raise ValueError(f"discretize: unknown mode {mode!r}")
    if a.ndim != 2 or b.ndim != 2 or dt.ndim != 2:
        raise ShapeError(
            f"discretize: expected a (E,M), b (N,M), dt (N,E); got {a.shape}, {b.shape}, {dt.shape}"
        )
    if np.any(a.data >= 0):
        raise ValueError("discretize: A must be strictly negative")
    if np.any(dt.data <= 0):
        raise ValueError("discretize: dt must be strictly positive")
    n, e = dt.shape
    m = a.shape[1]
    if a.shape[0] != e or b.shape != (n, m):
        raise ShapeError(
            f"discretize: inconsistent shapes a={a.shape}, b={b.shape}, dt={dt.shape}"
        )

    da = mul(dt.reshape((n, e, 1)), a.reshape((1, e, m)))
    abar = exp(da)
    if mode == "simplified":
        bbar = mul(dt.reshape((n, e, 1)), b.reshape((n, 1, m)))
    else:
        scale = div(sub(abar, 1.0), a.reshape((1, e, m)))
        bbar = mul(scale, b.reshape((n, 1, m)))
    return abar, bbar


def _linear_scan(mult: np.ndarray, addend: np.ndarray, init: np.ndarray | None = None) -> np.ndarray:
    """h[k] = mult[k] * h[k-1] + addend[k] along axis 0, h[-1] = init (or 0).

    Short sequences run a vectorized step loop. Long ones use a two-pass
    chunked scan: per-chunk local scans and decay cumprods (vectorized over
    chunks), a short sequential pass over chunk carries, then a fused
    correction. Chunk width ~sqrt(N) balances the two Python loops.
    """
    n = mult.shape[0]
    tail = mult.shape[1:]
    if init is None:
        init = np.zeros(tail)
    if n <= _CHUNK_THRESHOLD or int(np.prod(tail)) > _CHUNK_MAX_TAIL:
        h = init
        out = np.empty_like(mult)
        for k in range(n):
            h = mult[k] * h + addend[k]
            out[k] = h
        return out

    t = 1 << max(4, min(8, int(np.log2(max(n, 1)) / 2) + 1))
    g = -(-n // t)
    pad = g * t - n
    if pad:
        zeros = np.zeros((pad,) + tail)
        mult = np.concatenate([mult, zeros], axis=0)
        addend = np.concatenate([addend, zeros], axis=0)
    mc = mult.reshape((g, t) + tail)
    ac = addend.reshape((g, t) + tail)

    local = np.empty_like(mc)
    decay = np.empty_like(mc)
    h = np.zeros((g,) + tail)
    p = np.ones((g,) + tail)
    for k in range(t):
        h = mc[:, k] * h + ac[:, k]
        local[:, k] = h
        p = p * mc[:, k]
        decay[:, k] = p

    carries = np.empty((g,) + tail)
    carry = init
    for i in range(g):
        carries[i] = carry
        carry = decay[i, t - 1] * carry + local[i, t - 1]

    expand = (g, 1) + tail
    out = local + decay * carries.reshape(expand)
    return out.reshape((g * t,) + tail)[:n]


def _scan_states(abar: np.ndarray, bx: np.ndarray) -> np.ndarray:
    return _linear_scan(abar, bx)


def recurrent_scan(abar, bbar, c, d, x) -> Tensor:
    """Run the selective recurrence and output projection.

    abar, bbar: (N, E, M); c: (N, M); d: (E,); x: (N, E). Returns y (N, E).
    Records a single tape entry whose backward pass is the adjoint scan run
    in reverse time (itself evaluated with the chunked machinery).
    """
    abar, bbar, c, d, x = _coerce(abar), _coerce(bbar), _coerce(c), _coerce(d), _coerce(x)
    if abar.ndim != 3 or bbar.shape != abar.shape:
        raise ShapeError(f"recurrent_scan: Abar/Bbar shapes {abar.shape}/{bbar.shape} must match (N,E,M)")
    n, e, m = abar.shape
    if c.shape != (n, m) or d.shape != (e,) or x.shape != (n, e):
        raise ShapeError(
            f"recurrent_scan: got C {c.shape}, D {d.shape}, x {x.shape} for Abar {abar.shape}"
        )
    add_flops(5 * n * e * m + 2 * n * e)

    recording = active_tape() is not None and any(
        t.requires_grad for t in (abar, bbar, c, d, x)
    )
    if not recording and n > _SEGMENT_LEN:
        # stream segments so peak workspace stays bounded at inference
        y = np.empty((n, e))
        hprev = np.zeros((e, m))
        for lo in range(0, n, _SEGMENT_LEN):
            hi = min(lo + _SEGMENT_LEN, n)
            bx = bbar.data[lo:hi] * x.data[lo:hi, :, None]
            hseg = _linear_scan(abar.data[lo:hi], bx, init=hprev)
            y[lo:hi] = np.einsum("nem,nm->ne", hseg, c.data[lo:hi])
            hprev = hseg[-1]
        y += d.data * x.data
        return make_op(y, (abar, bbar, c, d, x), lambda g: (None,) * 5, "recurrent_scan")

    bx = bbar.data * x.data[:, :, None]
    h = _scan_states(abar.data, bx)
    y = np.einsum("nem,nm->ne", h, c.data) + d.data * x.data

    ad, bd, cd, dd, xd = abar.data, bbar.data, c.data, d.data, x.data

    def backward(g):
        # lambda_k = g_k C_k + Abar_{k+1} lambda_{k+1}: a reverse-time scan
        ghat = g[:, :, None] * cd[:, None, :]
        mult_rev = np.concatenate([np.zeros((1, e, m)), ad[:0:-1]], axis=0)
        lam = _linear_scan(mult_rev, ghat[::-1])[::-1]
        h_prev = np.concatenate([np.zeros((1, e, m)), h[:-1]], axis=0)
        g_abar = lam * h_prev
        g_bbar = lam * xd[:, :, None]
        g_c = np.einsum("ne,nem->nm", g, h)
        g_d = np.einsum("ne,ne->e", g, xd)
        g_x = np.einsum("nem,nem->ne", lam, bd) + g * dd
        return g_abar, g_bbar, g_c, g_d, g_x

    return make_op(y, (abar, bbar, c, d, x), backward, "recurrent_scan")


def selective_scan(dt, b, c, a, d, x) -> Tensor:
    """Fused discretize + recurrence + projection for the simplified mode.

    Computes exactly recurrent_scan(exp(dt*A), dt*B, C, D, x) with
    dt: (N, E), b/c: (N, M), a: (E, M) negative, d: (E,), x: (N, E), but in a
    single tape entry with a hand-written adjoint, so only two (N, E, M)
    arrays are kept for the backward sweep instead of a taped chain of
    elementwise intermediates. This is the production path inside the block;
    the scalar-loop reference plus discretize is the oracle it must match.
    """
    dt, b, c, a, d, x = _coerce(dt), _coerce(b), _coerce(c), _coerce(a), _coerce(d), _coerce(x)
    if dt.ndim != 2 or a.ndim != 2:
        raise ShapeError(f"selective_scan: expected dt (N,E) and a (E,M); got {dt.shape}, {a.shape}")
    n, e = dt.shape
    m = a.shape[1]
    if a.shape[0] != e or b.shape != (n, m) or c.shape != (n, m) or d.shape != (e,) or x.shape != (n, e):
        raise ShapeError(
            "selective_scan: inconsistent shapes "
            f"dt={dt.shape}, b={b.shape}, c={c.shape}, a={a.shape}, d={d.shape}, x={x.shape}"
        )
    if np.any(a.data >= 0):
        raise ValueError("selective_scan: A must be strictly negative")
    if np.any(dt.data <= 0):
        raise ValueError("selective_scan: dt must be strictly positive")
    add_flops(9 * n * e * m + 3 * n * e)

    recording = active_tape() is not None and any(
        t.requires_grad for t in (dt, b, c, a, d, x)
    )
    if not recording and n > _SEGMENT_LEN:
        y = np.empty((n, e))
        hprev = np.zeros((e, m))
        for lo in range(0, n, _SEGMENT_LEN):
            hi = min(lo + _SEGMENT_LEN, n)
            abar = np.exp(dt.data[lo:hi, :, None] * a.data[None])
            bx = (dt.data[lo:hi] * x.data[lo:hi])[:, :, None] * b.data[lo:hi, None, :]
            hseg = _linear_scan(abar, bx, init=hprev)
            y[lo:hi] = np.einsum("nem,nm->ne", hseg, c.data[lo:hi])
            hprev = hseg[-1]
        y += d.data * x.data
        return make_op(y, (dt, b, c, a, d, x), lambda g: (None,) * 6, "selective_scan")

    abar = np.exp(dt.data[:, :, None] * a.data[None])
    u = dt.data * x.data
    bx = u[:, :, None] * b.data[:, None, :]
    h = _linear_scan(abar, bx)
    y = np.einsum("nem,nm->ne", h, c.data) + d.data * x.data

    dtd, bd, cd, ad, dd, xd = dt.data, b.data, c.data, a.data, d.data, x.data

    def backward(g):
        ghat = g[:, :, None] * cd[:, None, :]
        mult_rev = np.concatenate([np.zeros((1, e, m)), abar[:0:-1]], axis=0)
        lam = _linear_scan(mult_rev, ghat[::-1])[::-1]
        g_da = lam * abar  # chain through exp(dt * A)
        g_da[1:] *= h[:-1]  # times h_{k-1}; h_{-1} = 0 zeroes the first step
        g_da[0] = 0.0
        g_dt = np.einsum("nem,em->ne", g_da, ad)
        g_a = np.einsum("nem,ne->em", g_da, dtd)
        g_u = np.einsum("nem,nm->ne", lam, bd)
        g_b = np.einsum("nem,ne->nm", lam, u)
        g_c = np.einsum("ne,nem->nm", g, h)
        g_d = np.einsum("ne,ne->e", g, xd)
        g_dt = g_dt + g_u * xd
        g_x = g_u * dtd + g * dd
        return g_dt, g_b, g_c, g_a, g_d, g_x

    return make_op(y, (dt, b, c, a, d, x), backward, "selective_scan")


def recurrent_scan_reference(
    abar: np.ndarray,
    bbar: np.ndarray,
    c: np.ndarray,
    d: np.ndarray,
    x: np.ndarray,
    h0: np.ndarray | None = None,
) -> np.ndarray:
    """Committed oracle: the recurrence as a plain scalar loop.

    Deliberately naive; optimized scans are validated against this to 1e-12.
    """
    n, e_dim, m_dim = abar.shape
    h = np.zeros((e_dim, m_dim)) if h0 is None else h0.astype(np.float64).copy()
    y = np.zeros((n, e_dim))
    for k in range(n):
        for e in range(e_dim):
            acc = 0.0
            for m in range(m_dim):
                h[e, m] = abar[k, e, m] * h[e, m] + bbar[k, e, m] * x[k, e]
                acc += c[k, m] * h[e, m]
            y[k, e] = acc + d[e] * x[k, e]
    return y


def lti_kernel(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray, length: int) -> np.ndarray:
    """Kernel taps (C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar) for an LTI system.

    abar, bbar: (E, M) single (time-invariant) parameter sets; c: (M,).
    Defined only for LTI parameters; per-step (selective) inputs are refused.
    """
    abar = np.asarray(abar, dtype=np.float64)
    bbar = np.asarray(bbar, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if abar.ndim != 2 or bbar.shape != abar.shape:
        raise ValueError(
            "lti_kernel: expected time-invariant (E,M) parameters; "
            f"got Abar {abar.shape}, Bbar {bbar.shape} (per-step parameters are not LTI)"
        )
    if c.shape != (abar.shape[1],):
        raise ValueError(f"lti_kernel: C shape {c.shape} does not match state size ({abar.shape[1]},)")
    e_dim = abar.shape[0]
    kernel = np.empty((e_dim, length))
    term = bbar.copy()
    for j in range(length):
        kernel[:, j] = term @ c
        term = term * abar
    return kernel


def conv_apply(kernel: np.ndarray, x: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
    """Causal convolution y_k = sum_{j<=k} K_j x_{k-j} (+ D x_k).

    kernel: (E, L); x: (N, E). A kernel longer than the sequence is
    truncated. Output length equals input length.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = np.zeros_like(x)
    for j in range(min(kernel.shape[1], n)):
        y[j:] += kernel[:, j] * x[: n - j]
    if d is not None:
        y += np.asarray(d, dtype=np.float64) * x
    return y
