"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything downstream (octree features, the selective scan, the blocks, the
network) runs on these primitives. The design is define-by-run: a ``Tape``
is opened around one forward pass, primitives append their backward rules
while any input requires a gradient, and ``Tape.backward`` replays the list
in reverse. No tape means pure inference with zero recording overhead.

All arithmetic is float64. Every primitive checks its output for NaN/Inf and
raises ``NonFiniteError`` instead of letting bad values propagate silently.

A module-level FLOP counter is maintained by every primitive. Counts are
algorithmic (one count per scalar multiply/add/transcendental of the math
being computed), independent of how the implementation vectorizes, so they
can be used for exact linearity checks.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


# ---------------------------------------------------------------------------
# FLOP accounting


_flops = 0


def reset_flops() -> None:
    global _flops
    _flops = 0


def flop_count() -> int:
    return _flops


def add_flops(n: int) -> None:
    global _flops
    _flops += int(n)


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    ``grad`` is populated (accumulated additively) by ``Tape.backward`` for
    leaf tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the free functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, shape):
        return reshape(self, shape)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of one forward pass (a Wengert list).

    Use as a context manager around a forward computation; primitives record
    themselves while the tape is the innermost active one and any input
    requires a gradient. ``backward`` may be called exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._entries.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
        if self._spent:
            raise TapeError("backward already ran on this tape; rebuild the forward pass")
        if not self._entries:
            raise TapeError("backward on an empty tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True

        produced = {id(out) for out, _, _ in self._entries}
        if id(loss) not in produced:
            raise TapeError("loss was not produced by an operation on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {}
        for out, inputs, backward in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                acc = grads.get(key)
                grads[key] = gi if acc is None else acc + gi
                holders[key] = t

        for key, g in grads.items():
            t = holders.get(key)
            if t is None or key in produced:
                continue
            t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite values in output")


def make_op(out_data: np.ndarray, inputs, backward, op: str) -> Tensor:
    """Wrap a primitive result, recording the backward rule when taping.

    ``backward(grad_out) -> tuple`` must return one gradient (or None) per
    input, each already summed down to the input's shape.
    """
    _check_finite(op, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, tuple(inputs), backward)
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data
    add_flops(out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data
    add_flops(out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    add_flops(out.size)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):  # finiteness checked below
        out = a.data / b.data
    add_flops(out.size)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return make_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _coerce(a)
    out = -a.data
    add_flops(out.size)

    def backward(g):
        return (-g,)

    return make_op(out, (a,), backward, "neg")


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):  # finiteness checked below
        out = np.exp(a.data)
    add_flops(out.size)

    def backward(g):
        return (g * out,)

    return make_op(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):  # finiteness checked below
        out = np.log(a.data)
    add_flops(out.size)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return make_op(out, (a,), backward, "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _coerce(a)
    s = _sigmoid(a.data)
    out = a.data * s
    add_flops(5 * out.size)
    ad = a.data

    def backward(g):
        return (g * (s + ad * s * (1.0 - s)),)

    return make_op(out, (a,), backward, "silu")


def softplus(a) -> Tensor:
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)  # ln(1 + e^x), stable
    add_flops(4 * out.size)
    ad = a.data

    def backward(g):
        return (g * _sigmoid(ad),)

    return make_op(out, (a,), backward, "softplus")


# ---------------------------------------------------------------------------
# Linear algebra and sequence primitives


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    add_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return make_op(out, (a, b), backward, "matmul")


def layer_norm(x, scale, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and bias."""
    x, scale, bias = _coerce(x), _coerce(scale), _coerce(bias)
    c = x.shape[-1]
    if scale.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: scale/bias shapes {scale.shape}/{bias.shape} do not match feature width ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = scale.data * xhat + bias.data
    add_flops(9 * out.size)
    sd = scale.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        g_scale = (g * xhat).sum(axis=red)
        g_bias = g.sum(axis=red)
        gx_hat = g * sd
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        g_x = inv * (gx_hat - m1 - xhat * m2)
        return g_x, g_scale, g_bias

    return make_op(out, (x, scale, bias), backward, "layer_norm")


def causal_conv1d(x, weight, bias) -> Tensor:
    """Depthwise causal convolution along axis 0.

    ``weight[e, j]`` multiplies the token ``j`` steps in the past, so
    output length equals input length and no future token leaks in
    (equivalent to left zero-padding with ``k - 1`` zeros).
    """
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"causal_conv1d: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"causal_conv1d: bias shape {bias.shape} does not match channels ({x.shape[1]},)")
    n, e = x.shape
    k = weight.shape[1]
    xd, wd = x.data, weight.data
    out = bias.data + wd[:, 0] * xd
    for j in range(1, k):
        out[j:] += wd[:, j] * xd[: n - j]
    add_flops(2 * n * e * k + n * e)

    def backward(g):
        gx = wd[:, 0] * g
        for j in range(1, k):
            gx[: n - j] += wd[:, j] * g[j:]
        gw = np.empty_like(wd)
        gw[:, 0] = (g * xd).sum(axis=0)
        for j in range(1, k):
            gw[:, j] = (g[j:] * xd[: n - j]).sum(axis=0)
        gb = g.sum(axis=0)
        return gx, gw, gb

    return make_op(out, (x, weight, bias), backward, "causal_conv1d")


def reverse(a, axis: int = 0) -> Tensor:
    a = _coerce(a)
    out = np.flip(a.data, axis=axis).copy()

    def backward(g):
        return (np.flip(g, axis=axis).copy(),)

    return make_op(out, (a,), backward, "reverse")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(ts)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return make_op(out, ts, backward, "concat")


def getitem(a, index) -> Tensor:
    a = _coerce(a)
    out = a.data[index]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)
    else:
        out = out.copy()
    shape = a.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return make_op(out, (a,), backward, "getitem")


def reshape(a, new_shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(new_shape).copy()
    shape = a.shape

    def backward(g):
        return (g.reshape(shape),)

    return make_op(out, (a,), backward, "reshape")


def index_select(a, index) -> Tensor:
    """Gather rows: out[i] = a[index[i]]. Gradient scatters additively."""
    a = _coerce(a)
    idx = np.asarray(index)
    out = a.data[idx].copy()
    shape = a.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_op(out, (a,), backward, "index_select")


# ---------------------------------------------------------------------------
# Reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    add_flops(a.size)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    add_flops(a.size)
    shape = a.shape
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([shape[ax] for ax in axis]))
    else:
        count = shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_op(np.asarray(out), (a,), backward, "mean")


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    add_flops(a.size)
    ad = a.data

    def backward(g):
        gx = np.zeros_like(ad)
        if axis is None:
            gx.flat[np.argmax(ad)] = g.reshape(())
        else:
            am = np.expand_dims(np.argmax(ad, axis=axis), axis)
            gexp = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, am, gexp, axis=axis)
        return (gx,)

    return make_op(np.asarray(out), (a,), backward, "max")


def segment_max(a, starts) -> Tensor:
    """Row-wise max over contiguous row groups.

    ``starts`` holds the first row of each group (ascending, first is 0);
    group ``i`` spans rows ``starts[i]:starts[i+1]`` and the last group runs
    to the end. The gradient routes to the first argmax row in each group.
    """
    a = _coerce(a)
    st = np.asarray(starts, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"segment_max: expected 2-D input, got shape {a.shape}")
    if st.size == 0 or st[0] != 0 or np.any(np.diff(st) <= 0) or st[-1] >= a.shape[0]:
        raise ShapeError("segment_max: starts must begin at 0, increase strictly, and stay in range")
    out = np.maximum.reduceat(a.data, st, axis=0)
    add_flops(a.size)
    ad = a.data
    bounds = np.append(st, a.shape[0])
    cols = np.arange(a.shape[1])

    def backward(g):
        gx = np.zeros_like(ad)
        for i in range(len(st)):
            lo, hi = bounds[i], bounds[i + 1]
            am = np.argmax(ad[lo:hi], axis=0)
            gx[lo + am, cols] += g[i]
        return (gx,)

    return make_op(out, (a,), backward, "segment_max")


# ---------------------------------------------------------------------------
# Verification oracle


def finite_diff_check(f, params, h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor and closing
    over ``params`` (leaf tensors with requires_grad). Returns the max over
    all parameter entries of ``|analytic - central| / max(1, |analytic|)``.
    Raises if ``f`` is found non-deterministic by re-evaluating the baseline.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    base = loss.item()
    if f().item() != base:
        raise AutodiffError("finite_diff_check: f is not deterministic across evaluations")

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if rel > worst:
                worst = rel
    return worst
