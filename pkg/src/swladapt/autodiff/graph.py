"""Expression graph primitives for the reverse-mode engine.

A :class:`Node` is an immutable record of one primitive application. Graphs
are plain DAGs of nodes; evaluation and differentiation live in
:mod:`swladapt.autodiff.engine`. Every primitive registers a forward rule and
a VJP *builder* that expresses its backward pass as new graph nodes, which is
what makes gradients re-differentiable (gradients of gradients reuse the same
registry).

Probability-adjacent primitives carry the numerical guards used throughout
the package: ``log`` clamps its input to ``[PROB_EPS, 1 - PROB_EPS]`` (it is
only ever applied to probabilities here) and ``softmax`` is built
shift-invariantly around a detached row maximum.
"""

import itertools
import math

import numpy as np

from . import kernels

PROB_EPS = 1e-7

_ids = itertools.count()


class GraphError(ValueError):
    """Malformed graph construction (shape mismatch, bad primitive args)."""


class SecondOrderUnsupportedError(RuntimeError):
    """Differentiation requested through a first-order-only path."""


class Node:
    """One primitive application. ``attrs`` holds op-specific parameters."""

    __slots__ = ("op", "parents", "shape", "attrs", "uid")

    def __init__(self, op, parents, shape, **attrs):
        self.op = op
        self.parents = tuple(parents)
        self.shape = tuple(int(d) for d in shape)
        self.attrs = attrs
        self.uid = next(_ids)

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}, uid={self.uid})"

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


# registry: op name -> (forward rule, vjp builder | ZERO_VJP | RAISES_VJP)
FORWARD = {}
VJP = {}

ZERO_VJP = "zero"
RAISES_VJP = "raises"


def _register(op, forward, vjp):
    FORWARD[op] = forward
    VJP[op] = vjp


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise GraphError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# leaves

def placeholder(name, shape):
    """Free input bound at evaluation time (parameters and data)."""
    return Node("input", (), shape, name=name)


def constant(value):
    arr = np.asarray(value, dtype=np.float64)
    return Node("const", (), arr.shape, value=arr)


def zeros_like_node(node):
    return constant(np.zeros(node.shape))


_register("input", lambda node, vals, ctx: ctx.lookup(node), None)
_register("const", lambda node, vals, ctx: ctx.cast(node.attrs["value"]), None)


# ---------------------------------------------------------------------------
# structure

def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise GraphError(f"reshape: cannot reshape {x.shape} to {shape}")
    if shape == x.shape:
        return x
    return Node("reshape", (x,), shape)


_register(
    "reshape",
    lambda node, vals, ctx: vals[0].reshape(node.shape),
    lambda node, cot: [(0, reshape(cot, node.parents[0].shape))],
)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(len(x.shape))))
    axes = tuple(axes)
    shape = tuple(x.shape[a] for a in axes)
    return Node("transpose", (x,), shape, axes=axes)


def _transpose_vjp(node, cot):
    axes = node.attrs["axes"]
    inverse = tuple(np.argsort(axes))
    return [(0, transpose(cot, inverse))]


_register("transpose", lambda node, vals, ctx: np.transpose(vals[0], node.attrs["axes"]), _transpose_vjp)


def broadcast_to(x, shape):
    shape = tuple(int(d) for d in shape)
    if shape == x.shape:
        return x
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError as exc:
        raise GraphError(f"broadcast_to: {x.shape} -> {shape}") from exc
    return Node("broadcast", (x,), shape)


def _sum_to(cot, target_shape):
    """Reduce a cotangent back to the pre-broadcast shape."""
    extra = len(cot.shape) - len(target_shape)
    if extra:
        cot = reduce_sum(cot, axes=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(target_shape) if d == 1 and cot.shape[i] != 1)
    if axes:
        cot = reduce_sum(cot, axes=axes, keepdims=True)
    return reshape(cot, target_shape)


_register(
    "broadcast",
    lambda node, vals, ctx: np.broadcast_to(vals[0], node.shape),
    lambda node, cot: [(0, _sum_to(cot, node.parents[0].shape))],
)


def reduce_sum(x, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(len(x.shape)))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % len(x.shape) for a in axes)
    if keepdims:
        shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    else:
        shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return Node("sum", (x,), shape, axes=axes, keepdims=keepdims)


def _sum_vjp(node, cot):
    parent = node.parents[0]
    axes = node.attrs["axes"]
    if not node.attrs["keepdims"]:
        kshape = tuple(1 if i in axes else d for i, d in enumerate(parent.shape))
        cot = reshape(cot, kshape)
    return [(0, broadcast_to(cot, parent.shape))]


_register(
    "sum",
    lambda node, vals, ctx: np.sum(vals[0], axis=node.attrs["axes"], keepdims=node.attrs["keepdims"]),
    _sum_vjp,
)


def reduce_mean(x, axes=None, keepdims=False):
    if axes is None:
        count = x.size
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        count = int(np.prod([x.shape[a % len(x.shape)] for a in ax]))
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def concat(xs, axis=-1):
    xs = list(xs)
    axis = axis % len(xs[0].shape)
    base = list(xs[0].shape)
    total = 0
    for x in xs:
        other = list(x.shape)
        other[axis] = base[axis] = 0
        if other != base:
            raise GraphError(f"concat: incompatible shapes {[x.shape for x in xs]}")
        total += x.shape[axis]
    shape = list(xs[0].shape)
    shape[axis] = total
    return Node("concat", xs, shape, axis=axis)


def _concat_vjp(node, cot):
    axis = node.attrs["axis"]
    out, offset = [], 0
    for i, parent in enumerate(node.parents):
        width = parent.shape[axis]
        out.append((i, slice_axis(cot, axis, offset, offset + width)))
        offset += width
    return out


_register(
    "concat",
    lambda node, vals, ctx: np.concatenate(vals, axis=node.attrs["axis"]),
    _concat_vjp,
)


def slice_axis(x, axis, start, stop):
    axis = axis % len(x.shape)
    if not (0 <= start < stop <= x.shape[axis]):
        raise GraphError(f"slice_axis: [{start}:{stop}] out of range for {x.shape} axis {axis}")
    shape = list(x.shape)
    shape[axis] = stop - start
    return Node("slice", (x,), shape, axis=axis, start=start, stop=stop)


def _slice_forward(node, vals, ctx):
    index = [slice(None)] * len(node.parents[0].shape)
    index[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    return vals[0][tuple(index)]


_register(
    "slice",
    _slice_forward,
    lambda node, cot: [(0, embed_slice(cot, node.attrs["axis"], node.attrs["start"], node.parents[0].shape))],
)


def embed_slice(x, axis, start, full_shape):
    """Adjoint of :func:`slice_axis`: place ``x`` into zeros of ``full_shape``."""
    full_shape = tuple(full_shape)
    return Node("embed", (x,), full_shape, axis=axis % len(full_shape), start=start)


def _embed_forward(node, vals, ctx):
    out = np.zeros(node.shape, dtype=vals[0].dtype)
    index = [slice(None)] * len(node.shape)
    axis = node.attrs["axis"]
    index[axis] = slice(node.attrs["start"], node.attrs["start"] + node.parents[0].shape[axis])
    out[tuple(index)] = vals[0]
    return out


def _embed_vjp(node, cot):
    axis = node.attrs["axis"]
    start = node.attrs["start"]
    return [(0, slice_axis(cot, axis, start, start + node.parents[0].shape[axis]))]


_register("embed", _embed_forward, _embed_vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(x, y):
    _check_same_shape("add", x, y)
    return Node("add", (x, y), x.shape)


def sub(x, y):
    _check_same_shape("sub", x, y)
    return Node("sub", (x, y), x.shape)


def mul(x, y):
    _check_same_shape("mul", x, y)
    return Node("mul", (x, y), x.shape)


def div(x, y):
    _check_same_shape("div", x, y)
    return Node("div", (x, y), x.shape)


def scale(x, c):
    return Node("scalex", (x,), x.shape, c=float(c))


def add_scalar(x, c):
    return Node("addx", (x,), x.shape, c=float(c))


def neg(x):
    return scale(x, -1.0)


def _div_vjp(node, cot):
    x, y = node.parents
    return [(0, div(cot, y)), (1, neg(div(mul(cot, node), y)))]


_register("add", lambda node, vals, ctx: vals[0] + vals[1], lambda node, cot: [(0, cot), (1, cot)])
_register("sub", lambda node, vals, ctx: vals[0] - vals[1], lambda node, cot: [(0, cot), (1, neg(cot))])
_register(
    "mul",
    lambda node, vals, ctx: vals[0] * vals[1],
    lambda node, cot: [(0, mul(cot, node.parents[1])), (1, mul(cot, node.parents[0]))],
)
_register("div", lambda node, vals, ctx: vals[0] / vals[1], _div_vjp)
_register(
    "scalex",
    lambda node, vals, ctx: vals[0] * ctx.scalar(node.attrs["c"]),
    lambda node, cot: [(0, scale(cot, node.attrs["c"]))],
)
_register(
    "addx",
    lambda node, vals, ctx: vals[0] + ctx.scalar(node.attrs["c"]),
    lambda node, cot: [(0, cot)],
)


# ---------------------------------------------------------------------------
# nonlinearities and guards

def exp(x):
    return Node("exp", (x,), x.shape)


_register("exp", lambda node, vals, ctx: np.exp(vals[0]), lambda node, cot: [(0, mul(cot, node))])


def log(x):
    """Natural log with the probability clamp baked in."""
    return Node("log", (x,), x.shape)


def _log_vjp(node, cot):
    x = node.parents[0]
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    return [(0, div(mul(cot, clip_mask(x, lo, hi)), clip(x, lo, hi)))]


_register(
    "log",
    lambda node, vals, ctx: np.log(np.clip(vals[0], ctx.scalar(PROB_EPS), ctx.scalar(1.0 - PROB_EPS))),
    _log_vjp,
)


def clip(x, lo, hi):
    return Node("clip", (x,), x.shape, lo=float(lo), hi=float(hi))


def clip_mask(x, lo, hi):
    """1 strictly inside (lo, hi), else 0; piecewise constant, zero gradient."""
    return Node("clipmask", (x,), x.shape, lo=float(lo), hi=float(hi))


_register(
    "clip",
    lambda node, vals, ctx: np.clip(vals[0], ctx.scalar(node.attrs["lo"]), ctx.scalar(node.attrs["hi"])),
    lambda node, cot: [(0, mul(cot, clip_mask(node.parents[0], node.attrs["lo"], node.attrs["hi"])))],
)
_register(
    "clipmask",
    lambda node, vals, ctx: ((vals[0] > node.attrs["lo"]) & (vals[0] < node.attrs["hi"])).astype(vals[0].dtype),
    ZERO_VJP,
)


def relu(x):
    return Node("relu", (x,), x.shape)


def relu_mask(x):
    """Subgradient mask for relu; 0 at the kink by convention."""
    return Node("relumask", (x,), x.shape)


_register(
    "relu",
    lambda node, vals, ctx: np.maximum(vals[0], 0),
    lambda node, cot: [(0, mul(cot, relu_mask(node.parents[0])))],
)
_register("relumask", lambda node, vals, ctx: (vals[0] > 0).astype(vals[0].dtype), ZERO_VJP)


def sigmoid(x):
    return Node("sigmoid", (x,), x.shape)


def _sigmoid_forward(node, vals, ctx):
    v = vals[0]
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _sigmoid_vjp(node, cot):
    one_minus = add_scalar(neg(node), 1.0)
    return [(0, mul(cot, mul(node, one_minus)))]


_register("sigmoid", _sigmoid_forward, _sigmoid_vjp)


def rowmax(x):
    """Row maximum over the last axis, treated as a constant shift.

    Used to build shift-invariant softmax; the shift cancels exactly, so a
    zero VJP is the true derivative of the composite.
    """
    shape = x.shape[:-1] + (1,)
    return Node("rowmax", (x,), shape)


_register("rowmax", lambda node, vals, ctx: np.max(vals[0], axis=-1, keepdims=True), ZERO_VJP)


def detach(x):
    """Stop-gradient: identity forward, zero backward."""
    return Node("detach", (x,), x.shape)


_register("detach", lambda node, vals, ctx: vals[0], ZERO_VJP)


def gradient_reversal(x, coefficient=1.0):
    """Identity forward; backward multiplies the cotangent by -coefficient."""
    return Node("grl", (x,), x.shape, coefficient=float(coefficient))


_register(
    "grl",
    lambda node, vals, ctx: vals[0],
    lambda node, cot: [(0, scale(cot, -node.attrs["coefficient"]))],
)


# ---------------------------------------------------------------------------
# linear algebra and convolution kernels

def matmul(x, y):
    if len(x.shape) != 2 or len(y.shape) != 2 or x.shape[1] != y.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")
    return Node("matmul", (x, y), (x.shape[0], y.shape[1]))


def _matmul_vjp(node, cot):
    x, y = node.parents
    return [(0, matmul(cot, transpose(y))), (1, matmul(transpose(x), cot))]


_register("matmul", lambda node, vals, ctx: vals[0] @ vals[1], _matmul_vjp)


def _conv_geometry(length, kernel, stride):
    pad_total = kernel - 1
    pad_left = pad_total // 2
    pad_right = pad_total - pad_left
    out_len = (length + pad_total - kernel) // stride + 1
    return pad_left, pad_right, out_len


def im2col(x, kernel, stride):
    """Patch extraction for stride-aware same-padded 1-D convolution."""
    if len(x.shape) != 3:
        raise GraphError(f"im2col: expected rank-3 input, got {x.shape}")
    n, channels, length = x.shape
    if kernel > length + kernel - 1 or kernel < 1 or stride < 1:
        raise GraphError(f"im2col: bad kernel/stride {kernel}/{stride}")
    pad_left, pad_right, out_len = _conv_geometry(length, kernel, stride)
    return Node(
        "im2col", (x,), (n, out_len, channels * kernel),
        kernel=kernel, stride=stride, pad_left=pad_left, pad_right=pad_right, length=length,
    )


def _im2col_vjp(node, cot):
    a = node.attrs
    return [(0, col2im(cot, a["kernel"], a["stride"], a["pad_left"], a["pad_right"], a["length"], node.parents[0].shape[1]))]


_register(
    "im2col",
    lambda node, vals, ctx: kernels.im2col(
        vals[0], node.attrs["kernel"], node.attrs["stride"], node.attrs["pad_left"], node.attrs["pad_right"]
    ),
    _im2col_vjp,
)


def col2im(cols, kernel, stride, pad_left, pad_right, length, channels):
    if len(cols.shape) != 3 or cols.shape[2] != channels * kernel:
        raise GraphError(f"col2im: bad cols shape {cols.shape} for {channels} channels, kernel {kernel}")
    n = cols.shape[0]
    return Node(
        "col2im", (cols,), (n, channels, length),
        kernel=kernel, stride=stride, pad_left=pad_left, pad_right=pad_right, length=length,
    )


def _col2im_vjp(node, cot):
    a = node.attrs
    # cot has the signal shape; its patch extraction is the exact adjoint.
    out = Node(
        "im2col", (cot,), node.parents[0].shape,
        kernel=a["kernel"], stride=a["stride"], pad_left=a["pad_left"], pad_right=a["pad_right"], length=a["length"],
    )
    return [(0, out)]


_register(
    "col2im",
    lambda node, vals, ctx: kernels.col2im(
        vals[0], node.attrs["kernel"], node.attrs["stride"], node.attrs["pad_left"],
        node.attrs["pad_right"], node.attrs["length"]
    ),
    _col2im_vjp,
)


# ---------------------------------------------------------------------------
# batch normalization

def bn_normalize(x, axes, eps=1e-5):
    """(x - mean) / sqrt(var + eps) over ``axes`` with batch statistics.

    First-order gradients through the statistics are exact; the saved-statistic
    coefficients used by the backward pass refuse further differentiation, so
    second derivatives through training-mode batch norm raise
    :class:`SecondOrderUnsupportedError`.
    """
    axes = tuple(a % len(x.shape) for a in axes)
    return Node("bn_xhat", (x,), x.shape, axes=axes, eps=float(eps))


def _bn_stats(v, axes, eps):
    mean = v.mean(axis=axes, keepdims=True)
    centered = v - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered, inv_std


def _bn_xhat_forward(node, vals, ctx):
    centered, inv_std = _bn_stats(vals[0], node.attrs["axes"], ctx.scalar(node.attrs["eps"]))
    return centered * inv_std


def _bn_xhat_vjp(node, cot):
    x = node.parents[0]
    axes = node.attrs["axes"]
    eps = node.attrs["eps"]
    inv_std = broadcast_to(bn_saved_invstd(x, axes, eps), x.shape)
    m1 = broadcast_to(reduce_mean(cot, axes, keepdims=True), x.shape)
    m2 = broadcast_to(reduce_mean(mul(cot, node), axes, keepdims=True), x.shape)
    return [(0, mul(inv_std, sub(sub(cot, m1), mul(node, m2))))]


_register("bn_xhat", _bn_xhat_forward, _bn_xhat_vjp)


def bn_saved_invstd(x, axes, eps=1e-5):
    axes = tuple(a % len(x.shape) for a in axes)
    shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    return Node("bn_invstd", (x,), shape, axes=axes, eps=float(eps))


_register(
    "bn_invstd",
    lambda node, vals, ctx: _bn_stats(vals[0], node.attrs["axes"], ctx.scalar(node.attrs["eps"]))[1],
    RAISES_VJP,
)


def bn_batch_mean(x, axes):
    """Batch mean harvested for running statistics; not differentiable."""
    axes = tuple(a % len(x.shape) for a in axes)
    shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return Node("bn_mean", (x,), shape, axes=axes)


def bn_batch_var(x, axes):
    """Population batch variance harvested for running statistics."""
    axes = tuple(a % len(x.shape) for a in axes)
    shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return Node("bn_var", (x,), shape, axes=axes)


_register("bn_mean", lambda node, vals, ctx: vals[0].mean(axis=node.attrs["axes"]), RAISES_VJP)
_register("bn_var", lambda node, vals, ctx: vals[0].var(axis=node.attrs["axes"]), RAISES_VJP)


# ---------------------------------------------------------------------------
# composites used across the package

def affine(x, weight, bias):
    """Dense layer: x @ weight + bias with bias broadcast over rows."""
    out = matmul(x, weight)
    return add(out, broadcast_to(reshape(bias, (1, bias.shape[0])), out.shape))


def conv1d(x, weight, bias, stride=1):
    """1-D convolution with symmetric zero padding (stride-1 length preserved).

    x: (n, c_in, length); weight: (filters, c_in, kernel); bias: (filters,).
    Built from im2col + matmul so the whole operation stays re-differentiable.
    """
    n, c_in, length = x.shape
    filters, w_cin, kernel = weight.shape
    if w_cin != c_in:
        raise GraphError(f"conv1d: input has {c_in} channels, weight expects {w_cin}")
    if length < kernel:
        raise GraphError(f"conv1d: length {length} shorter than kernel {kernel}")
    cols = im2col(x, kernel, stride)
    out_len = cols.shape[1]
    flat = reshape(cols, (n * out_len, c_in * kernel))
    wmat = transpose(reshape(weight, (filters, c_in * kernel)))
    out = matmul(flat, wmat)
    out = transpose(reshape(out, (n, out_len, filters)), (0, 2, 1))
    return add(out, broadcast_to(reshape(bias, (1, filters, 1)), out.shape))


def batchnorm_train(x, gamma, beta, axes, eps=1e-5):
    xhat = bn_normalize(x, axes, eps)
    return _bn_scale_shift(xhat, gamma, beta, x.shape, axes)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, axes, eps=1e-5):
    axes = tuple(a % len(x.shape) for a in axes)
    kshape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    mean_c = constant(np.reshape(running_mean, kshape))
    inv_c = constant(np.reshape(1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps), kshape))
    xhat = mul(sub(x, broadcast_to(mean_c, x.shape)), broadcast_to(inv_c, x.shape))
    return _bn_scale_shift(xhat, gamma, beta, x.shape, axes)


def _bn_scale_shift(xhat, gamma, beta, shape, axes):
    kshape = tuple(1 if i in axes else d for i, d in enumerate(shape))
    g = broadcast_to(reshape(gamma, kshape), shape)
    b = broadcast_to(reshape(beta, kshape), shape)
    return add(mul(g, xhat), b)


def global_avg_pool(x):
    """Mean over the trailing time axis of a (n, channels, length) tensor."""
    return reduce_mean(x, axes=(2,))


def softmax(x):
    shifted = sub(x, broadcast_to(rowmax(x), x.shape))
    e = exp(shifted)
    total = broadcast_to(reduce_sum(e, axes=(-1,), keepdims=True), x.shape)
    return div(e, total)


def cross_entropy(probs, labels, num_classes):
    """Per-sample -log p[label] from a (n, num_classes) probability tensor.

    ``labels`` is an integer array; the one-hot selector enters the graph as
    a constant, so gradients flow only through ``probs``.
    """
    labels = np.asarray(labels)
    onehot = np.zeros((labels.shape[0], num_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = reduce_sum(mul(constant(onehot), log(probs)), axes=(1,))
    return neg(picked)


def binary_cross_entropy(probs, targets):
    """Per-sample BCE for a (n, 1) probability tensor and 0/1 targets."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    t = constant(targets)
    t_inv = constant(1.0 - targets)
    one_minus = add_scalar(neg(probs), 1.0)
    loss = add(mul(t, log(probs)), mul(t_inv, log(one_minus)))
    return reshape(neg(loss), (probs.shape[0],))
