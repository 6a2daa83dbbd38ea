"""Reverse-mode differentiation with exact second-order support.

The engine records an eager DAG of ``Node`` objects.  Every primitive's
backward rule is itself built out of the same primitives, so the gradient
graph can be differentiated again: Hessian-vector products are obtained by
back-propagating through the recorded gradient computation (double
backprop), with no finite differences anywhere.

Structural ops come in exact adjoint pairs (``im2col``/``col2im``,
``pool_select``/``pool_spread``, ``slice1d``/``embed1d``,
``broadcast_to``/``sum_to``), which keeps the rule set closed under
differentiation.  Piecewise-linear selections (ReLU masks, pooling argmax)
are frozen at their forward values: the derivative of ReLU at 0 is defined
as 0 and all second derivatives of the selections are identically 0, which
is the almost-everywhere-correct convention and keeps every run
deterministic.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

_ids = itertools.count()


class Node:
    """One value in the recorded computation DAG.

    ``vjp(g, needed)`` maps the output adjoint ``g`` (a Node) to one adjoint
    Node per parent, skipping parents whose ``needed`` flag is False.  A node
    without parents is a leaf or a constant.
    """

    __slots__ = ("value", "parents", "vjp", "nid")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.nid = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(id={self.nid}, shape={self.value.shape})"


def constant(x):
    return Node(np.asarray(x, dtype=np.float64))


def leaf(x):
    """A differentiation root; identical to a constant except by identity."""
    return Node(np.asarray(x, dtype=np.float64))


def _sum_to_value(x, shape):
    extra = x.ndim - len(shape)
    if extra:
        x = x.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (xs, ts) in enumerate(zip(x.shape, shape)) if ts == 1 and xs != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def sum_to(x, shape):
    """Adjoint of broadcasting: reduce ``x`` down to ``shape``."""
    shape = tuple(shape)
    if x.value.shape == shape:
        return x
    out = Node(_sum_to_value(x.value, shape), (x,), None)
    out.vjp = lambda g, needed: (broadcast_to(g, x.value.shape),)
    return out


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.value.shape == shape:
        return x
    out = Node(np.broadcast_to(x.value, shape), (x,), None)
    out.vjp = lambda g, needed: (sum_to(g, x.value.shape),)
    return out


def add(a, b):
    out = Node(a.value + b.value, (a, b), None)
    out.vjp = lambda g, needed: (
        sum_to(g, a.value.shape) if needed[0] else None,
        sum_to(g, b.value.shape) if needed[1] else None,
    )
    return out


def sub(a, b):
    out = Node(a.value - b.value, (a, b), None)
    out.vjp = lambda g, needed: (
        sum_to(g, a.value.shape) if needed[0] else None,
        sum_to(scale(g, -1.0), b.value.shape) if needed[1] else None,
    )
    return out


def mul(a, b):
    out = Node(a.value * b.value, (a, b), None)
    out.vjp = lambda g, needed: (
        sum_to(mul(g, b), a.value.shape) if needed[0] else None,
        sum_to(mul(g, a), b.value.shape) if needed[1] else None,
    )
    return out


def mul_const(x, c):
    """Elementwise product with a fixed array (no gradient into ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    out = Node(x.value * c, (x,), None)
    out.vjp = lambda g, needed: (sum_to(mul_const(g, c), x.value.shape),)
    return out


def scale(x, c):
    c = float(c)
    out = Node(x.value * c, (x,), None)
    out.vjp = lambda g, needed: (scale(g, c),)
    return out


def add_scalar(x, c):
    c = float(c)
    out = Node(x.value + c, (x,), None)
    out.vjp = lambda g, needed: (g,)
    return out


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul expects 2-d operands")
    out = Node(a.value @ b.value, (a, b), None)
    out.vjp = lambda g, needed: (
        matmul(g, transpose(b)) if needed[0] else None,
        matmul(transpose(a), g) if needed[1] else None,
    )
    return out


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.value.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Node(np.transpose(x.value, axes), (x,), None)
    out.vjp = lambda g, needed: (transpose(g, inv),)
    return out


def reshape(x, shape):
    shape = tuple(shape)
    out = Node(np.reshape(x.value, shape), (x,), None)
    out.vjp = lambda g, needed: (reshape(g, x.value.shape),)
    return out


def slice1d(x, start, stop):
    out = Node(x.value[start:stop], (x,), None)
    n = x.value.shape[0]
    out.vjp = lambda g, needed: (embed1d(g, start, n),)
    return out


def embed1d(x, start, n):
    v = np.zeros(n, dtype=np.float64)
    stop = start + x.value.shape[0]
    v[start:stop] = x.value
    out = Node(v, (x,), None)
    out.vjp = lambda g, needed: (slice1d(g, start, stop),)
    return out


def sum_all(x):
    out = Node(np.asarray(x.value.sum()), (x,), None)
    out.vjp = lambda g, needed: (broadcast_to(g, x.value.shape),)
    return out


def sum_axis(x, axis, keepdims=True):
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        raise DimensionError("sum_axis keeps reduced axes; reshape afterwards")
    out = Node(x.value.sum(axis=axis, keepdims=True), (x,), None)
    out.vjp = lambda g, needed: (broadcast_to(g, x.value.shape),)
    return out


def mean_axis(x, axis):
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([x.value.shape[i] for i in axis]))
    return scale(sum_axis(x, axis), 1.0 / n)


def exp(x):
    out = Node(np.exp(x.value), (x,), None)
    out.vjp = lambda g, needed: (mul(g, out),)
    return out


def log(x):
    out = Node(np.log(x.value), (x,), None)
    out.vjp = lambda g, needed: (mul(g, power(x, -1.0)),)
    return out


def power(x, p):
    p = float(p)
    out = Node(x.value**p, (x,), None)
    if p == 1.0:
        out.vjp = lambda g, needed: (g,)
    else:
        out.vjp = lambda g, needed: (scale(mul(g, power(x, p - 1.0)), p),)
    return out


def div(a, b):
    return mul(a, power(b, -1.0))


def relu(x):
    """max(x, 0) with derivative 0 at the origin and zero second derivative."""
    mask = (x.value > 0.0).astype(np.float64)
    return mul_const(x, mask)


def stop_gradient(x):
    return constant(x.value)


# ---------------------------------------------------------------------------
# Convolution lowering: exact adjoint pair im2col / col2im.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvGeom:
    """Patch-extraction geometry for one (input shape, kernel, stride)."""

    in_c: int
    in_h: int
    in_w: int
    kh: int
    kw: int
    stride: int
    pad_t: int
    pad_b: int
    pad_l: int
    pad_r: int
    out_h: int
    out_w: int

    @property
    def patch(self):
        return self.in_c * self.kh * self.kw


def conv_geom(in_c, in_h, in_w, kh, kw, stride):
    """'Same'-style geometry: output extent is ceil(input / stride)."""
    if kh < stride or kw < stride:
        raise DimensionError("kernel smaller than stride is unsupported")
    out_h = -(-in_h // stride)
    out_w = -(-in_w // stride)
    pad_h = max((out_h - 1) * stride + kh - in_h, 0)
    pad_w = max((out_w - 1) * stride + kw - in_w, 0)
    return ConvGeom(
        in_c, in_h, in_w, kh, kw, stride,
        pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2,
        out_h, out_w,
    )


def _im2col_value(x, geom):
    g = geom
    xp = np.pad(x, ((0, 0), (0, 0), (g.pad_t, g.pad_b), (g.pad_l, g.pad_r)))
    win = sliding_window_view(xp, (g.kh, g.kw), axis=(2, 3))
    win = win[:, :, :: g.stride, :: g.stride]
    b = x.shape[0]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, g.out_h * g.out_w, g.patch
    )


def _col2im_value(cols, geom):
    g = geom
    b = cols.shape[0]
    hp = g.in_h + g.pad_t + g.pad_b
    wp = g.in_w + g.pad_l + g.pad_r
    c6 = cols.reshape(b, g.out_h, g.out_w, g.in_c, g.kh, g.kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((b, g.in_c, hp, wp), dtype=np.float64)
    s = g.stride
    for i in range(g.kh):
        for j in range(g.kw):
            xp[:, :, i : i + s * g.out_h : s, j : j + s * g.out_w : s] += c6[:, :, :, :, i, j]
    return xp[:, :, g.pad_t : g.pad_t + g.in_h, g.pad_l : g.pad_l + g.in_w]


def im2col(x, geom):
    """(B,C,H,W) -> (B, out_h*out_w, C*kh*kw) patch matrix."""
    out = Node(_im2col_value(x.value, geom), (x,), None)
    out.vjp = lambda g, needed: (col2im(g, geom),)
    return out


def col2im(cols, geom):
    """Adjoint of :func:`im2col` (overlap-add back onto the image)."""
    out = Node(_col2im_value(cols.value, geom), (cols,), None)
    out.vjp = lambda g, needed: (im2col(g, geom),)
    return out


# ---------------------------------------------------------------------------
# Max pooling: argmax frozen at forward values, then a linear select/spread
# adjoint pair.  Windows are non-overlapping (stride = window); trailing rows
# and columns that do not fill a window are dropped.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolGeom:
    channels: int
    in_h: int
    in_w: int
    win: int
    out_h: int
    out_w: int


def pool_geom(channels, in_h, in_w, win):
    if in_h < win or in_w < win:
        raise DimensionError(f"pool window {win} exceeds input {in_h}x{in_w}")
    return PoolGeom(channels, in_h, in_w, win, in_h // win, in_w // win)


def _pool_windows(x, geom):
    g = geom
    b = x.shape[0]
    v = x[:, :, : g.out_h * g.win, : g.out_w * g.win]
    v = v.reshape(b, g.channels, g.out_h, g.win, g.out_w, g.win)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(b, g.channels, g.out_h, g.out_w, g.win * g.win)


def pool_argmax(x_value, geom):
    """Flat within-window index of the first maximum, row-major."""
    return np.argmax(_pool_windows(x_value, geom), axis=-1)


def pool_margin(x_value, geom):
    """Smallest (max - runner-up) gap across all windows; inf for 1x1 windows.

    Windows whose top two entries are exactly 0 are skipped: those are
    clamped units (pooling follows a ReLU), the window output is locally
    the constant 0, and there is no switching surface nearby — the distance
    to the clamp itself is already measured on the pre-activations.
    """
    w = _pool_windows(x_value, geom)
    if w.shape[-1] < 2:
        return np.inf
    top2 = np.partition(w, w.shape[-1] - 2, axis=-1)[..., -2:]
    gaps = top2[..., 1] - top2[..., 0]
    live = ~((gaps == 0.0) & (top2[..., 1] == 0.0))
    return float(np.min(gaps[live])) if np.any(live) else np.inf


def pool_select(x, idx, geom):
    val = np.take_along_axis(_pool_windows(x.value, geom), idx[..., None], axis=-1)[..., 0]
    out = Node(val, (x,), None)
    out.vjp = lambda g, needed: (pool_spread(g, idx, geom),)
    return out


def pool_spread(y, idx, geom):
    g = geom
    b = y.value.shape[0]
    z = np.zeros((b, g.channels, g.out_h, g.out_w, g.win * g.win), dtype=np.float64)
    np.put_along_axis(z, idx[..., None], y.value[..., None], axis=-1)
    z = z.reshape(b, g.channels, g.out_h, g.out_w, g.win, g.win).transpose(0, 1, 2, 4, 3, 5)
    full = np.zeros((b, g.channels, g.in_h, g.in_w), dtype=np.float64)
    full[:, :, : g.out_h * g.win, : g.out_w * g.win] = z.reshape(
        b, g.channels, g.out_h * g.win, g.out_w * g.win
    )
    out = Node(full, (y,), None)
    out.vjp = lambda gg, needed: (pool_select(gg, idx, geom),)
    return out


def maxpool(x, geom):
    return pool_select(x, pool_argmax(x.value, geom), geom)


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------


def toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.nid in seen:
            continue
        seen.add(node.nid)
        stack.append((node, True))
        for p in node.parents:
            if p.nid not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt):
    """Adjoints of a scalar ``output`` with respect to each node in ``wrt``.

    The returned nodes are themselves part of the DAG, so they can be fed
    back into :func:`grad` for second derivatives.  Accumulation follows the
    fixed reverse-topological order, making results bit-reproducible.
    """
    if output.value.ndim != 0:
        raise DimensionError("grad expects a scalar output")
    topo = toposort(output)
    active = {w.nid for w in wrt}
    for node in topo:
        if node.nid not in active:
            for p in node.parents:
                if p.nid in active:
                    active.add(node.nid)
                    break
    grads = {}
    if output.nid in active:
        grads[output.nid] = constant(np.ones((), dtype=np.float64))
        for node in reversed(topo):
            g = grads.get(node.nid)
            if g is None or node.vjp is None:
                continue
            needed = tuple(p.nid in active for p in node.parents)
            if not any(needed):
                continue
            for p, pg in zip(node.parents, node.vjp(g, needed)):
                if pg is None:
                    continue
                prev = grads.get(p.nid)
                grads[p.nid] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        gw = grads.get(w.nid)
        out.append(gw if gw is not None else constant(np.zeros_like(w.value)))
    return out


def find_first_nonfinite(root):
    """Node id of the earliest (topological) non-finite value, or None."""
    for node in toposort(root):
        if not np.all(np.isfinite(node.value)):
            return node.nid
    return None


def _check_finite_scalar(out):
    if not np.isfinite(out.value):
        nid = find_first_nonfinite(out)
        raise NumericError(f"non-finite forward value (first at node {nid})", node_id=nid)


# ---------------------------------------------------------------------------
# Flat parameter vector.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple


class ParamVector:
    """All model parameters flattened into one float64 vector.

    The layout table assigns each named parameter tensor a contiguous slice,
    in fixed layer order, covering ``[0, size)`` exactly once.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data, layout):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.data.ndim != 1:
            raise DimensionError("ParamVector data must be 1-d")
        total = sum(int(np.prod(e.shape)) for e in layout)
        if total != self.data.shape[0]:
            raise DimensionError(
                f"layout covers {total} entries but data has {self.data.shape[0]}"
            )
        self.layout = tuple(layout)

    @property
    def size(self):
        return self.data.shape[0]

    def view(self, name):
        """The named parameter as a shaped view of the flat data."""
        for e in self.layout:
            if e.name == name:
                n = int(np.prod(e.shape))
                return self.data[e.offset : e.offset + n].reshape(e.shape)
        raise KeyError(name)

    def with_data(self, data):
        return ParamVector(data, self.layout)

    def copy(self):
        return ParamVector(self.data.copy(), self.layout)


def _unwrap(at):
    return at.data if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64)


def _rewrap(arr, like):
    return like.with_data(arr) if isinstance(like, ParamVector) else arr


def value_and_grad(loss_fn, at, batch):
    """Loss value and exact parameter gradient.

    ``loss_fn(theta_node, batch)`` must build and return the scalar loss
    node.  The gradient comes from one reverse pass over that recording.
    """
    theta = leaf(_unwrap(at))
    out = loss_fn(theta, batch)
    _check_finite_scalar(out)
    (g,) = grad(out, [theta])
    return float(out.value), _rewrap(g.value, at)


def hvp_theta(loss_fn, at, batch, v):
    """Hessian-vector product w.r.t. parameters by double backprop."""
    theta = leaf(_unwrap(at))
    out = loss_fn(theta, batch)
    _check_finite_scalar(out)
    (g,) = grad(out, [theta])
    gv = sum_all(mul(g, constant(_unwrap(v))))
    (h,) = grad(gv, [theta])
    return _rewrap(h.value, at)


def hvp_input(loss_fn, at, sample, u):
    """Hessian-vector product w.r.t. the input of a single sample.

    ``loss_fn(theta_node, x_node, y)`` must build the scalar loss for one
    sample; the second derivative is taken through the recorded gradient
    graph, exactly as for the parameter Hessian.
    """
    x, y = sample
    theta = constant(_unwrap(at))
    xn = leaf(x)
    out = loss_fn(theta, xn, y)
    _check_finite_scalar(out)
    (g,) = grad(out, [xn])
    gu = sum_all(mul(g, constant(np.asarray(u, dtype=np.float64))))
    (h,) = grad(gu, [xn])
    return h.value


def input_gradient(loss_fn, at, x, y):
    """Loss value and exact gradient w.r.t. the input array ``x``."""
    theta = constant(_unwrap(at))
    xn = leaf(x)
    out = loss_fn(theta, xn, y)
    _check_finite_scalar(out)
    (g,) = grad(out, [xn])
    return float(out.value), g.value
