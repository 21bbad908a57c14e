"""Dense float64 tensors with define-by-run reverse-mode autodiff and momentum SGD.

Just enough machinery for small MLPs and small 2-D conv nets. Every op
records a node (parents + backward closure) when grad tracking is on, and
``backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

OP_KINDS = (
    "matmul",
    "conv2d",
    "add_bias",
    "relu",
    "flatten",
    "softmax",
    "cross_entropy",
    "add",
    "mul",
    "mean",
    "sum",
)


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class AutodiffError(RuntimeError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def relu(self):
        return relu(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- ops


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape} (inner dims must agree)")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", bw)


def _im2col(x, k, padding):
    n, c, h, w = x.shape
    if padding == "same":
        p = k // 2
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, w, padding="same"):
    """Stride-1 cross-correlation. x: [N, C, H, W], w: [O, C, k, k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cw}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: unsupported padding {padding!r}")
    if padding == "same" and k % 2 == 0:
        raise ShapeError(f"conv2d: 'same' padding needs an odd kernel, got {k}")
    if padding == "valid" and (k > h or k > wd):
        raise ShapeError(f"conv2d: kernel {k} larger than input {h}x{wd}")

    cols, ho, wo = _im2col(x.data, k, padding)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if w.requires_grad:
            _accum(w, (gcols.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (gcols @ wmat).reshape(n, ho, wo, c, k, k)
            p = k // 2 if padding == "same" else 0
            dx = np.zeros((n, c, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, dx[:, :, p : p + h, p : p + wd])

    return _result(out, (x, w), "conv2d", bw)


def add_bias(x, b):
    """Bias over axis 1 (dense: [N, F] + [F]; conv: [N, C, H, W] + [C])."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis 1 of {x.shape}")
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=reduce_axes))

    return _result(x.data + b.data.reshape(bshape), (x, b), "add_bias", bw)


def relu(x):
    pos = x.data > 0

    def bw(g):
        _accum(x, g * pos)

    return _result(np.where(pos, x.data, 0.0), (x,), "relu", bw)


def flatten(x):
    if x.data.ndim < 1:
        raise ShapeError("flatten: needs at least a batch axis")
    shape = x.shape

    def bw(g):
        _accum(x, g.reshape(shape))

    return _result(x.data.reshape(shape[0], -1), (x,), "flatten", bw)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z):
    s = _softmax(z.data)

    def bw(g):
        _accum(z, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (z,), "softmax", bw)


def cross_entropy(logits, target):
    """Mean over the batch of -sum(target * log_softmax(logits)); target is one-hot or soft."""
    if logits.shape != target.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    t = target.data.reshape(z.shape)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    n = z.shape[0]
    loss = -(t * logp).sum() / n

    def bw(g):
        p = np.exp(logp)
        grad = g * (p * t.sum(axis=-1, keepdims=True) - t) / n
        _accum(logits, grad.reshape(logits.shape))

    return _result(np.array(loss), (logits,), "cross_entropy", bw)


def add(a, b):
    try:
        out = np.add(a.data, b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), "add", bw)


def mul(a, b):
    try:
        out = np.multiply(a.data, b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), "mul", bw)


def mean(x):
    n = x.size

    def bw(g):
        _accum(x, np.full(x.shape, g / n))

    return _result(np.array(x.data.mean()), (x,), "mean", bw)


def tsum(x):
    def bw(g):
        _accum(x, np.full(x.shape, g))

    return _result(np.array(x.data.sum()), (x,), "sum", bw)


_DISPATCH = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add_bias": add_bias,
    "relu": relu,
    "flatten": flatten,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "add": add,
    "mul": mul,
    "mean": mean,
    "sum": tsum,
}


def forward_op(kind, inputs, **kwargs):
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf grads accumulate across calls; interior grads are dropped afterwards.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("backward called on a tensor that is not attached to a graph")
    order = _topo_order(loss)
    interior = [n for n in order if n._backward is not None]
    for node in interior:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in interior:
        node.grad = None
    for node in order:
        if node._backward is None and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    nesterov: bool = False
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, state, masks=None):
    """One momentum-SGD step (PyTorch convention), then clear grads.

    ``masks`` aligns with ``params``; masked entries are held at exactly zero.
    """
    if masks is None:
        masks = [None] * len(params)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, state.velocity):
        if v.shape != p.shape:
            raise ShapeError(f"sgd_step: velocity {v.shape} does not match parameter {p.shape}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise AutodiffError(f"sgd_step: parameter {i} ({p.name or 'unnamed'}) has no grad")
    for p, v, m in zip(params, state.velocity, masks):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.momentum:
            v *= state.momentum
            v += g
            g = g + state.momentum * v if state.nesterov else v
        if m is not None:
            g = g * m
            v *= m
        p.data -= state.lr * g
        if m is not None:
            p.data *= m
        p.grad = None


# ---------------------------------------------------------------- gradient check


def numeric_grad(f, arrays, h=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f(*arrays)
            a[idx] = orig - h
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.uniform(lo, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _gradcheck_case(kind, rng):
    """Build random inputs for ``kind``; return (scalar fn over arrays, arrays)."""
    proj = None

    def scalarize(t, shape):
        nonlocal proj
        if proj is None:
            proj = rng.normal(size=shape)
        return tsum(mul(t, Tensor(proj)))

    if kind == "matmul":
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
        build = lambda a, b: matmul(a, b)
    elif kind == "conv2d":
        pad = rng.choice(["same", "valid"])
        arrays = [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))]
        build = lambda a, b: conv2d(a, b, padding=pad)
    elif kind == "add_bias":
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=(3,))]
        build = add_bias
    elif kind == "relu":
        arrays = [_away_from_zero(rng, (3, 3))]
        build = relu
    elif kind == "flatten":
        arrays = [rng.normal(size=(3, 3, 2))]
        build = flatten
    elif kind == "softmax":
        arrays = [rng.normal(size=(3, 3))]
        build = softmax
    elif kind == "cross_entropy":
        labels = rng.integers(0, 3, size=3)
        onehot = np.eye(3)[labels]
        arrays = [rng.normal(size=(3, 3))]
        build = lambda z: cross_entropy(z, Tensor(onehot))
    elif kind == "add":
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
        build = add
    elif kind == "mul":
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
        build = mul
    elif kind == "mean":
        arrays = [rng.normal(size=(3, 3))]
        build = mean
    elif kind == "sum":
        arrays = [rng.normal(size=(3, 3))]
        build = tsum
    else:
        raise ValueError(f"unknown op kind {kind!r}")

    def graph(*arrs):
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        out = build(*ts)
        loss = out if out.data.ndim == 0 else scalarize(out, out.shape)
        return ts, loss

    return graph, arrays


def gradcheck(kind, rng, h=1e-6):
    """Max relative error between analytic and central-difference grads for one random case."""
    graph, arrays = _gradcheck_case(kind, rng)
    ts, loss = graph(*arrays)
    backward(loss)
    analytic = [t.grad for t in ts]

    def f(*arrs):
        with no_grad():
            return float(graph(*arrs)[1].data)

    numeric = numeric_grad(f, [a.copy() for a in arrays], h=h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def run_gradcheck(cases_per_kind=10, seed=0, tol=1e-4):
    """Run the randomized gradient suite; returns {kind: [rel errors]} and overall pass flag."""
    rng = np.random.default_rng(seed)
    errors = {kind: [gradcheck(kind, rng) for _ in range(cases_per_kind)] for kind in OP_KINDS}
    ok = all(e <= tol for errs in errors.values() for e in errs)
    return errors, ok
