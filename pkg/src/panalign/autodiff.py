"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
op records its parents and a backward closure on the output tensor; the
tape is rebuilt on each forward pass (no graph reuse). ``backward`` runs
one reverse-topological sweep and accumulates into ``.grad``; repeated
calls without ``zero_grad`` keep accumulating.

Only the layer set the network needs is provided: conv2d, relu, 2x2 max
pooling, global average pooling, fully connected, softmax cross-entropy,
plus elementwise add/mul and sum for tests and loss composition.
"""

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, InvalidLabelError, InvalidShapeError


class Tensor:
    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Reverse sweep from a scalar loss; visits each recorded op once."""
    if loss.data.size != 1:
        raise InvalidArgumentError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise InvalidShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    data = a.data + b.data

    def bw(g):
        a._accumulate(g if a.data.shape == data.shape else g.sum())
        b._accumulate(g if b.data.shape == data.shape else g.sum())

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise InvalidShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    data = a.data * b.data

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        a._accumulate(ga if a.data.shape == data.shape else ga.sum())
        b._accumulate(gb if b.data.shape == data.shape else gb.sum())

    return _make(data, (a, b), bw)


def tsum(a):
    a = _as_tensor(a)
    data = np.array(a.data.sum())

    def bw(g):
        a._accumulate(np.full_like(a.data, float(np.ravel(g)[0])))

    return _make(data, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# network layers


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution (cross-correlation); weight is [Cout, Cin, kh, kw]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InvalidShapeError(
            f"conv2d expects 4-d input/weight, got {x.data.shape} and {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[1]:
        raise InvalidShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}"
        )
    kh, kw = weight.data.shape[2:]
    h, w = x.data.shape[2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise InvalidShapeError(
            f"conv2d kernel {weight.data.shape} larger than padded input {x.data.shape}"
        )
    b = bias
    if b is not None:
        b = _as_tensor(b)
    data = kernels.conv2d_forward(
        x.data, weight.data, None if b is None else b.data, stride, padding
    )
    parents = (x, weight) if b is None else (x, weight, b)

    def bw(g):
        need_gx = x.requires_grad or bool(x._parents)
        gx, gw, gb = kernels.conv2d_backward(
            x.data, weight.data, np.ascontiguousarray(g), stride, padding, need_gx
        )
        if need_gx:
            x._accumulate(gx)
        weight._accumulate(gw)
        if b is not None:
            b._accumulate(gb)

    return _make(data, parents, bw)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bw(g):
        x._accumulate(g * mask)

    return _make(data, (x,), bw)


def max_pool2d(x):
    """2x2 max pooling with stride 2; trailing odd row/column dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidShapeError(f"max_pool2d expects 4-d input, got {x.data.shape}")
    h, w = x.data.shape[2:]
    if h < 2 or w < 2:
        raise InvalidShapeError(f"max_pool2d input too small: {x.data.shape}")
    data, switches = kernels.maxpool2_forward(x.data)

    def bw(g):
        x._accumulate(kernels.maxpool2_backward(switches, np.ascontiguousarray(g), h, w))

    return _make(data, (x,), bw)


def avg_pool_global(x):
    """Global average pooling [N, C, H, W] -> [N, C]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidShapeError(f"avg_pool_global expects 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def bw(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make(data, (x,), bw)


def fully_connected(x, weight, bias):
    """Affine map [N, D] @ [D, K] + [K]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise InvalidShapeError(
            f"fully_connected: input {x.data.shape} vs weight {weight.data.shape}"
        )
    data = x.data @ weight.data + bias.data

    def bw(g):
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        bias._accumulate(g.sum(axis=0))

    return _make(data, (x, weight, bias), bw)


def softmax_cross_entropy(logits, labels):
    """Mean -log softmax probability of the true class.

    Accepts [K] logits with an int label, or [N, K] with N labels.
    Gradient w.r.t. logits is (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise InvalidShapeError(f"softmax_cross_entropy: bad logits shape {logits.data.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise InvalidShapeError(
            f"softmax_cross_entropy: {z.shape[0]} rows vs {y.shape[0]} labels"
        )
    k = z.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise InvalidLabelError(f"label out of range [0, {k}): {y.tolist()}")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -(np.log(p[np.arange(n), y])).mean()
    data = np.array(nll)

    def bw(g):
        gz = p.copy()
        gz[np.arange(n), y] -= 1.0
        gz *= float(np.ravel(g)[0]) / n
        logits._accumulate(gz[0] if single else gz)

    return _make(data, (logits,), bw)


# ---------------------------------------------------------------------------
# optimization


class SGD:
    """Mini-batch SGD with optional (Nesterov) momentum.

    ``groups`` is a list of {"params": [Tensor, ...], "lr": float} dicts;
    velocity persists across steps per parameter.
    """

    def __init__(self, groups, momentum=0.0, nesterov=False):
        if not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {momentum}")
        for g in groups:
            if g["lr"] <= 0:
                raise InvalidArgumentError(f"lr must be positive, got {g['lr']}")
        self.groups = [dict(g) for g in groups]
        for g in self.groups:
            g.setdefault("base_lr", g["lr"])
        self.momentum = momentum
        self.nesterov = nesterov
        self._velocity = {}

    def set_lr_scale(self, scale):
        """Multiply each group's base lr by ``scale`` (lr schedule hook)."""
        for g in self.groups:
            g["lr"] = g["base_lr"] * scale

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self):
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if self.momentum > 0.0:
                    v = self._velocity.get(id(p))
                    if v is None:
                        v = np.zeros_like(p.data)
                        self._velocity[id(p)] = v
                    v *= self.momentum
                    v += grad
                    update = grad + self.momentum * v if self.nesterov else v
                else:
                    update = grad
                p.data -= lr * update


def clip_grad_norm(params, max_norm):
    """Scale the gradients of ``params`` so their global L2 norm is at most
    ``max_norm``; returns the pre-clip norm."""
    if max_norm <= 0:
        raise InvalidArgumentError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    clipped = [p for p in params if p.grad is not None]
    for p in clipped:
        total += float((p.grad * p.grad).sum())
    total = float(np.sqrt(total))
    if total > max_norm:
        scale = max_norm / total
        for p in clipped:
            p.grad *= scale
    return total


def init_uniform(rng, shape, fan_in):
    """Seeded uniform init in [-s, s] with s = sqrt(1/fan_in)."""
    s = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-s, s, size=shape)
