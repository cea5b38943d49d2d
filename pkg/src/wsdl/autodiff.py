"""Dense tensors, reverse-mode differentiation, and momentum SGD.

Tensors wrap numpy arrays (float32 for training storage, float64 in tests
and oracles). Every operation that touches a gradient-requiring input
records its inputs and a gradient closure on the output; ``backward`` walks
the recorded graph once in reverse topological order and accumulates
adjoints additively into ``.grad``. Only the operation set needed by the
localization pipeline is provided.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

CROSS_ENTROPY_EPS = 1e-12

_grad_enabled = True
_fast_malloc_done = False


def enable_buffer_reuse():
    """Keep large numpy buffers on the heap so training steps reuse them.

    glibc hands allocations above its mmap threshold straight back to the
    kernel on free, which makes every conv re-fault tens of megabytes of
    column buffers. Raising the threshold (and the trim threshold) lets the
    allocator recycle those blocks. No-op on platforms without glibc.
    """
    global _fast_malloc_done
    if _fast_malloc_done:
        return
    _fast_malloc_done = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except OSError:
        pass


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-parameter inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional value with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def validate_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor holds non-finite values")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _owned(g: np.ndarray) -> np.ndarray:
    return g if g.base is None else g.copy()


def backward(loss: Tensor):
    """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``.

    Adjoints accumulate additively: calling twice without zeroing doubles the
    gradients. Each graph node is visited exactly once, in reverse execution
    order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = _owned(g) if node.grad is None else node.grad + g
        if node._grad_fn is not None:
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None:
                    continue
                pid = id(parent)
                adjoint[pid] = adjoint[pid] + pg if pid in adjoint else pg


# ---------------------------------------------------------------------------
# forward operators


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernels`` [K,C,kh,kw] plus bias [K]."""
    if x.ndim != 4 or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects input [N,C,H,W], kernels [K,C,kh,kw], bias [K]; "
            f"got {x.shape}, {kernels.shape}, {bias.shape}"
        )
    n, c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernels expect {ck}")
    if bias.shape[0] != k:
        raise ShapeError(f"conv2d bias length {bias.shape[0]} != kernel count {k}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    wflat = kernels.data.reshape(k, c * kh * kw)
    out = np.matmul(wflat, cols2).reshape(n, k, ho, wo) + bias.data.reshape(1, k, 1, 1)

    def grad_fn(g):
        gflat = g.reshape(n, k, ho * wo)
        gk = gb = gx = None
        if kernels.requires_grad:
            gk = np.matmul(gflat, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.matmul(wflat.T, gflat).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk, gb

    return _make(out, (x, kernels, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def grad_fn(g):
        return ((x.data > 0).astype(g.dtype) * g,)

    return _make(y, (x,), grad_fn)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient routes to the first max in row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(y, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        gx = np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy()
        return (gx,)

    return _make(y, (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b for x [N,D], W [D,E], b [E]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"linear expects x [N,D], weight [D,E], bias [E]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear dims disagree: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    y = x.data @ weight.data + bias.data

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(y, (x, weight, bias), grad_fn)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability; logits [N,C]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N,C], got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (logits,), grad_fn)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log(max(p_label, eps)); labels are class indices."""
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy expects probs [N,C], got {probs.shape}")
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy label out of range [0,{c}): {labels.min()}..{labels.max()}")
    picked = probs.data[np.arange(n), labels]
    clamped = np.maximum(picked, CROSS_ENTROPY_EPS)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype)

    def grad_fn(g):
        gp = np.zeros_like(probs.data)
        live = picked >= CROSS_ENTROPY_EPS
        gp[np.arange(n), labels] = np.where(live, -1.0 / clamped, 0.0) / n
        return (gp * g,)

    return _make(loss, (probs,), grad_fn)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Summed robust loss: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, d = pred - target.

    The caller divides by its own normalizer. ``target`` may be a Tensor or a
    plain array; gradients flow to both sides when requested.
    """
    target_t = target if isinstance(target, Tensor) else None
    tdata = target_t.data if target_t is not None else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != tdata.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {tdata.shape}")
    d = pred.data - tdata
    absd = np.abs(d)
    cell = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    loss = np.asarray(cell.sum(), dtype=pred.data.dtype)

    def grad_fn(g):
        gd = np.clip(d, -1.0, 1.0) * g
        if target_t is not None:
            return gd, -gd
        return (gd,)

    parents = (pred, target_t) if target_t is not None else (pred,)
    return _make(loss, parents, grad_fn)


# ---------------------------------------------------------------------------
# plumbing operators used to assemble composite losses and heads


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g, g

    return _make(a.data + b.data, (a, b), grad_fn)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        return (g,)

    return _make(x.data + c, (x,), grad_fn)


def center_mean(x: Tensor) -> Tensor:
    """Subtract each sample's scalar mean (axis 0 is the batch)."""
    axes = tuple(range(1, x.ndim))
    y = x.data - x.data.mean(axis=axes, keepdims=True)

    def grad_fn(g):
        return (g - g.mean(axis=axes, keepdims=True),)

    return _make(y, (x,), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        return (g * c,)

    return _make(x.data * c, (x,), grad_fn)


def mul_const(x: Tensor, arr) -> Tensor:
    arr = np.asarray(arr, dtype=x.data.dtype)
    if arr.shape != x.shape:
        raise ShapeError(f"mul_const shape mismatch: {x.shape} vs {arr.shape}")

    def grad_fn(g):
        return (g * arr,)

    return _make(x.data * arr, (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.full_like(x.data, 1.0) * g,)

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), grad_fn)


def take_rows(x: Tensor, idx) -> Tensor:
    """Row gather along axis 0; backward scatter-adds (duplicate indices accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), grad_fn)


# ---------------------------------------------------------------------------
# optimizer


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Zero-mean uniform initialization scaled by fan-in.

    The limit sqrt(6/fan_in) keeps activation variance roughly constant
    through stacked conv+relu layers; smaller gains starve deep stacks of
    signal and stall training.
    """
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def sgd_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
               learning_rate: float, momentum: float, weight_decay: float):
    """In-place momentum step: v <- m*v + g + wd*p; p <- p - lr*v."""
    velocity *= momentum
    velocity += grad + weight_decay * param
    param -= learning_rate * velocity


class SGD:
    """Momentum SGD over a named parameter table."""

    def __init__(self, params: dict, learning_rate: float = 0.001,
                 momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = params
        self.state = OptimState(learning_rate, momentum, weight_decay,
                                {k: np.zeros_like(t.data) for k, t in params.items()})

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float):
        if value <= 0:
            raise ValueError(f"learning_rate must be positive, got {value}")
        self.state.learning_rate = value

    def step(self):
        st = self.state
        for name, p in self.params.items():
            if p.grad is None:
                continue
            sgd_update(p.data, p.grad, st.velocity[name],
                       st.learning_rate, st.momentum, st.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
