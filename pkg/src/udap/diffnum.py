"""Small reverse-mode differentiation core over dense float32 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient back to its inputs. The tape
is implicit: nodes carry parent links plus a monotonically increasing id, so
reverse id order is a valid topological order for backward.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

_node_ids = itertools.count()
_grad_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: produced {bad} non-finite value(s)")


class Tensor:
    """A float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = np.asarray(out, dtype=DTYPE)
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._op = op
    t._id = next(_node_ids)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a scalar constant.

    The product is formed in float64 and rounded once, so the constant is not
    itself rounded to float32 first; chains of scalings and their inverses
    (DDIM inversion then denoising) then cancel to within one rounding per step.
    """
    c = float(c)
    out = (a.data.astype(np.float64) * c).astype(DTYPE)
    return _make(out, "scale", (a,), lambda g: ((g.astype(np.float64) * c).astype(DTYPE),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b`` of shape (C,) along axis 1 of ``a``."""
    if a.data.ndim < 2 or b.shape != (a.shape[1],):
        raise ShapeError(f"bias_add: cannot add {b.shape} along axis 1 of {a.shape}")
    view = (1, -1) + (1,) * (a.data.ndim - 2)
    red = (0,) + tuple(range(2, a.data.ndim))
    return _make(a.data + b.data.reshape(view), "bias_add", (a, b), lambda g: (g, g.sum(axis=red)))


def channel_add(a: Tensor, e: Tensor) -> Tensor:
    """Add a per-sample, per-channel (N, C) tensor to an (N, C, H, W) feature map."""
    if a.data.ndim != 4 or e.shape != a.shape[:2]:
        raise ShapeError(f"channel_add: cannot add {e.shape} to {a.shape}")
    return _make(a.data + e.data[:, :, None, None], "channel_add", (a, e), lambda g: (g, g.sum(axis=(2, 3))))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------- reductions


def mse(a, b) -> Tensor:
    """Mean of squared differences, reduced to a scalar (shape ())."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mse", a, b)
    diff = a.data - b.data
    n = DTYPE(diff.size)

    def back(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make(np.mean(diff * diff, dtype=np.float64), "mse", (a, b), back)


def total(a: Tensor) -> Tensor:
    return _make(a.data.sum(dtype=np.float64), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OCkk weight, optional (O,) bias."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    s, p = stride, padding
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(hp, wp)}")
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    # channel-major padded copy; each kernel offset is then one tensordot
    xt = np.zeros((c, n, hp, wp), dtype=DTYPE)
    xt[:, :, p : p + h, p : p + wd] = x.data.transpose(1, 0, 2, 3)
    wd_ = w.data

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    acc = np.zeros((o, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            acc += np.tensordot(wd_[:, :, i, j], xt[window(i, j)], axes=([1], [0]))
    if b is not None:
        acc += b.data[:, None, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def back(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = np.empty(w.shape, dtype=DTYPE)
        gxt = np.zeros(xt.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                win = window(i, j)
                gw[:, :, i, j] = np.tensordot(gt, xt[win], axes=([1, 2, 3], [1, 2, 3]))
                gxt[win] += np.tensordot(wd_[:, :, i, j], gt, axes=([0], [0]))
        gx = gxt[:, :, p : p + h, p : p + wd].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, gt.sum(axis=(1, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", parents, back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, "upsample2x", (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def sin_embed(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of a (N,) vector of (possibly fractional) timesteps."""
    if t.data.ndim != 1 or dim < 2 or dim % 2:
        raise ShapeError(f"sin_embed: need (N,) input and even dim, got {t.shape}, dim={dim}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half).astype(DTYPE)
    arg = t.data[:, None] * freqs[None, :]
    sn, cs = np.sin(arg), np.cos(arg)
    out = np.concatenate([sn, cs], axis=1)

    def back(g):
        return ((g[:, :half] * cs - g[:, half:] * sn) @ freqs,)

    return _make(out, "sin_embed", (t,), back)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "sin_embed": sin_embed,
    "mse": mse,
    "bias_add": bias_add,
    "channel_add": channel_add,
    "upsample2x": upsample2x,
    "reshape": reshape,
    "sum": total,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")

    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._id, reverse=True)

    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=DTYPE)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            _check_finite(pg, f"backward through {node._op}")
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- optimizer


@dataclass
class OptState:
    """Adam moment estimates keyed by parameter position."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, lr: float, state: OptState) -> None:
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: parameter list changed between steps")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(DTYPE)
        p.grad = None


class Adam:
    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.state = OptState()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
