"""Minimal float64 tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the attention block, the trading heads and the
detection losses are provided. Binary elementwise ops require equal shapes; the
single exception is a 0-d scalar operand, which is applied to every element.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "DimensionError", "DomainError", "ContractError",
    "ConfigurationError", "tensor", "as_tensor", "current_tape", "no_grad", "backward",
    "matmul", "softmax", "add", "sub", "mul", "div", "sigmoid", "exp", "log", "relu",
    "reshape", "transpose", "index", "stack", "sum", "mean", "unfold", "add_bias",
    "conv2d", "global_avg_pool", "avg_pool2x2", "SGD", "sgd_step",
    "finite_difference_grad", "init_uniform", "corrupt_adjoint", "PRIMITIVES",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A calling precondition was violated."""


class ConfigurationError(ValueError):
    """An unsupported configuration was requested."""


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    adjoint: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of executed operations; inputs always precede their consumers."""

    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    """Return the calling thread's tape (created lazily)."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording them."""
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


# test-only fault injection: adjoints of listed ops are scaled by 1.5
_CORRUPTED: set[str] = set()


@contextlib.contextmanager
def corrupt_adjoint(op: str):
    """Deliberately break one primitive's adjoint (negative control for gradcheck)."""
    _CORRUPTED.add(op)
    try:
        yield
    finally:
        _CORRUPTED.discard(op)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense row-major float64 array with optional gradient tracking."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

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
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self) -> "Tensor":
        return mean(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    tape = current_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, _copy=False)
    if track:
        out.is_leaf = False
        tape.record(_Node(op, out, tuple(inputs), adjoint))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. The tape is cleared
    afterwards, so a recorded graph can be differentiated once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.adjoint(g)
            if node.op in _CORRUPTED:
                in_grads = tuple(None if ig is None else 1.5 * ig for ig in in_grads)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad = ig.copy() if t.grad is None else t.grad + ig
                else:
                    key = id(t)
                    grads[key] = ig if key not in grads else grads[key] + ig
        if loss.is_leaf:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only 0-d scalars broadcast)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, a.shape) if a.requires_grad else None,
                            _reduce_to(g * ad, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_reduce_to(g / bd, a.shape) if a.requires_grad else None,
                            _reduce_to(-g * out / bd, b.shape) if b.requires_grad else None))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so neither branch can overflow
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    d = x.data
    return _make("log", np.log(d), (x,), lambda g: (g / d,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    """Matrix product of ``a[m,k]`` and ``b[k,n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), adjoint)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _make("transpose", np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def index(x, key) -> Tensor:
    """Basic/advanced indexing; the adjoint scatters back with accumulation."""
    x = as_tensor(x)
    out = np.array(x.data[key], dtype=np.float64)
    src = x.shape

    def adjoint(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", out, (x,), adjoint)


def stack(items: Sequence) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    items = [as_tensor(t) for t in items]
    if not items:
        raise ContractError("stack: empty sequence")
    first = items[0].shape
    for t in items:
        if t.shape != first:
            raise DimensionError(f"stack: shapes {first} and {t.shape} differ")
    out = np.stack([t.data for t in items])
    return _make("stack", out, items, lambda g: tuple(g[i] for i in range(len(items))))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    src = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    src, n = x.shape, x.size
    return _make("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),))


def add_bias(x, b) -> Tensor:
    """Add a per-channel bias ``b[C]`` to ``x[C, ...]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[0] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    axes = tuple(range(1, x.ndim))
    return _make("add_bias", x.data + b.data.reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=axes) if axes else g))


# ---------------------------------------------------------------------------
# convolution and pooling


def _unfold_index(h: int, w: int, k: int, pad: int):
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"unfold: {k}x{k} kernel does not fit a {h}x{w} map")
    dy, dx = np.divmod(np.arange(k * k), k)
    oy, ox = np.divmod(np.arange(out_h * out_w), out_w)
    rows = dy[:, None] + oy[None, :]
    cols = dx[:, None] + ox[None, :]
    return rows, cols, out_h, out_w


def unfold(x, k: int, padding: str = "same") -> Tensor:
    """Patch-unroll ``x[C,H,W]`` into ``[C*k*k, H'*W']`` (im2col)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold: expected C x H x W, got {x.shape}")
    if padding not in ("same", "valid"):
        raise ConfigurationError(f"unfold: unknown padding {padding!r}")
    c, h, w = x.shape
    pad = (k - 1) // 2 if padding == "same" else 0
    rows, cols, out_h, out_w = _unfold_index(h, w, k, pad)
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = padded[:, rows, cols].reshape(c * k * k, out_h * out_w)

    def adjoint(g):
        full = np.zeros((c, h + 2 * pad, w + 2 * pad))
        np.add.at(full, (slice(None), rows, cols), g.reshape(c, k * k, out_h * out_w))
        return (full[:, pad:pad + h, pad:pad + w] if pad else full,)

    return _make("unfold", out, (x,), adjoint)


def conv2d(x, kernel, bias=None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of ``x[C_in,H,W]`` with ``kernel[C_out,C_in,k,k]``.

    Realised as unfold + matmul, so the gradient comes from the matmul adjoint.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k not in (1, 3):
        raise ConfigurationError(f"conv2d: kernel size {k} unsupported (use 1 or 3)")
    if x.ndim != 3 or x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    _, h, w = x.shape
    weight = reshape(kernel, (c_out, c_in * k * k))
    if k == 1:
        cols, out_h, out_w = reshape(x, (c_in, h * w)), h, w
    else:
        cols = unfold(x, k, padding)
        out_h, out_w = (h, w) if padding == "same" else (h - k + 1, w - k + 1)
    out = matmul(weight, cols)
    if bias is not None:
        out = add_bias(out, bias)
    return reshape(out, (c_out, out_h, out_w))


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean of ``x[C,H,W]``."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] * x.shape[2] < 1:
        raise DimensionError(f"global_avg_pool: expected C x H x W, got {x.shape}")
    c, h, w = x.shape
    n = h * w
    return _make("global_avg_pool", x.data.reshape(c, n).mean(axis=1), (x,),
                 lambda g: (np.repeat(g / n, n).reshape(c, h, w),))


def avg_pool2x2(x) -> Tensor:
    """Non-overlapping 2x2 mean pooling of ``x[C,H,W]`` with even H and W."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise DimensionError(f"avg_pool2x2: needs C x even H x even W, got {x.shape}")
    c, h, w = x.shape
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def adjoint(g):
        return (np.repeat(np.repeat(g / 4.0, 2, axis=1), 2, axis=2),)

    return _make("avg_pool2x2", out, (x,), adjoint)


# every primitive that records an adjoint on the tape
PRIMITIVES = (
    "add", "sub", "mul", "div", "sigmoid", "exp", "log", "relu", "matmul", "softmax",
    "reshape", "transpose", "index", "stack", "sum", "mean", "add_bias", "unfold",
    "global_avg_pool", "avg_pool2x2",
)


# ---------------------------------------------------------------------------
# optimisation


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=tuple(shape))


class SGD:
    """Stochastic gradient descent with classical momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractError("parameter names must be unique")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient")
        for p in self.params:
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, state: dict[str, np.ndarray] | None = None) -> dict:
    """Functional form of :class:`SGD`; ``state`` carries the velocities between calls."""
    opt = SGD(params, lr, momentum, weight_decay)
    if state:
        opt.velocity.update(state)
    opt.step()
    return opt.velocity


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)

    def value(arr):
        with no_grad():
            out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
