"""
Numerics Module - Dense tensors with reverse-mode automatic differentiation
Every vector-Jacobian product is written with Tensor primitives, so a backward
pass run with create_graph=True is itself recorded and can be differentiated again.

Reduction order: numpy reductions run over the fixed memory layout and gradient
accumulation follows the fixed topological order of the graph, so repeated runs
on one platform are bit-identical.
"""

import logging
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable for an operation."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain (log of 0, division by 0)."""


class GradientCheckError(ValueError):
    """Raised when a finite-difference evaluation hits a non-finite function value."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording operations on the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def enable_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    Immutable n-dimensional float array and graph node.

    Attributes:
        data: row-major numpy array (float64)
        op: identifier of the primitive that produced this node ("leaf" for inputs)
        parents: input nodes, recorded only when the node takes part in differentiation
        requires_grad: whether gradients flow into this node
    """

    __slots__ = ("data", "op", "parents", "requires_grad", "_vjp")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.op = "leaf"
        self.parents: Tuple["Tensor", ...] = ()
        self.requires_grad = requires_grad
        self._vjp = None

    @classmethod
    def _wrap(cls, data: np.ndarray, op: str, parents=(), vjp=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.op = op
        out.parents = tuple(parents)
        out.requires_grad = bool(parents)
        out._vjp = vjp
        return out

    # ---------- construction helpers ----------
    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls(np.ones(shape, dtype=DTYPE))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "leaf")

    # ---------- introspection ----------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # ---------- operators ----------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_tensor(self, key)

    # ---------- method forms ----------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value: ArrayLike) -> Tensor:
    """Return value unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor._wrap(data, op, inputs, vjp)
    return Tensor._wrap(data, op)


# ---------- broadcasting ----------
def broadcast(a: ArrayLike, shape) -> Tensor:
    """Broadcast a to shape (numpy rules); the adjoint sums back to a's shape."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast shape {a.shape} to {shape}") from None
    return _record("broadcast", data, (a,), lambda g, out: (sum_to(g, a.shape),))


def sum_to(g: Tensor, shape) -> Tensor:
    """Sum g down to shape, undoing a numpy broadcast."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, size in enumerate(shape):
        if size == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    reduced = sum_(g, axis=tuple(axes), keepdims=False) if axes else g
    return reshape(reduced, shape)


def _conform(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not conformable") from None
    return broadcast(a, shape), broadcast(b, shape)


# ---------- arithmetic ----------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _conform("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g, out: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _conform("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g, out: (g, neg(g)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g, out: (neg(g),))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _conform("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g, out: (mul(g, b), mul(g, a)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _conform("div", a, b)
    if np.any(b.data == 0):
        raise DomainError(f"div: divisor of shape {b.shape} contains zeros")

    def vjp(g, out):
        return div(g, b), neg(div(mul(g, a), mul(b, b)))

    return _record("div", a.data / b.data, (a, b), vjp)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")

    def vjp(g, out):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


# ---------- layout ----------
def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g, out: (transpose(g, inverse),))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, out: (reshape(g, a.shape),))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g, out):
        return (broadcast(reshape(g, kept), a.shape),)

    return _record("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def vjp(g, out):
        return (mul(broadcast(reshape(g, kept), a.shape), 1.0 / count),)

    return _record("mean", np.mean(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, out):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = tuple(slice(int(lo), int(hi)) if i == axis else slice(None) for i in range(ndim))
            pieces.append(slice_tensor(g, key))
        return tuple(pieces)

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_tensor(a: ArrayLike, key) -> Tensor:
    """Basic (non-fancy) indexing; the adjoint embeds the gradient into zeros."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    try:
        data = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: index {key} invalid for shape {a.shape}: {exc}") from None
    return _record("slice", np.array(data), (a,), lambda g, out: (embed(g, a.shape, key),))


def embed(g: ArrayLike, shape, key) -> Tensor:
    """Place g at key inside a zero tensor of the given shape."""
    g = as_tensor(g)
    data = np.zeros(shape, dtype=DTYPE)
    data[key] = g.data
    return _record("embed", data, (g,), lambda h, out: (slice_tensor(h, key),))


# ---------- elementwise nonlinearities ----------
def relu(a: ArrayLike) -> Tensor:
    """max(a, 0); the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = Tensor._wrap((a.data > 0).astype(DTYPE), "leaf")
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g, out: (mul(g, mask),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("sigmoid", expit(a.data), (a,),
                   lambda g, out: (mul(g, mul(out, sub(1.0, out))),))


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, out):
        s = sigmoid(a)
        return (mul(g, add(s, mul(a, mul(s, sub(1.0, s))))),)

    return _record("silu", a.data * expit(a.data), (a,), vjp)


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("softplus", np.logaddexp(0.0, a.data), (a,), lambda g, out: (mul(g, sigmoid(a)),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("exp", np.exp(a.data), (a,), lambda g, out: (mul(g, out),))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: input of shape {a.shape} has non-positive entries")
    return _record("log", np.log(a.data), (a,), lambda g, out: (div(g, a),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g, out: (mul(g, mul(a, 2.0)),))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: input of shape {a.shape} has negative entries")
    return _record("sqrt", np.sqrt(a.data), (a,), lambda g, out: (div(g, mul(out, 2.0)),))


# ---------- convolution ----------
def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def unfold(x: ArrayLike, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Extract sliding k×k patches (im2col).

    Args:
        x: [B, C, H, W]
    Returns:
        Tensor [B, C*k*k, Ho*Wo]; the adjoint is fold.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold: expected [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, pad), _conv_out(w, kernel, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"unfold: kernel {kernel} with pad {pad} does not fit input {x.shape}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kernel * kernel, ho * wo)
    shape = x.shape
    return _record("unfold", np.ascontiguousarray(cols), (x,),
                   lambda g, out: (fold(g, shape, kernel, stride, pad),))


def fold(cols: ArrayLike, shape, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Scatter-add patches back into an image of the given shape (col2im); the adjoint is unfold."""
    cols = as_tensor(cols)
    b, c, h, w = shape
    ho, wo = _conv_out(h, kernel, stride, pad), _conv_out(w, kernel, stride, pad)
    if cols.shape != (b, c * kernel * kernel, ho * wo):
        raise ShapeError(f"fold: columns {cols.shape} do not match image {tuple(shape)} with kernel {kernel}")
    patches = cols.data.reshape(b, c, kernel, kernel, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    out = out[:, :, pad:pad + h, pad:pad + w]
    return _record("fold", np.ascontiguousarray(out), (cols,),
                   lambda g, o: (unfold(g, kernel, stride, pad),))


def conv2d(x: ArrayLike, weight: ArrayLike, stride: int = 1, pad: int = 0,
           bias: Optional[ArrayLike] = None) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        x: [B, C, H, W] input
        weight: [O, C, k, k] kernel
        stride, pad: spatial stride and symmetric zero padding
        bias: optional [O]

    Returns:
        Tensor [B, O, Ho, Wo]
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} are not conformable")
    b, _, h, w = x.shape
    o, c, k, _ = weight.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    cols = unfold(x, k, stride, pad)
    cols = reshape(transpose(cols, (1, 0, 2)), (c * k * k, b * ho * wo))
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    out = transpose(reshape(out, (o, b, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, o, 1, 1)))
    return out


def upsample_nearest(x: ArrayLike, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of [B, C, H, W] by an integer factor."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    tiled = broadcast(reshape(x, (b, c, h, 1, w, 1)), (b, c, h, factor, w, factor))
    return reshape(tiled, (b, c, h * factor, w * factor))


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """x [B, in] @ weight [in, out] (+ bias [out])."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "silu": silu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "concat": lambda *tensors, axis=0: concat(tensors, axis=axis),
    "slice": slice_tensor,
    "broadcast": broadcast,
    "neg": neg,
    "sigmoid": sigmoid,
    "unfold": unfold,
    "fold": fold,
    "embed": embed,
}


def apply_primitive(op_id: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by identifier, e.g. apply_primitive("conv2d", x, w, stride=2, pad=1)."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive '{op_id}'") from None
    return fn(*inputs, **params)


# ---------- reverse pass ----------
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> Dict[Tensor, Tensor]:
    """
    Gradients of a scalar with respect to the given nodes.

    Args:
        root: scalar Tensor (shape ())
        wrt: nodes to differentiate against
        create_graph: record the reverse pass so the returned gradients are
            themselves differentiable (grad-of-grad)

    Returns:
        dict mapping each wrt node to its gradient; nodes the root does not
        depend on get a zero tensor.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    grads: Dict[int, Tensor] = {id(root): Tensor._wrap(np.ones((), dtype=DTYPE), "leaf")}
    scope = enable_grad if create_graph else no_grad
    with scope():
        for node in reversed(_topological_order(root)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, parent_grad in zip(node.parents, node._vjp(g, node)):
                if not parent.requires_grad:
                    continue
                previous = grads.get(id(parent))
                grads[id(parent)] = parent_grad if previous is None else add(previous, parent_grad)
    result: Dict[Tensor, Tensor] = {}
    for node in wrt:
        g = grads.get(id(node))
        result[node] = g if g is not None else Tensor.zeros(node.shape)
    return result


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """Like backward, but returns the gradients as a list in wrt order."""
    table = backward(root, wrt, create_graph=create_graph)
    return [table[node] for node in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-5) -> float:
    """
    Compare the reverse-mode gradient of a scalar function with central differences.

    f always runs with gradients enabled on inputs that require them, and may
    differentiate internally.

    Returns:
        max over coordinates of |ad - fd| / max(|ad|, |fd|, 1e-8)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(base, requires_grad=True)
    with enable_grad():
        value = f(leaf)
    if not np.all(np.isfinite(value.data)):
        raise GradientCheckError("finite_difference_check: f is not finite at x")
    analytic = grad(value, [leaf])[0].data.reshape(-1)

    worst = 0.0
    with enable_grad():
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] += eps
            f_plus = f(Tensor(shifted.reshape(base.shape), requires_grad=True)).item()
            shifted[i] -= 2 * eps
            f_minus = f(Tensor(shifted.reshape(base.shape), requires_grad=True)).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientCheckError(f"finite_difference_check: f is not finite near coordinate {i}")
            numeric = (f_plus - f_minus) / (2 * eps)
            scale = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / scale)
    logger.debug("finite difference check over %d coordinates: max rel err %.3e", base.size, worst)
    return worst
