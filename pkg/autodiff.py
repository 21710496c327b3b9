#!/usr/bin/env python3
"""
Reverse-Mode Automatic Differentiation

Dense numpy tensors, a catalog of primitives with registered backward rules,
graphs over a named parameter registry, a finite-difference gradient checker
and the binary parameter checkpoint format.

Training runs keep parameters in float32; gradient checks copy the graph to
float64. Broadcasting is limited to the second operand of the element-wise
binary primitives, which must line up with the trailing dimensions of the
first operand (dimensions equal or 1), or be a single element.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple
import json
import logging
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<Q")


class ShapeError(ValueError):
    """Raised when operand shapes do not fit a primitive or a graph input."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class NonFiniteError(ArithmeticError):
    """Raised when a node value or a gradient is NaN or infinite."""

    def __init__(self, node: str, message: str = "non-finite values"):
        super().__init__(f"{node}: {message}")
        self.node = node


class CheckpointError(ValueError):
    """Raised for malformed parameter checkpoint files."""


class Tensor:
    """A node of the differentiation graph: a value plus the op that made it."""

    __slots__ = ("data", "op", "parents", "attrs", "name")

    def __init__(self, data: np.ndarray, op: str = "constant",
                 parents: Tuple['Tensor', ...] = (), attrs: Optional[Dict[str, Any]] = None,
                 name: Optional[str] = None):
        self.data = data
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def label(self) -> str:
        return self.name or self.op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __sub__(self, other: 'Tensor') -> 'Tensor':
        return sub(self, other)

    def __mul__(self, other: 'Tensor') -> 'Tensor':
        return multiply(self, other)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, name={self.name}, shape={self.shape}, dtype={self.dtype})"


def constant(value, dtype=None, name: Optional[str] = None) -> Tensor:
    """Wrap an array as a non-trainable leaf."""
    data = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    if data.dtype.kind != "f":
        data = data.astype(np.float64)
    return Tensor(data, op="constant", name=name)


# ---------------------------------------------------------------------------
# Primitive catalog
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    """Forward and backward rule of one primitive.

    backward(grad, out, *inputs, **attrs) returns one gradient per input
    (None for inputs that are not differentiable).
    """
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Callable) -> Primitive:
    primitive = Primitive(name, forward, backward)
    PRIMITIVES[name] = primitive
    return primitive


def apply(op: str, *inputs: Tensor, name: Optional[str] = None, **attrs) -> Tensor:
    """Evaluate a primitive on tensors and record the node."""
    primitive = PRIMITIVES[op]
    label = name or op
    try:
        out = primitive.forward(*[t.data for t in inputs], **attrs)
    except ShapeError as e:
        raise ShapeError(label, str(e)) from None
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(label, f"non-finite output of shape {out.shape}")
    return Tensor(out, op=op, parents=tuple(inputs), attrs=attrs, name=name)


def _suffix_compatible(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> bool:
    """b aligns with the trailing dims of a, each dim equal or 1 (per-channel biases)."""
    if a_shape == b_shape:
        return True
    if int(np.prod(b_shape)) == 1 and len(b_shape) <= 1:
        return True
    if not 0 < len(b_shape) <= len(a_shape):
        return False
    tail = a_shape[len(a_shape) - len(b_shape):]
    return all(b == a or b == 1 for a, b in zip(tail, b_shape)) and b_shape[0] == tail[0]


def _check_binary(op: str, a: np.ndarray, b: np.ndarray):
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} are not aligned")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    lead = grad.ndim - len(shape)
    grad = grad.sum(axis=tuple(range(lead)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    return grad.sum(axis=ones, keepdims=True) if ones else grad


def _add_fwd(a, b):
    _check_binary("add", a, b)
    return a + b


def _add_bwd(g, out, a, b):
    return g, _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_binary("sub", a, b)
    return a - b


def _sub_bwd(g, out, a, b):
    return g, -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _check_binary("multiply", a, b)
    return a * b


def _mul_bwd(g, out, a, b):
    return g * b, _unbroadcast(g * a, b.shape)


def _scale_fwd(x, factor):
    return x * np.asarray(factor, dtype=x.dtype)


def _scale_bwd(g, out, x, factor):
    return (g * np.asarray(factor, dtype=x.dtype),)


def _shift_fwd(x, value):
    return x + np.asarray(value, dtype=x.dtype)


def _shift_bwd(g, out, x, value):
    return (g,)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    return g @ b.T, a.T @ g


def _conv_windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(padded, (kh, kw), axis=(2, 3))


def _conv2d_fwd(x, k):
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} does not match kernel {k.shape}")
    if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
        raise ShapeError("conv2d", f"kernel {k.shape} must have odd spatial size")
    windows = _conv_windows(x, k.shape[2], k.shape[3])
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_bwd(g, out, x, k):
    kh, kw = k.shape[2], k.shape[3]
    windows = _conv_windows(x, kh, kw)
    grad_k = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_windows = _conv_windows(g, kh, kw)
    flipped = k[:, :, ::-1, ::-1]
    grad_x = np.tensordot(grad_windows, flipped, axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), grad_k


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(b, c, h // 2, w // 2, 4)


def _maxpool_fwd(x):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x2", f"input {x.shape} needs even spatial size")
    return _pool_blocks(x).max(axis=-1)


def _maxpool_bwd(g, out, x):
    blocks = _pool_blocks(x)
    winner = blocks.argmax(axis=-1)
    routed = np.zeros(blocks.shape, dtype=g.dtype)
    np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
    b, c, h2, w2, _ = routed.shape
    routed = routed.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return (routed.reshape(x.shape),)


def _relu_fwd(x):
    return np.maximum(x, 0)


def _relu_bwd(g, out, x):
    return (g * (x > 0),)


def _sigmoid_fwd(x):
    return expit(x)


def _sigmoid_bwd(g, out, x):
    return (g * out * (1 - out),)


def _tanh_fwd(x):
    return np.tanh(x)


def _tanh_bwd(g, out, x):
    return (g * (1 - out * out),)


def _softmax_fwd(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_bwd(g, out, x, axis=-1):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _exp_fwd(x):
    return np.exp(x)


def _exp_bwd(g, out, x):
    return (g * out,)


def _log_fwd(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _log_bwd(g, out, x):
    return (g / x,)


def _abs_fwd(x):
    return np.abs(x)


def _abs_bwd(g, out, x):
    return (g * np.sign(x),)


def _sqrt_fwd(x):
    with np.errstate(invalid="ignore"):
        return np.sqrt(x)


def _sqrt_bwd(g, out, x):
    return (g / (2 * out),)


def _cos_fwd(x):
    return np.cos(x)


def _cos_bwd(g, out, x):
    return (-g * np.sin(x),)


def _sin_fwd(x):
    return np.sin(x)


def _sin_bwd(g, out, x):
    return (g * np.cos(x),)


def _max_scalar_fwd(x, value):
    return np.maximum(x, np.asarray(value, dtype=x.dtype))


def _max_scalar_bwd(g, out, x, value):
    # ties go to the scalar branch
    return (g * (x > value),)


def _sum_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)


def _expand_reduced(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _sum_bwd(g, out, x, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, x, axis, keepdims)),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)


def _mean_bwd(g, out, x, axis=None, keepdims=False):
    count = x.size // max(out.size, 1)
    return (np.array(_expand_reduced(g, x, axis, keepdims)) / count,)


def _concat_fwd(*xs, axis=0):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ShapeError("concatenate", f"cannot concatenate {ref} with {x.shape} on axis {axis}")
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, out, *xs, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_fwd(x, key):
    return np.array(x[key])


def _slice_bwd(g, out, x, key):
    grad = np.zeros_like(x)
    grad[key] = g
    return (grad,)


def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None


def _reshape_bwd(g, out, x, shape):
    return (g.reshape(x.shape),)


def _lstm_gates(x, h, wx, wh, b):
    hidden = h.shape[1]
    z = x @ wx + h @ wh + b
    i = expit(z[:, :hidden])
    f = expit(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = expit(z[:, 3 * hidden:])
    return i, f, g, o


def _lstm_fwd(x, h, c, wx, wh, b):
    hidden = h.shape[1]
    if (x.ndim != 2 or wx.shape != (x.shape[1], 4 * hidden) or wh.shape != (hidden, 4 * hidden)
            or b.shape != (4 * hidden,) or c.shape != h.shape or x.shape[0] != h.shape[0]):
        raise ShapeError("lstm_cell", f"x {x.shape}, h {h.shape}, c {c.shape}, wx {wx.shape}, "
                                      f"wh {wh.shape}, b {b.shape} are inconsistent")
    i, f, g, o = _lstm_gates(x, h, wx, wh, b)
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return np.concatenate([h_next, c_next], axis=1)


def _lstm_bwd(grad, out, x, h, c, wx, wh, b):
    hidden = h.shape[1]
    i, f, g, o = _lstm_gates(x, h, wx, wh, b)
    c_next = out[:, hidden:]
    tanh_c = np.tanh(c_next)
    grad_h, grad_c = grad[:, :hidden], grad[:, hidden:]
    dc = grad_c + grad_h * o * (1 - tanh_c * tanh_c)
    dz = np.concatenate([
        dc * g * i * (1 - i),
        dc * c * f * (1 - f),
        dc * i * (1 - g * g),
        grad_h * tanh_c * o * (1 - o),
    ], axis=1)
    return dz @ wx.T, dz @ wh.T, dc * f, x.T @ dz, h.T @ dz, dz.sum(axis=0)


def _bce_fwd(y, t):
    if y.shape != t.shape:
        raise ShapeError("bce_logits", f"logits {y.shape} and targets {t.shape} differ")
    return np.maximum(y, 0) - y * t + np.log1p(np.exp(-np.abs(y)))


def _bce_bwd(g, out, y, t):
    return g * (expit(y) - t), None


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("multiply", _mul_fwd, _mul_bwd)
register_primitive("scale", _scale_fwd, _scale_bwd)
register_primitive("shift", _shift_fwd, _shift_bwd)
register_primitive("matmul", _matmul_fwd, _matmul_bwd)
register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)
register_primitive("maxpool2x2", _maxpool_fwd, _maxpool_bwd)
register_primitive("relu", _relu_fwd, _relu_bwd)
register_primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_primitive("tanh", _tanh_fwd, _tanh_bwd)
register_primitive("softmax", _softmax_fwd, _softmax_bwd)
register_primitive("exp", _exp_fwd, _exp_bwd)
register_primitive("log", _log_fwd, _log_bwd)
register_primitive("abs", _abs_fwd, _abs_bwd)
register_primitive("sqrt", _sqrt_fwd, _sqrt_bwd)
register_primitive("cos", _cos_fwd, _cos_bwd)
register_primitive("sin", _sin_fwd, _sin_bwd)
register_primitive("max_scalar", _max_scalar_fwd, _max_scalar_bwd)
register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("mean", _mean_fwd, _mean_bwd)
register_primitive("concatenate", _concat_fwd, _concat_bwd)
register_primitive("slice", _slice_fwd, _slice_bwd)
register_primitive("reshape", _reshape_fwd, _reshape_bwd)
register_primitive("lstm_cell", _lstm_fwd, _lstm_bwd)
register_primitive("bce_logits", _bce_fwd, _bce_bwd)


# Functional API -------------------------------------------------------------

def add(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("add", a, b, name=name)


def sub(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("sub", a, b, name=name)


def multiply(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("multiply", a, b, name=name)


def scale(x: Tensor, factor: float, name: Optional[str] = None) -> Tensor:
    return apply("scale", x, name=name, factor=float(factor))


def shift(x: Tensor, value: float, name: Optional[str] = None) -> Tensor:
    return apply("shift", x, name=name, value=float(value))


def matmul(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("matmul", a, b, name=name)


def conv2d(x: Tensor, kernel: Tensor, name: Optional[str] = None) -> Tensor:
    """Stride-1 convolution with zero padding that keeps the spatial size."""
    return apply("conv2d", x, kernel, name=name)


def maxpool2x2(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("maxpool2x2", x, name=name)


def relu(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("relu", x, name=name)


def sigmoid(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("sigmoid", x, name=name)


def tanh(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("tanh", x, name=name)


def softmax(x: Tensor, axis: int = -1, name: Optional[str] = None) -> Tensor:
    return apply("softmax", x, name=name, axis=axis)


def exp(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("exp", x, name=name)


def log(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("log", x, name=name)


def absolute(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("abs", x, name=name)


def sqrt(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("sqrt", x, name=name)


def cos(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("cos", x, name=name)


def sin(x: Tensor, name: Optional[str] = None) -> Tensor:
    return apply("sin", x, name=name)


def maximum_scalar(x: Tensor, value: float, name: Optional[str] = None) -> Tensor:
    return apply("max_scalar", x, name=name, value=float(value))


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False,
               name: Optional[str] = None) -> Tensor:
    return apply("sum", x, name=name, axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False,
                name: Optional[str] = None) -> Tensor:
    return apply("mean", x, name=name, axis=axis, keepdims=keepdims)


def concatenate(xs: Sequence[Tensor], axis: int = 0, name: Optional[str] = None) -> Tensor:
    return apply("concatenate", *xs, name=name, axis=axis)


def slice_tensor(x: Tensor, key, name: Optional[str] = None) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_tensor(x, (slice(None), 0))``."""
    return apply("slice", x, name=name, key=key)


def reshape(x: Tensor, shape: Tuple[int, ...], name: Optional[str] = None) -> Tensor:
    return apply("reshape", x, name=name, shape=tuple(shape))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
              name: Optional[str] = None) -> Tensor:
    """One LSTM step (gate order input, forget, cell, output).

    Returns the next hidden and cell state concatenated on axis 1.
    """
    return apply("lstm_cell", x, h, c, wx, wh, b, name=name)


def bce_logits(logits: Tensor, targets: Tensor, name: Optional[str] = None) -> Tensor:
    """Element-wise max(y, 0) - y*t + log(1 + exp(-|y|))."""
    return apply("bce_logits", logits, targets, name=name)


def dense(x: Tensor, weight: Tensor, bias: Tensor, name: Optional[str] = None) -> Tensor:
    return add(matmul(x, weight), bias, name=name)


# ---------------------------------------------------------------------------
# Parameters and graphs
# ---------------------------------------------------------------------------

class ParameterRegistry:
    """Named trainable leaves. Each parameter is registered exactly once."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"Parameter {name} is already registered")
        tensor = Tensor(np.array(value, dtype=self.dtype), op="parameter", name=name)
        self._params[name] = tensor
        return tensor

    def attach(self, tensor: Tensor):
        """Register an existing parameter tensor (shared storage)."""
        if tensor.name in self._params:
            raise ValueError(f"Parameter {tensor.name} is already registered")
        self._params[tensor.name] = tensor

    @classmethod
    def union(cls, registries: Sequence['ParameterRegistry']) -> 'ParameterRegistry':
        dtypes = {r.dtype for r in registries}
        merged = cls(dtypes.pop() if len(dtypes) == 1 else np.float32)
        for registry in registries:
            for tensor in registry.tensors():
                merged.attach(tensor)
        return merged

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, tensor in self._params.items():
            if name not in state:
                raise KeyError(f"Missing parameter {name} in state")
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(name, f"expected {tensor.shape}, got {value.shape}")
            tensor.data[...] = value

    def astype(self, dtype) -> 'ParameterRegistry':
        """Copy of the registry in another precision (fresh storage)."""
        copy = ParameterRegistry(dtype)
        for name, tensor in self._params.items():
            copy.add(name, tensor.data)
        return copy


@dataclass
class ForwardContext:
    """Per-evaluation state handed to graph builders."""
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    training: bool = True


GraphBuilder = Callable[[Dict[str, Tensor], ParameterRegistry, ForwardContext], Dict[str, Tensor]]


class Graph:
    """A program over primitives: a builder callable plus its parameter registry.

    input_shapes maps each input name to its shape; None entries are free
    (batch) dimensions.
    """

    def __init__(self, build: GraphBuilder, parameters: ParameterRegistry,
                 input_shapes: Optional[Dict[str, Tuple[Optional[int], ...]]] = None,
                 name: str = "graph"):
        self.build = build
        self.parameters = parameters
        self.input_shapes = input_shapes
        self.name = name

    @property
    def dtype(self):
        return self.parameters.dtype

    def astype(self, dtype) -> 'Graph':
        return Graph(self.build, self.parameters.astype(dtype), self.input_shapes, self.name)

    def nodes(self, outputs: Dict[str, Tensor]) -> List[Tensor]:
        """Topologically ordered nodes reachable from the outputs."""
        order: List[Tensor] = []
        seen = set()
        for root in outputs.values():
            order.extend(n for n in topological_order(root) if id(n) not in seen)
            seen.update(id(n) for n in order)
        return order


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root, every node after all of its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_input_shape(graph: Graph, name: str, shape: Tuple[int, ...]):
    expected = graph.input_shapes[name]
    if len(expected) != len(shape) or any(e is not None and e != s for e, s in zip(expected, shape)):
        raise ShapeError(f"{graph.name}:{name}", f"expected shape {expected}, got {shape}")


def forward(graph: Graph, inputs: Dict[str, Any],
            rng: Optional[np.random.Generator] = None, training: bool = True) -> Dict[str, Tensor]:
    """Evaluate the graph. Parameters are read, never written."""
    if graph.input_shapes is not None:
        missing = set(graph.input_shapes) - set(inputs)
        unknown = set(inputs) - set(graph.input_shapes)
        if missing or unknown:
            raise ShapeError(graph.name, f"missing inputs {sorted(missing)}, unknown inputs {sorted(unknown)}")
    leaves: Dict[str, Tensor] = {}
    for name, value in inputs.items():
        data = value.data if isinstance(value, Tensor) else value
        data = np.asarray(data, dtype=graph.dtype)
        if graph.input_shapes is not None:
            _check_input_shape(graph, name, data.shape)
        leaves[name] = Tensor(data, op="input", name=name)
    ctx = ForwardContext(rng=rng if rng is not None else np.random.default_rng(0), training=training)
    return graph.build(leaves, graph.parameters, ctx)


def backpropagate(loss: Tensor) -> Dict[int, np.ndarray]:
    """Gradients of a scalar node with respect to every node it depends on, keyed by id."""
    if loss.size != 1:
        raise ShapeError(loss.label, f"loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        grad = grads.get(id(node))
        if grad is None or not node.parents:
            continue
        primitive = PRIMITIVES[node.op]
        parent_grads = primitive.backward(grad, node.data, *[p.data for p in node.parents], **node.attrs)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or parent.op in ("constant", "input"):
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    return grads


def gradients(graph_or_parameters, loss: Tensor) -> Dict[str, np.ndarray]:
    """dLoss/dParameter for every registered parameter.

    Parameters the loss does not reach get a zero gradient.
    """
    parameters = graph_or_parameters.parameters if isinstance(graph_or_parameters, Graph) else graph_or_parameters
    grads = backpropagate(loss)
    result = {}
    for name, tensor in parameters.items():
        grad = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if grad is None else grad
    return result


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    """Max relative error between analytic and central-difference gradients."""
    per_parameter: Dict[str, float]
    max_error: float
    tolerance: float
    checked_entries: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_parameter": self.per_parameter,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "checked_entries": self.checked_entries,
            "passed": self.passed,
        }


def finite_difference_check(graph: Graph, inputs: Dict[str, Any], loss_output: str = "loss",
                            tolerance: float = 1e-4, step: float = 1e-5,
                            max_entries: Optional[int] = None, seed: int = 0) -> GradientCheckReport:
    """Compare analytic gradients with 64-bit central differences.

    Every forward pass gets a generator with the same seed so stochastic
    nodes draw identical values. With max_entries set, that many entries per
    parameter are sampled instead of checking all of them.
    """
    graph64 = graph.astype(np.float64)

    def evaluate() -> Dict[str, Tensor]:
        return forward(graph64, inputs, rng=np.random.default_rng(seed))

    loss = evaluate()[loss_output]
    analytic = gradients(graph64, loss)
    picker = np.random.default_rng(seed + 1)
    per_parameter: Dict[str, float] = {}
    checked = 0
    for name, tensor in graph64.parameters.items():
        flat = tensor.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(picker.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        worst = 0.0
        grad_flat = analytic[name].reshape(-1)
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + step
            plus = evaluate()[loss_output].item()
            flat[idx] = original - step
            minus = evaluate()[loss_output].item()
            flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            a = float(grad_flat[idx])
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, error)
        per_parameter[name] = worst
        checked += len(entries)
    max_error = max(per_parameter.values(), default=0.0)
    logger.debug(f"Gradient check of {graph.name}: max relative error {max_error:.3e} over {checked} entries")
    return GradientCheckReport(per_parameter, max_error, tolerance, checked)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_parameters(parameters: ParameterRegistry, path: str):
    """Write a JSON header plus the little-endian payload in registry order."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "precision": "float64" if parameters.dtype == np.float64 else "float32",
        "names": parameters.names(),
        "shapes": [list(t.shape) for t in parameters.tensors()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    little = "<f8" if parameters.dtype == np.float64 else "<f4"
    try:
        with open(path, "wb") as f:
            f.write(_HEADER_LEN.pack(len(header_bytes)))
            f.write(header_bytes)
            for tensor in parameters.tensors():
                f.write(np.ascontiguousarray(tensor.data, dtype=little).tobytes())
    except OSError as e:
        raise OSError(f"Could not write parameter checkpoint {path}: {e}") from e


def _read_checkpoint(path: str) -> Tuple[Dict[str, Any], bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"Parameter checkpoint not found: {path}")
    if len(raw) < _HEADER_LEN.size:
        raise CheckpointError(f"{path}: file too short for a header")
    (length,) = _HEADER_LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_HEADER_LEN.size:_HEADER_LEN.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: invalid header: {e}")
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, raw[_HEADER_LEN.size + length:]


def load_parameters(path: str) -> ParameterRegistry:
    """Read a checkpoint written by save_parameters."""
    header, payload = _read_checkpoint(path)
    dtype = np.float64 if header["precision"] == "float64" else np.float32
    little = "<f8" if dtype == np.float64 else "<f4"
    itemsize = np.dtype(little).itemsize
    expected = sum(int(np.prod(s)) for s in header["shapes"]) * itemsize
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header describes {expected}")
    registry = ParameterRegistry(dtype)
    offset = 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        values = np.frombuffer(payload, dtype=little, count=n, offset=offset).reshape(shape)
        registry.add(name, values)
        offset += n * itemsize
    return registry
