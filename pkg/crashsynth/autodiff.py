"""
Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is rebuilt on every forward pass: each operation returns a new
``Tensor`` that remembers its inputs and a closure propagating gradients back
to them. ``backward`` walks the nodes reachable from a scalar loss in reverse
creation order, which is a valid reverse topological order by construction.
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .config import app_config
from .errors import ShapeError
from .validators import require_finite

log = logging.getLogger(__name__)

_node_ids = itertools.count()

OPS: Dict[str, Callable[..., "Tensor"]] = {}


def register_op(kind: str):
    """Register a forward function under its op kind for :func:`forward_op`."""
    def _register(fn):
        OPS[kind] = fn
        return fn
    return _register


class Tensor:
    """
    N-dimensional value node in the differentiation graph.

    Args:
        values: Array-like data, stored as float64
        requires_grad: Whether gradients should be accumulated for this node
        op: Kind of the operation that produced the node (``"leaf"`` for inputs)
        parents: Input nodes of that operation
        backward_fn: Closure mapping the output gradient onto the parents
        name: Optional label used in error messages and checkpoints
    """

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn=None, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        require_finite(self.values, f"op '{op}'")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.name = name
        self.id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(values, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    return value if isinstance(value, Tensor) else Tensor(value)


_grad_enabled = [True]


@contextmanager
def no_grad():
    """Run inference without recording the graph."""
    previous = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = previous


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs_grad = _grad_enabled[0] and any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    require_finite(grad, f"gradient of op '{node.op}'")
    node.grad = grad.copy() if node.grad is None else node.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- Operations ---

@register_op("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def _backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape))

    return _make(values, "matmul", (a, b), _backward)


@register_op("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.values + b.values, "add", (a, b), _backward)


@register_op("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _make(a.values * b.values, "mul", (a, b), _backward)


@register_op("scale")
def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def _backward(g):
        _accumulate(a, g * factor)

    return _make(a.values * factor, "scale", (a,), _backward)


@register_op("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def _backward(g):
        _accumulate(a, g * mask)

    return _make(a.values * mask, "relu", (a,), _backward)


@register_op("silu")
def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.values)

    def _backward(g):
        _accumulate(a, g * s * (1.0 + a.values * (1.0 - s)))

    return _make(a.values * s, "silu", (a,), _backward)


@register_op("softmax_rows")
def softmax_rows(a) -> Tensor:
    """Softmax over the last axis; every row of the output sums to one."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, "softmax_rows", (a,), _backward)


@register_op("log_softmax_rows")
def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def _backward(g):
        _accumulate(a, g - probs * g.sum(axis=-1, keepdims=True))

    return _make(out, "log_softmax_rows", (a,), _backward)


@register_op("layer_norm")
def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    centered = a.values - a.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _backward(g):
        grad = inv_std * (g - g.mean(axis=-1, keepdims=True)
                          - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        _accumulate(a, grad)

    return _make(xhat, "layer_norm", (a,), _backward)


@register_op("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(values, "concat", tensors, _backward)


@register_op("slice")
def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values[index]
    except IndexError as e:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {e}") from None

    def _backward(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, index, g)
        _accumulate(a, grad)

    return _make(np.array(values), "slice", (a,), _backward)


@register_op("reshape")
def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None

    def _backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(values, "reshape", (a,), _backward)


@register_op("transpose")
def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(np.transpose(a.values, axes), "transpose", (a,), _backward)


@register_op("sum")
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(values, "sum", (a,), _backward)


@register_op("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size / max(np.size(values), 1)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape).copy())

    return _make(values, "mean", (a,), _backward)


@register_op("sum_squares")
def sum_squares(a) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        _accumulate(a, 2.0 * a.values * g)

    return _make(np.sum(a.values ** 2), "sum_squares", (a,), _backward)


@register_op("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)

    def _backward(g):
        _accumulate(a, g * out)

    return _make(out, "exp", (a,), _backward)


@register_op("log")
def log_(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)

    def _backward(g):
        _accumulate(a, g / a.values)

    return _make(out, "log", (a,), _backward)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """
    Apply a registered operation by name.

    Args:
        kind: One of the keys of ``OPS``
        *inputs: Input tensors (``concat`` takes a single sequence)
        **attrs: Op attributes such as ``axis`` or ``factor``

    Returns:
        Output tensor recorded in the graph
    """
    if kind not in OPS:
        raise KeyError(f"Unknown op kind '{kind}'; known kinds: {sorted(OPS)}")
    return OPS[kind](*inputs, **attrs)


# --- Graph traversal ---

class ComputationGraph:
    """Nodes reachable from an output, in creation (topological) order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationGraph":
        seen = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen[node.id] = node
            stack.extend(node.parents)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def is_topological(self) -> bool:
        return all(p.id < n.id for n in self.nodes for p in n.parents)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every trainable node reachable from a scalar loss.

    Leaf gradients accumulate across calls; intermediate gradients are reset.

    Args:
        loss: Single-element tensor

    Raises:
        ShapeError: If the loss has more than one element
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputationGraph.from_output(loss)
    for node in graph:
        if node.op != "leaf":
            node.grad = None
    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- Modules ---

class Module:
    """Container that discovers its parameters from attributes."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        found: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                found[full] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found[f"{full}.{i}"] = item
        return found

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ShapeError(f"State is missing parameters: {missing}")
        for name, p in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeError(f"Parameter '{name}': expected shape {p.shape}, got {values.shape}")
            p.values = values.copy()


def uniform_init(rng: np.random.Generator, shape, bound: float, name: Optional[str] = None) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


class Linear(Module):
    """Affine map over the last axis, initialised uniformly in ±1/sqrt(fan_in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = uniform_init(rng, (in_features, out_features), bound)
        self.bias = uniform_init(rng, (out_features,), bound)

    def __call__(self, x) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    """Layer normalisation with learned scale and shift."""

    def __init__(self, width: int):
        self.scale = parameter(np.ones(width))
        self.shift = parameter(np.zeros(width))

    def __call__(self, x) -> Tensor:
        return add(mul(layer_norm(x), self.scale), self.shift)


# --- Optimisation ---

class Adam:
    """
    Adam optimiser over a fixed list of parameters.

    Args:
        params: Trainable tensors
        lr: Step size
        betas: Decay rates of the first and second moment estimates
        eps: Denominator guard
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = app_config.ADAM_BETAS, eps: float = app_config.ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        """Apply one Adam update using the populated gradients."""
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"Adam step: parameters {missing} have no gradient; call backward() first")
        beta1, beta2 = self.betas
        self.step_count += 1
        correction1 = 1.0 - beta1 ** self.step_count
        correction2 = 1.0 - beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad ** 2
            p.values = p.values - self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --- Gradient checking ---

@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    n_checked: int
    worst_parameter: Optional[int]

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
               tolerance: float = 1e-3, step: float = app_config.GRAD_CHECK_STEP) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences.

    Args:
        build_loss: Deterministic callable rebuilding the scalar loss from ``params``
        params: Tensors whose gradients are checked
        tolerance: Pass threshold on the maximum relative error
        step: Finite-difference step

    Returns:
        GradCheckReport with the maximum relative error over every checked entry
    """
    for p in params:
        p.grad = None
    backward(build_loss())
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    worst, worst_param, checked = 0.0, None, 0
    for k, p in enumerate(params):
        for idx in np.ndindex(*p.shape):
            original = p.values[idx]
            p.values[idx] = original + step
            plus = build_loss().item()
            p.values[idx] = original - step
            minus = build_loss().item()
            p.values[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[k][idx]
            denom = max(abs(exact), abs(numeric), app_config.GRAD_CHECK_FLOOR)
            error = abs(exact - numeric) / denom
            checked += 1
            if error > worst:
                worst, worst_param = error, k
    log.debug("grad_check: %d entries, max relative error %.3e", checked, worst)
    return GradCheckReport(worst, tolerance, checked, worst_param)
