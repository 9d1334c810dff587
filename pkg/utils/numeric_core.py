"""
Dense float64 tensors with reverse-mode automatic differentiation,
a central finite-difference gradient oracle and the AdamW update rule.

Every operation returns a new immutable ``Tensor`` that remembers its parents
and a backward function mapping the output gradient to one gradient per
parent. Gradients are accumulated in a side table during ``backpropagate`` so
a graph can be differentiated any number of times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from utils.errors import FrozenParameterError, GraphError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)


def _checked(array) -> np.ndarray:
    """Return a read-only float64 copy of ``array``; reject NaN/Inf."""
    if isinstance(array, np.ndarray) and array.dtype == np.float64 and not array.flags.writeable:
        data = array
    else:
        data = np.array(array, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("tensor contains NaN or Inf")
    data.setflags(write=False)
    return data


class Tensor:
    """Immutable float64 array that doubles as a node of the computation graph.

    ``op`` tags the operation that produced the value, ``parents`` are the
    input nodes and ``backward`` maps the output gradient to one gradient per
    parent. Leaves created from a ParamSet carry the parameter ``name``.
    """

    __slots__ = ("data", "op", "parents", "backward", "name", "requires_grad")

    def __init__(self, data, op="const", parents=(), backward=None, name=None, requires_grad=None):
        self.data = _checked(data)
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        if requires_grad is None:
            requires_grad = any(parent.requires_grad for parent in self.parents)
        self.requires_grad = bool(requires_grad)
        self.backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

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
        return neg(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand(grad, shape, axis, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


# ── Elementwise ───────────────────────────────────────────────────────────────

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, "add", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, "sub", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, "mul", (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data / b.data, "div", (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


# ── Shape and reductions ──────────────────────────────────────────────────────

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def total(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,),
                  lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ValidationError("mean over an empty extent")
    return div(total(a, axis=axis, keepdims=keepdims), float(count))


def max_along(a, axis=-1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValidationError("max over an empty extent")
    winners = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    value = np.take_along_axis(a.data, winners, axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, winners, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor(value, "max", (a,), backward)


def logsumexp(a, axis=-1) -> Tensor:
    """Stable log-sum-exp along ``axis`` (the maximum is subtracted first)."""
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    summed = shifted.sum(axis=axis, keepdims=True)
    value = (peak + np.log(summed)).squeeze(axis)
    softmax = shifted / summed
    return Tensor(value, "logsumexp", (a,), lambda g: (softmax * np.expand_dims(g, axis),))


def l2_normalize(a, axis) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors stay zero."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    out = a.data / safe

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(nonzero, (g - out * radial) / safe, 0.0),)

    return Tensor(out, "l2_normalize", (a,), backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must survive in the output or the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    left, right = inputs.split(",")
    for own, other in ((left, right), (right, left)):
        if len(set(own)) != len(own):
            raise ValidationError(f"repeated index in einsum operand {own!r}")
        for letter in own:
            if letter not in out and letter not in other:
                raise ValidationError(f"einsum index {letter!r} is summed within one operand")
    value = np.einsum(subscripts, a.data, b.data)
    return Tensor(value, "einsum", (a, b),
                  lambda g: (np.einsum(f"{out},{right}->{left}", g, b.data),
                             np.einsum(f"{left},{out}->{right}", a.data, g)))


def channel_layernorm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise the channel vector at every spatial location, then scale and shift.

    ``x`` is C×H×W, optionally with leading batch axes; ``gamma`` and ``beta``
    have length C.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValidationError(f"layernorm eps must be positive, got {eps}")
    if x.ndim < 3:
        raise ValidationError(f"layernorm input must be C×H×W, got shape {x.shape}")
    channels = x.shape[-3]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValidationError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {channels} channels"
        )
    mu = mean(x, axis=-3, keepdims=True)
    centered = x - mu
    variance = mean(centered * centered, axis=-3, keepdims=True)
    normed = centered / sqrt(variance + eps)
    return normed * reshape(gamma, (channels, 1, 1)) + reshape(beta, (channels, 1, 1))


# ── Backward pass ─────────────────────────────────────────────────────────────

def _topological_order(root: Tensor) -> list:
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at node {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            if state.get(id(parent)) != 2:
                stack.append((parent, False))
    return order


def backpropagate(root: Tensor) -> dict:
    """Gradient of the scalar ``root`` for every node that requires one, keyed by ``id(node)``."""
    if root.data.size != 1:
        raise GraphError(f"gradient root must be scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topological_order(root)):
        grad = grads.get(id(node))
        if grad is None or node.backward is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward(grad)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return grads


# ── Parameters and optimizer ──────────────────────────────────────────────────

@dataclass(frozen=True)
class MomentState:
    first: np.ndarray
    second: np.ndarray
    step: int = 0


class ParamSet:
    """Named parameters with trainable flags and per-parameter AdamW state.

    Build a graph from ``leaf(name)`` of one ParamSet instance and ask that
    same instance for gradients; derived sets (``with_value``,
    ``with_trainable``) hand out fresh leaves.
    """

    def __init__(self, values: dict, trainable: dict = None, state: dict = None):
        self.values = {name: _checked(value) for name, value in values.items()}
        trainable = trainable if trainable is not None else {}
        unknown = set(trainable) - set(self.values)
        if unknown:
            raise ValidationError(f"trainable flags for unknown parameters: {sorted(unknown)}")
        self.trainable = {name: bool(trainable.get(name, True)) for name in self.values}
        if state is None:
            state = {
                name: MomentState(np.zeros(value.shape), np.zeros(value.shape), 0)
                for name, value in self.values.items()
            }
        for name, value in self.values.items():
            moments = state.get(name)
            if moments is None:
                raise ValidationError(f"missing optimizer state for {name!r}")
            if moments.first.shape != value.shape or moments.second.shape != value.shape:
                raise ValidationError(f"optimizer moments for {name!r} do not match shape {value.shape}")
            if moments.step < 0:
                raise ValidationError(f"negative step count for {name!r}")
        self.state = dict(state)
        self._leaves = {}

    def names(self) -> list:
        return list(self.values)

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name) -> bool:
        return name in self.values

    def leaf(self, name) -> Tensor:
        if name not in self._leaves:
            self._leaves[name] = Tensor(self.values[name], op="param", name=name,
                                        requires_grad=self.trainable[name])
        return self._leaves[name]

    def with_value(self, name, value) -> "ParamSet":
        values = dict(self.values)
        values[name] = value
        return ParamSet(values, self.trainable, self.state)

    def with_trainable(self, flags: dict) -> "ParamSet":
        trainable = dict(self.trainable)
        trainable.update(flags)
        return ParamSet(self.values, trainable, self.state)


def reverse_mode_gradients(root: Tensor, params: ParamSet) -> dict:
    """d(root)/d(param) for every trainable parameter; frozen ones are left out."""
    grads = backpropagate(root)
    result = {}
    for name in params.names():
        if not params.trainable[name]:
            continue
        grad = grads.get(id(params.leaf(name)))
        result[name] = np.zeros(params[name].shape) if grad is None else np.array(grad, dtype=np.float64)
    return result


def adamw_step(params: ParamSet, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.95,
               eps: float = 1e-8, weight_decay: float = 0.05) -> ParamSet:
    """One AdamW update with decoupled weight decay and bias-corrected moments."""
    if lr < 0 or weight_decay < 0 or eps <= 0:
        raise ValidationError(f"invalid AdamW hyperparameters lr={lr} eps={eps} weight_decay={weight_decay}")
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValidationError(f"AdamW betas must lie in (0, 1), got ({beta1}, {beta2})")
    for name, grad in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if not params.trainable[name]:
            raise FrozenParameterError(f"gradient supplied for frozen parameter {name!r}")
        if np.shape(grad) != params[name].shape:
            raise ValidationError(f"gradient shape {np.shape(grad)} does not match {name!r} {params[name].shape}")
    missing = [name for name in params.names() if params.trainable[name] and name not in grads]
    if missing:
        raise ValidationError(f"no gradient for trainable parameters {missing}")

    values = dict(params.values)
    state = dict(params.state)
    for name in params.names():
        if not params.trainable[name]:
            continue
        grad = np.asarray(grads[name], dtype=np.float64)
        moments = params.state[name]
        step = moments.step + 1
        first = beta1 * moments.first + (1 - beta1) * grad
        second = beta2 * moments.second + (1 - beta2) * grad * grad
        first_hat = first / (1 - beta1 ** step)
        second_hat = second / (1 - beta2 ** step)
        theta = params[name]
        theta = theta - lr * weight_decay * theta
        theta = theta - lr * first_hat / (np.sqrt(second_hat) + eps)
        values[name] = theta
        state[name] = MomentState(first, second, step)
    return ParamSet(values, params.trainable, state)


# ── Finite differences ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GradientMismatch:
    name: str
    index: tuple
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradientCheckReport:
    tol: float
    max_relative_error: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)


def _loss_value(loss) -> float:
    value = loss.item() if isinstance(loss, Tensor) else float(loss)
    if not np.isfinite(value):
        raise NonFiniteError("loss is not finite at a perturbed point")
    return value


def finite_difference_check(loss_fn, params: ParamSet, h: float = 1e-6, tol: float = 1e-4,
                            atol: float = 1e-9) -> GradientCheckReport:
    """Compare reverse-mode gradients with central differences, entry by entry.

    ``loss_fn`` maps a ParamSet to a scalar Tensor. An entry fails when its
    relative error |a−f| / max(|a|, |f|, 1e-8) exceeds ``tol`` and its
    absolute difference exceeds ``atol``. Entries within ``atol`` do not count
    toward the reported worst relative error.
    """
    if h <= 0 or tol <= 0:
        raise ValidationError(f"finite-difference step and tolerance must be positive (h={h}, tol={tol})")
    analytic = reverse_mode_gradients(loss_fn(params), params)
    report = GradientCheckReport(tol=tol)
    for name, grad in analytic.items():
        base = params[name]
        worst = 0.0
        for index in np.ndindex(base.shape):
            plus = np.array(base)
            plus[index] += h
            minus = np.array(base)
            minus[index] -= h
            numeric = (_loss_value(loss_fn(params.with_value(name, plus)))
                       - _loss_value(loss_fn(params.with_value(name, minus)))) / (2 * h)
            value = float(grad[index])
            difference = abs(value - numeric)
            relative = difference / max(abs(value), abs(numeric), 1e-8)
            report.checked += 1
            if difference <= atol:
                continue
            worst = max(worst, relative)
            if relative > tol:
                report.failures.append(GradientMismatch(name, index, value, numeric, relative))
        report.max_relative_error[name] = worst
    logger.debug("gradient check: %d entries, worst relative error %.3e", report.checked, report.worst)
    return report
