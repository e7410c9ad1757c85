#!/usr/bin/env python3

"""
This module contains a small dense tensor library with reverse-mode automatic differentiation.

Every value is a float64 numpy array. Operations are :class:`Function` subclasses that record their
inputs when any input requires a gradient, so calling :meth:`Tensor.backward` on a scalar walks the
recorded graph once in reverse topological order. Broadcasting is limited to adding or multiplying a
tensor whose shape is a trailing part of the other operand's shape (bias-add over the last axes).
"""
import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from coherence_lab.errors import ContractError, DimensionError, InvalidCheckError, NumericError, TargetError, \
    VocabError

_node_ids = itertools.count()


class Tensor:
    """
    Dense float64 tensor with an optional gradient slot.

    Tensors created by the user are leaves; their ``grad`` is filled by :meth:`backward`. Gradients
    accumulate over repeated backward calls until :meth:`zero_grad` is called.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = None
        self.node_id = next(_node_ids)

    @classmethod
    def _from_op(cls, data, requires_grad, ctx):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._ctx = ctx
        out.node_id = next(_node_ids)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._ctx is None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        """Copy of the values with no graph attached (safe to hand to another thread)."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """
        Back-propagates from this scalar through the recorded graph.

        Leaf tensors that require a gradient receive it in ``grad``; an existing ``grad`` is added to.
        :raises ContractError: if the tensor is not a scalar.
        """
        if self.data.size != 1:
            raise ContractError(f'backward needs a scalar loss, got shape {self.shape}')

        graph = build_graph(self)
        pending = {self.node_id: np.ones_like(self.data)}
        for node in reversed(graph.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + parent_grad
                else:
                    pending[parent.node_id] = parent_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Graph:
    """Tensors reachable from a root, in topological order (inputs before outputs)."""
    nodes: List[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def functions(self, kind):
        return [n._ctx for n in self.nodes if isinstance(n._ctx, kind)]


def build_graph(root: Tensor) -> Graph:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.node_id not in visited:
                    stack.append((parent, False))
    return Graph(order)


class Function:
    """
    A differentiable operation.

    ``forward`` receives the input arrays (plus keyword options) and may keep what backward needs on
    ``self``; ``backward`` returns one gradient per tensor input, ``None`` where no gradient flows.
    """

    def __init__(self, parents, options):
        self.parents = parents
        self.options = options

    @classmethod
    def apply(cls, *inputs, **options):
        parents = tuple(as_tensor(t) for t in inputs)
        ctx = cls(parents, options)
        out = np.asarray(ctx.forward(*[p.data for p in parents], **options), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericError(f'{cls.__name__} produced non-finite values')
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor._from_op(out, requires_grad, ctx if requires_grad else None)

    def needs_grad(self, idx):
        return self.parents[idx].requires_grad

    def forward(self, *arrays, **options):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _check_trailing(shape_a, shape_b, op):
    if len(shape_b) > len(shape_a) or tuple(shape_a[len(shape_a) - len(shape_b):]) != tuple(shape_b):
        raise DimensionError(f'{op}: shape {shape_b} is not a trailing part of {shape_a}')


def _sum_to_shape(grad, shape):
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad


class Add(Function):
    def forward(self, a, b):
        _check_trailing(a.shape, b.shape, 'add')
        return a + b

    def backward(self, grad):
        return grad, _sum_to_shape(grad, self.parents[1].shape)


class Sub(Function):
    def forward(self, a, b):
        _check_trailing(a.shape, b.shape, 'sub')
        return a - b

    def backward(self, grad):
        return grad, -_sum_to_shape(grad, self.parents[1].shape)


class Mul(Function):
    def forward(self, a, b):
        _check_trailing(a.shape, b.shape, 'mul')
        return a * b

    def backward(self, grad):
        a, b = (p.data for p in self.parents)
        grad_a = grad * b if self.needs_grad(0) else None
        grad_b = _sum_to_shape(grad * a, b.shape) if self.needs_grad(1) else None
        return grad_a, grad_b


class Scale(Function):
    def forward(self, x, factor):
        return x * factor

    def backward(self, grad):
        return (grad * self.options['factor'],)


class MatMul(Function):
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with identical leading axes."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or \
                (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
            raise DimensionError(f'matmul: cannot multiply shape {a.shape} by shape {b.shape}')
        return a @ b

    def backward(self, grad):
        a, b = (p.data for p in self.parents)
        grad_a = grad @ np.swapaxes(b, -1, -2) if self.needs_grad(0) else None
        grad_b = None
        if self.needs_grad(1):
            if b.ndim == 2:
                grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            else:
                grad_b = np.swapaxes(a, -1, -2) @ grad
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        return np.transpose(x, self.axes).copy()

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, x, shape):
        try:
            return x.reshape(shape).copy()
        except ValueError:
            raise DimensionError(f'reshape: cannot reshape {x.shape} into {shape}')

    def backward(self, grad):
        return (grad.reshape(self.parents[0].shape),)


class Take(Function):
    """Selects entries ``indices`` (1-D) along ``axis``."""

    def forward(self, x, indices, axis=0):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1:
            raise DimensionError(f'take: indices must be one dimensional, got {indices.shape}')
        if len(indices) and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
            raise DimensionError(f'take: index out of range for axis {axis} of shape {x.shape}')
        return np.take(x, indices, axis=axis)

    def backward(self, grad):
        x = self.parents[0]
        axis = self.options.get('axis', 0)
        out = np.zeros(x.shape)
        np.add.at(np.moveaxis(out, axis, 0), np.asarray(self.options['indices'], dtype=np.int64),
                  np.moveaxis(grad, axis, 0))
        return (out,)


class Embedding(Function):
    def forward(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise VocabError(f'token id {int(ids.max())} outside embedding table of {table.shape[0]} rows')
        self.ids = ids
        return table[ids]

    def backward(self, grad):
        table = self.parents[0]
        out = np.zeros(table.shape)
        np.add.at(out, self.ids.reshape(-1), grad.reshape(-1, table.shape[-1]))
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(a.shape, ref))
                                         if i != axis % len(ref)):
                raise DimensionError(f'concat: shapes {ref} and {a.shape} differ off axis {axis}')
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.options.get('axis', 0)))


def _expand_reduced(grad, shape, axis):
    if axis is None:
        return np.broadcast_to(grad, shape)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(grad, axes), shape)


class Sum(Function):
    def forward(self, x, axis=None):
        return x.sum(axis=axis)

    def backward(self, grad):
        return (_expand_reduced(grad, self.parents[0].shape, self.options.get('axis')),)


class Mean(Function):
    def forward(self, x, axis=None):
        self.count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return x.sum(axis=axis) / self.count

    def backward(self, grad):
        return (_expand_reduced(grad, self.parents[0].shape, self.options.get('axis')) / self.count,)


class Extremum(Function):
    """Max or min along one axis; the gradient goes to the first extreme entry."""
    pick = None

    def forward(self, x, axis):
        self.index = np.expand_dims(self.pick(x, axis=axis), axis)
        return np.take_along_axis(x, self.index, axis=axis).squeeze(axis)

    def backward(self, grad):
        axis = self.options['axis']
        out = np.zeros(self.parents[0].shape)
        np.put_along_axis(out, self.index, np.expand_dims(grad, axis), axis=axis)
        return (out,)


class Max(Extremum):
    pick = staticmethod(np.argmax)


class Min(Extremum):
    pick = staticmethod(np.argmin)


class Relu(Function):
    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return (grad * (self.parents[0].data > 0),)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x):
        self.cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        return x * self.cdf

    def backward(self, grad):
        x = self.parents[0].data
        pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + x * pdf),)


class Dropout(Function):
    """Train-mode dropout with inverted scaling."""

    def forward(self, x, p, rng):
        self.mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    def forward(self, x, axis=-1, mask=None):
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        axis = self.options.get('axis', -1)
        return (self.out * (grad - (grad * self.out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        axis = self.options.get('axis', -1)
        return (grad - self.probs * grad.sum(axis=axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-5):
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise DimensionError(f'layer_norm: gain {gain.shape} / bias {bias.shape} '
                                 f'do not match last axis of {x.shape}')
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred ** 2).mean(axis=-1, keepdims=True)
        with np.errstate(divide='ignore', invalid='ignore'):
            self.inv_std = 1.0 / np.sqrt(var + eps)
            self.x_hat = centred * self.inv_std
        return self.x_hat * gain + bias

    def backward(self, grad):
        gain = self.parents[1].data
        n = self.x_hat.shape[-1]
        d_hat = grad * gain
        grad_x = self.inv_std / n * (n * d_hat - d_hat.sum(axis=-1, keepdims=True)
                                     - self.x_hat * (d_hat * self.x_hat).sum(axis=-1, keepdims=True))
        grad_gain = _sum_to_shape(grad * self.x_hat, gain.shape)
        grad_bias = _sum_to_shape(grad, gain.shape)
        return grad_x, grad_gain, grad_bias


class CrossEntropy(Function):
    def forward(self, logits, target):
        target = np.asarray(target, dtype=np.int64)
        if logits.ndim != 2 or target.shape != (logits.shape[0],):
            raise DimensionError(f'cross_entropy: logits {logits.shape} and targets {target.shape} mismatch')
        n_classes = logits.shape[1]
        if target.size and (target.min() < 0 or target.max() >= n_classes):
            raise TargetError(f'cross_entropy: targets must lie in [0, {n_classes}), got {target.tolist()}')
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.target = target
        return -log_probs[np.arange(len(target)), target].mean()

    def backward(self, grad):
        d = self.probs.copy()
        d[np.arange(len(self.target)), self.target] -= 1.0
        return grad * d / len(self.target), None


class MeanSquaredError(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise DimensionError(f'mse: prediction shape {pred.shape} differs from target shape {target.shape}')
        self.diff = pred - target
        return (self.diff ** 2).mean()

    def backward(self, grad):
        d = grad * 2.0 * self.diff / self.diff.size
        return d, -d


class MarginRanking(Function):
    """mean(max(0, margin - (s_pos - s_neg))); the subgradient at the hinge is 0."""

    def forward(self, s_pos, s_neg, margin=1.0):
        if s_pos.shape != s_neg.shape:
            raise DimensionError(f'margin_ranking_loss: score shapes {s_pos.shape} and {s_neg.shape} differ')
        hinge = margin - (s_pos - s_neg)
        self.active = (hinge > 0).astype(np.float64)
        self.count = max(hinge.size, 1)
        return np.maximum(hinge, 0.0).sum() / self.count

    def backward(self, grad):
        d = grad * self.active / self.count
        return -d, d


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def scale(x, factor):
    return Scale.apply(x, factor=float(factor))


def matmul(a, b):
    """
    Matrix product. ``b`` is either a matrix shared across the leading axes of ``a`` or has the same
    leading axes.

    :raises DimensionError: naming both shapes when the inner dimensions differ.
    """
    return MatMul.apply(a, b)


def transpose(x, axes=None):
    return Transpose.apply(x, axes=axes)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def take(x, indices, axis=0):
    return Take.apply(x, indices=indices, axis=axis)


def embedding_lookup(table, ids):
    """Gathers rows of ``table``; the backward pass scatter-adds into the gathered rows."""
    return Embedding.apply(table, ids=ids)


def concat(tensors: Sequence[Tensor], axis=0):
    return Concat.apply(*tensors, axis=axis)


def reduce_sum(x, axis=None):
    return Sum.apply(x, axis=axis)


def reduce_mean(x, axis=None):
    return Mean.apply(x, axis=axis)


def reduce_max(x, axis):
    return Max.apply(x, axis=axis)


def reduce_min(x, axis):
    return Min.apply(x, axis=axis)


def relu(x):
    return Relu.apply(x)


def gelu(x):
    return Gelu.apply(x)


def dropout(x, p, training=False, rng=None):
    """
    Zeroes entries with probability ``p`` and rescales the rest by 1/(1-p).

    In eval mode (or with p == 0) the input tensor itself is returned.
    """
    if not training or p == 0:
        return x
    if not 0 <= p < 1:
        raise ContractError(f'dropout probability must be in [0, 1), got {p}')
    if rng is None:
        raise ContractError('train-mode dropout needs a random generator')
    return Dropout.apply(x, p=p, rng=rng)


def softmax(x, axis=-1, mask=None):
    """
    Numerically stable softmax. Entries where ``mask`` is False get -inf logits and thus weight 0.
    """
    return Softmax.apply(x, axis=axis, mask=mask)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x, gain, bias, eps=1e-5):
    return LayerNorm.apply(x, gain, bias, eps=eps)


def cross_entropy(logits, target):
    """Mean negative log-softmax of the target class over the batch."""
    return CrossEntropy.apply(logits, target=target)


def mse(pred, target):
    return MeanSquaredError.apply(pred, target)


def margin_ranking_loss(s_pos, s_neg, margin=1.0):
    """
    Hinge ranking loss averaged over the batch.

    :param s_pos: scores of the inputs that should rank higher
    :param s_neg: scores of the inputs that should rank lower
    :param margin: required gap, non-negative
    """
    if margin < 0:
        raise ContractError(f'margin must be non-negative, got {margin}')
    return MarginRanking.apply(s_pos, s_neg, margin=float(margin))


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int
    worst: Tuple[str, int] = None
    errors: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self):
        return {'max_rel_error': self.max_rel_error, 'passed': self.passed, 'tol': self.tol,
                'n_checked': self.n_checked, 'worst': list(self.worst) if self.worst else None}


def _named_tensors(x) -> Dict[str, Tensor]:
    if isinstance(x, Tensor):
        return {'x': x}
    if isinstance(x, Mapping):
        return dict(x)
    return {str(i): t for i, t in enumerate(x)}


def gradcheck(f: Callable, x: Union[Tensor, Mapping[str, Tensor], Sequence[Tensor]], eps=1e-5, tol=1e-6,
              max_elements: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> GradcheckReport:
    """
    Compares autodiff gradients with central finite differences.

    The relative error of an element is |a - n| / max(|a|, |n|, 1e-8); the check passes iff the largest
    one is below ``tol`` (so ``tol=0`` never passes).

    :param f: callable returning a scalar Tensor when called with ``x``; must be deterministic
    :param x: tensor, or a mapping/sequence of tensors, to differentiate with respect to
    :param eps: finite difference step
    :param tol: pass threshold
    :param max_elements: if set, check at most this many randomly chosen elements per tensor
    :param rng: generator for choosing elements
    :return: GradcheckReport
    :raises InvalidCheckError: if ``f`` uses train-mode dropout or returns different values on repeated calls
    """
    tensors = _named_tensors(x)
    out = f(x)
    if out.size != 1:
        raise ContractError(f'gradcheck needs a scalar function, got shape {out.shape}')
    if build_graph(out).functions(Dropout):
        raise InvalidCheckError('function under check applies train-mode dropout; disable it first')

    for t in tensors.values():
        t.grad = None
    out.backward()
    analytic = {name: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for name, t in tensors.items()}

    if not np.array_equal(f(x).data, out.data):
        raise InvalidCheckError('function under check is not deterministic')

    rng = np.random.default_rng(0) if rng is None else rng
    errors = {}
    worst, max_err, n_checked = None, 0.0, 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        else:
            idx = np.arange(flat.size)
        err = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(x).item()
            flat[i] = orig - eps
            f_minus = f(x).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err[i] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if worst is None or err[i] > max_err:
                max_err, worst = float(err[i]), (name, int(i))
            n_checked += 1
        errors[name] = err.reshape(t.shape)
    return GradcheckReport(max_rel_error=float(max_err), passed=bool(max_err < tol), tol=tol,
                           n_checked=n_checked, worst=worst, errors=errors)
