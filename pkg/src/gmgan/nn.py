"""
Minimal reverse-mode autodiff over numpy arrays, MLP construction and Adam.

Every op returns a new :class:`Tensor`; when at least one input requires a
gradient the result remembers its parents and a closure mapping the output
gradient to one gradient per parent. ``backprop`` walks that graph once in
reverse topological order and accumulates into the ``grad`` buffers of the
leaves (the parameters). A graph may only be walked once.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, FormatError, NumericError, UsageError

FORMAT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def tsum(a, axis=None):
    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), back)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return mul(tsum(a, axis), 1.0 / n)


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; the gradient is zero wherever clipping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tanh(a, scale=1.0):
    t = np.tanh(a.data)
    return _node(scale * t, (a,), lambda g: (g * scale * (1.0 - t * t),))


def sigmoid(a):
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def leaky_relu(a, slope):
    gain = (a.data > 0) * (1.0 - slope)
    gain += slope
    return _node(a.data * gain, (a,), lambda g: (g * gain,))


def log_softmax(a):
    """Row-wise log-softmax of a 2-D tensor."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def take_rows(a, index):
    """Gather rows ``a[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back)


def batched_matvec(mats, vecs):
    """out[b] = mats[b] @ vecs[b] for mats [B, d, d] and vecs [B, d]."""
    return _node(np.einsum("bij,bj->bi", mats.data, vecs.data), (mats, vecs),
                 lambda g: (np.einsum("bi,bj->bij", g, vecs.data),
                            np.einsum("bij,bi->bj", mats.data, g)))


def backprop(root, loss_grad=None):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    ``root`` is either a scalar loss tensor (``loss_grad`` defaults to 1) or a
    :class:`Trace`, in which case ``loss_grad`` is the upstream gradient with
    the trace output's shape.
    """
    if isinstance(root, Trace):
        root = root.output
    if root._consumed:
        raise UsageError("computation trace already consumed by a previous backprop")
    if loss_grad is None:
        if root.data.size != 1:
            raise UsageError("loss_grad is required for non-scalar outputs")
        loss_grad = np.ones_like(root.data)
    loss_grad = np.asarray(loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad,
                           dtype=np.float64)
    if loss_grad.shape != root.shape:
        raise DimensionError(f"loss_grad shape {loss_grad.shape} != output shape {root.shape}")
    root._consumed = True
    if not root.requires_grad:
        return

    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): loss_grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # free the interior graph; a second walk is a usage error anyway
        node._parents, node._backward = (), None
        node._consumed = True


class ParamStore(OrderedDict):
    """Ordered name -> Tensor map of trainable leaves."""

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True)
        super().__setitem__(name, value)

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def arrays(self):
        return OrderedDict((k, t.data) for k, t in self.items())

    def copy(self):
        out = ParamStore()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def merged(self, *others, prefixes=None):
        """A new store sharing the same Tensor objects, optionally prefixed."""
        out = ParamStore()
        stores = (self,) + others
        prefixes = prefixes or [""] * len(stores)
        for prefix, store in zip(prefixes, stores):
            for k, t in store.items():
                name = prefix + k
                if name in out:
                    raise UsageError(f"duplicate parameter name {name!r}")
                out[name] = t
        return out

    def num_values(self):
        return sum(t.data.size for t in self.values())


# ---------------------------------------------------------------------------
# MLPs

_ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "identity")


def parse_activation(text):
    """'leaky_relu:0.2' -> ('leaky_relu', 0.2); 'tanh:1.5' scales the tanh output."""
    name, _, arg = text.partition(":")
    if name not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {text!r}")
    if name == "leaky_relu":
        slope = float(arg) if arg else 0.2
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky-relu slope must lie in (0, 1), got {slope}")
        return name, slope
    if name == "tanh":
        return name, float(arg) if arg else 1.0
    if arg:
        raise ValueError(f"activation {name} takes no argument")
    return name, 0.0


def apply_activation(x, act):
    name, arg = parse_activation(act) if isinstance(act, str) else act
    if name == "leaky_relu":
        return leaky_relu(x, arg)
    if name == "tanh":
        return tanh(x, arg)
    if name == "sigmoid":
        return sigmoid(x)
    return x


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activations: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need exactly one activation per layer")
        for act in self.activations:
            parse_activation(act)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def d_out(self):
        return self.widths[-1]

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), tuple(d["activations"]))


def init_mlp(spec, rng, weight_std=0.02):
    """Gaussian N(0, weight_std^2) weights and zero biases."""
    params = ParamStore()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params[f"W{i}"] = rng.normal(0.0, weight_std, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


@dataclass
class Trace:
    """Output of a forward pass together with each layer's post-activation."""

    output: Tensor
    activations: list = field(default_factory=list)


def mlp_forward(spec, params, batch, track=True):
    """Run ``batch`` [B, d_in] through the MLP.

    With ``track=False`` the parameters are read as constants and no graph is
    recorded, which is what evaluation code wants.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != spec.d_in:
        raise DimensionError(f"batch shape {x.shape} does not match input width {spec.d_in}")
    acts = []
    for i, act in enumerate(spec.activations):
        try:
            W, b = params[f"W{i}"], params[f"b{i}"]
        except KeyError as exc:
            raise DimensionError(f"missing parameter {exc.args[0]}") from None
        if W.shape != (spec.widths[i], spec.widths[i + 1]) or b.shape != (spec.widths[i + 1],):
            raise DimensionError(f"layer {i} parameter shapes {W.shape}, {b.shape} do not match spec")
        if not track:
            W, b = Tensor(W.data), Tensor(b.data)
        x = apply_activation(x @ W + b, act)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation in layer {i}")
        acts.append(x)
    return Trace(x, acts)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: _pack(a) for k, a in self.m.items()},
            "v": {k: _pack(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], t=d["t"],
                   m={k: _unpack(a) for k, a in d["m"].items()},
                   v={k: _unpack(a) for k, a in d["v"].items()})


def adam_step(params, state):
    """One bias-corrected Adam update of every parameter; clears the grads."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data = p.data - (state.lr / bc1) * m / denom
        p.grad = None
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(spec, params, batch, loss_fn, h=1e-5):
    """Largest relative disagreement between backprop and central differences.

    ``loss_fn`` maps the MLP output Tensor to a scalar Tensor. For each named
    parameter the error is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
    and the maximum over parameters is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    loss = loss_fn(mlp_forward(spec, params, batch).output)
    backprop(loss)

    def f():
        return float(loss_fn(mlp_forward(spec, params, batch, track=False).output).data)

    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        a, n = np.linalg.norm(analytic), np.linalg.norm(numeric)
        err = np.linalg.norm(analytic - numeric) / max(a, n, 1e-8)
        worst = max(worst, float(err))
    params.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# structured-text persistence


def _pack(array):
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NumericError("refusing to serialize non-finite values")
    return {"shape": list(array.shape), "values": array.reshape(-1).tolist()}


def _unpack(d):
    values = np.array(d["values"], dtype=np.float64)
    shape = tuple(d["shape"])
    if int(np.prod(shape, dtype=np.int64)) != values.size:
        raise FormatError(f"shape {shape} does not match {values.size} values")
    return values.reshape(shape)


def params_to_dict(params):
    return {
        "names": list(params.keys()),
        "shapes": [list(t.shape) for t in params.values()],
        "values": [t.data.reshape(-1).tolist() for t in params.values()],
    }


def params_from_dict(d):
    names, shapes, values = d["names"], d["shapes"], d["values"]
    if not (len(names) == len(shapes) == len(values)):
        raise FormatError("names/shapes/values have different lengths")
    params = ParamStore()
    for name, shape, vals in zip(names, shapes, values):
        arr = np.array(vals, dtype=np.float64)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise FormatError(f"parameter {name!r}: shape {shape} does not match {arr.size} values")
        params[name] = arr.reshape(shape)
    return params


def dumps_document(doc):
    """Canonical JSON: sorted keys and shortest round-trip float repr."""
    return json.dumps({"format_version": FORMAT_VERSION, **doc}, sort_keys=True,
                      separators=(",", ":"), allow_nan=False) + "\n"


def loads_document(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"not a structured-text checkpoint: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        version = doc.get("format_version") if isinstance(doc, dict) else None
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    return doc


def save_params(params, path):
    Path(path).write_text(dumps_document(params_to_dict(params)))


def load_params(path):
    return params_from_dict(loads_document(Path(path).read_text()))
