"""Minimal reverse-mode autodiff over dense numpy arrays.

Scope: rank-0..2 float arrays, the ops needed by the denoiser and its
losses, a stop-gradient marker, and a group-masked AdamW optimizer.
Gradient accumulation follows node-creation order, so repeated backward
passes over the same graph are bitwise identical.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

__all__ = [
    "ContractViolation",
    "Tensor",
    "ParamStore",
    "constant",
    "parameter",
    "stop_gradient",
    "no_grad",
    "backward",
    "adam_step",
    "op_forward",
    "OPS",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "gelu",
    "abs_",
    "layernorm",
    "softmax",
    "concat",
    "slice_",
    "sum_",
    "mean_",
    "l2norm",
]


class ContractViolation(ValueError):
    """Shape or argument mismatch in a graph op."""


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops executed inside record no backward closures."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A graph node: value plus (parent, vjp) edges for backward."""

    __slots__ = ("value", "requires_grad", "grad", "parents", "_id")

    def __init__(self, value, requires_grad=False, parents=()):
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value, dtype=None) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim > 2:
        raise ContractViolation(f"constant: rank {arr.ndim} > 2 unsupported")
    return Tensor(arr)


def parameter(value, dtype=np.float32) -> Tensor:
    arr = np.array(value, dtype=dtype)
    if arr.ndim > 2:
        raise ContractViolation(f"parameter: rank {arr.ndim} > 2 unsupported")
    return Tensor(arr, requires_grad=True)


def stop_gradient(x) -> Tensor:
    """Same forward value (shared array, bitwise), zero gradient flow."""
    x = _as_tensor(x)
    return Tensor(x.value)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _node(value, inputs, vjps, op):
    """Build the output node; record closures only for tracked parents."""
    if value.ndim > 2:
        raise ContractViolation(f"{op}: result rank {value.ndim} > 2")
    if not _grad_enabled():
        return Tensor(value)
    parents = tuple(
        (inp, vjp) for inp, vjp in zip(inputs, vjps) if inp.requires_grad
    )
    if not parents:
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=parents)


def _unbroadcast(g, shape):
    """Reduce gradient g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ContractViolation(f"add: shapes {a.shape} vs {b.shape}") from None
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
        "add",
    )


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ContractViolation(f"mul: shapes {a.shape} vs {b.shape}") from None
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), (lambda g: g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ContractViolation(f"matmul: shapes {av.shape} vs {bv.shape}")
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1:
            # (n,k)@(k,) -> (n,): outer product; (k,)@(k,) impossible here
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        ga = g @ bv.T
        return ga

    def grad_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g

    return _node(out, (a, b), (grad_a, grad_b), "matmul")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation (closed-form derivative)."""
    a = _as_tensor(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _node(out, (a,), (vjp,), "gelu")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.value)
    return _node(out, (a,), (lambda g: g * np.sign(a.value),), "abs")


# ---------------------------------------------------------------------------
# normalization / structural ops


def layernorm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, optional affine."""
    a = _as_tensor(a)
    x = a.value
    if x.ndim == 0:
        raise ContractViolation("layernorm: scalar input")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    n = x.shape[-1]

    def vjp_x(g):
        # g is dL/dy with y = xhat (affine handled by composition below)
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    out = _node(xhat, (a,), (vjp_x,), "layernorm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _node(out, (a,), (vjp,), "softmax")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat: empty input list")
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractViolation(f"concat: shapes {shapes} axis={axis}") from None
    offsets = np.cumsum([0] + [t.value.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))), "concat")


def slice_(a, key) -> Tensor:
    """Basic slicing; key is anything numpy basic indexing accepts."""
    a = _as_tensor(a)
    out = a.value[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        full = np.zeros_like(a.value)
        full[key] = g
        return full

    return _node(out, (a,), (vjp,), "slice")


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.value.sum())
    return _node(out, (a,), (lambda g: np.broadcast_to(g, a.value.shape).copy(),), "sum")


def mean_(a) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size
    out = np.asarray(a.value.mean())
    return _node(
        out,
        (a,),
        (lambda g: np.broadcast_to(g / n, a.value.shape).copy(),),
        "mean",
    )


def l2norm(a, eps: float = 1e-12) -> Tensor:
    """L2-normalize: rows for rank-2 input, the whole vector for rank-1."""
    a = _as_tensor(a)
    x = a.value
    if x.ndim == 0:
        raise ContractViolation("l2norm: scalar input")
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    r = np.maximum(r, eps)
    out = x / r

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - out * dot) / r

    return _node(out, (a,), (vjp,), "l2norm")


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "gelu": gelu,
    "abs": abs_,
    "layernorm": layernorm,
    "softmax": softmax,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean_,
    "l2norm": l2norm,
}


def op_forward(op: str, *args, **kwargs) -> Tensor:
    """Dispatch a graph op by name."""
    if op not in OPS:
        raise ContractViolation(f"op_forward: unknown op {op!r}")
    return OPS[op](*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Populate .grad on every reachable requires_grad node.

    Gradients accumulate additively; order of accumulation is fixed by
    node creation order (topological, newest first).
    """
    if root.value.size != 1:
        raise ContractViolation(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    seen = {id(root)}
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        order.append(node)
        for parent, _ in node.parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    order.sort(key=lambda n: n._id, reverse=True)

    root.grad = np.ones_like(root.value)
    for node in order:
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=parent.value.dtype)
            else:
                parent.grad = parent.grad + contrib


# ---------------------------------------------------------------------------
# parameter store + optimizer

BACKBONE = "backbone"
ADALN = "adaln"
GROUPS = (BACKBONE, ADALN)


class ParamStore:
    """Named parameters, each tagged with a group; holds Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, value, group: str, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"ParamStore: duplicate parameter {name!r}")
        if group not in GROUPS:
            raise ContractViolation(f"ParamStore: unknown group {group!r} for {name!r}")
        p = parameter(value, dtype=dtype)
        self._params[name] = p
        self._groups[name] = group
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def group(self, name: str) -> str:
        return self._groups[name]

    def items(self):
        return self._params.items()

    def partition(self):
        """Return ({backbone names}, {adaln names}); disjoint and covering."""
        backbone, adaln = [], []
        for name in self._params:
            group = self._groups.get(name)
            if group == BACKBONE:
                backbone.append(name)
            elif group == ADALN:
                adaln.append(name)
            else:
                raise ContractViolation(f"ParamStore: untagged parameter {name!r}")
        return backbone, adaln

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def set_values(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != arr.shape:
                raise ContractViolation(
                    f"ParamStore: shape mismatch for {name!r}: {p.value.shape} vs {arr.shape}"
                )
            p.value = arr.astype(p.value.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    groups=GROUPS,
) -> None:
    """One AdamW update on the selected groups; others stay bitwise unchanged.

    Moments are created lazily at zero and advance only for masked groups.
    """
    if lr <= 0:
        raise ContractViolation(f"adam_step: lr must be positive, got {lr}")
    groups = set(groups)
    for name, p in params.items():
        if params.group(name) not in groups:
            continue
        g = p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=p.value.dtype)
        if name not in params._m:
            params._m[name] = np.zeros_like(p.value)
            params._v[name] = np.zeros_like(p.value)
            params._t[name] = 0
        params._t[name] += 1
        t = params._t[name]
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        update = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            update = update + weight_decay * p.value
        p.value = p.value - np.asarray(lr * update, dtype=p.value.dtype)
