"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Every primitive works on plain ``numpy`` arrays. When at least one argument is
a :class:`Var`, the call is also recorded on that variable's :class:`Tape` so
gradients can be pulled back with :func:`backward`. Calls made only with arrays
run eagerly and record nothing, which is how inference avoids tape overhead.

>>> out, tape = evaluate(lambda x: sum_(x * x), {"x": np.array([1.0, 2.0])})
>>> backward(tape)["x"]
array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Primitive",
    "PRIMITIVES",
    "Node",
    "Tape",
    "Var",
    "value_of",
    "evaluate",
    "backward",
    "jacobian",
    "finite_difference_jacobian",
    "finite_difference_gradient",
    "max_relative_error",
]


class ShapeError(ValueError):
    """A primitive received operands with incompatible shapes."""

    def __init__(self, primitive: str, detail: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {detail}")


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, node_id: int | None):
        self.primitive = primitive
        self.node_id = node_id
        where = f"node {node_id}" if node_id is not None else "eager call"
        super().__init__(f"{primitive}: non-finite output at {where}")


class TapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, *inputs, **attrs) -> one gradient (or None) per input
    vjp: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward, vjp) -> Primitive:
    prim = Primitive(name, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray | None


@dataclass
class Tape:
    """Topologically ordered record of primitive applications.

    Nodes are appended as they are computed, so inputs always precede their
    consumers. ``params`` maps parameter names to leaf node ids.
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)
    valid: bool = True

    def _push(self, op: str, inputs: tuple[int, ...], attrs: dict, value: np.ndarray) -> Var:
        if not self.valid:
            raise TapeError("tape has been released")
        node = Node(len(self.nodes), op, inputs, attrs, value)
        self.nodes.append(node)
        return Var(self, node.id)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already on tape")
        var = self._push("param", (), {"name": name}, _as_array(value).copy())
        self.params[name] = var.id
        return var

    def const(self, value) -> Var:
        return self._push("const", (), {}, _as_array(value))

    def release(self) -> None:
        """Drop stored values; later backward/replay calls are rejected."""
        for node in self.nodes:
            node.value = None
        self.valid = False

    def replay(self, inputs: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Recompute every node, optionally with new parameter values."""
        if not self.valid:
            raise TapeError("tape has been released")
        inputs = dict(inputs or {})
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "param":
                name = node.attrs["name"]
                values.append(_as_array(inputs[name]) if name in inputs else node.value)
            elif node.op == "const":
                values.append(node.value)
            else:
                prim = PRIMITIVES[node.op]
                values.append(prim.forward(*(values[i] for i in node.inputs), **node.attrs))
        return {name: values[i] for name, i in self.outputs.items()}


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def value_of(x) -> np.ndarray:
    """The numeric value of a Var or array-like."""
    return x.value if isinstance(x, Var) else _as_array(x)


class Var:
    """Handle to a node on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        val = self.tape.nodes[self.id].value
        if val is None:
            raise TapeError("tape has been released")
        return val

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(node={self.id}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _apply(name: str, *args, **attrs):
    prim = PRIMITIVES[name]
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError(f"{name}: operands live on different tapes")
    vals = [value_of(a) for a in args]
    try:
        with np.errstate(all="ignore"):
            out = prim.forward(*vals, **attrs)
    except ShapeError:
        raise
    except ValueError as exc:
        raise ShapeError(name, str(exc)) from None
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(name, len(tape.nodes) if tape is not None else None)
    if tape is None:
        return out
    ids = []
    for a in args:
        if isinstance(a, Var):
            ids.append(a.id)
        else:
            ids.append(tape.const(a).id)
    return tape._push(name, tuple(ids), attrs, out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ------------------------------------------------------

def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast {a.shape} with {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _div_fwd(a, b):
    _check_broadcast("div", a, b)
    return a / b


_register("add", _add_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", _sub_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register(
    "mul", _mul_fwd, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
)
_register(
    "div",
    _div_fwd,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
)


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


# -- matmul ------------------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", "operands must be at least 1-D")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError("matmul", f"contraction mismatch {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
    gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b):
    return _apply("matmul", a, b)


# -- elementwise unary -------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_vjp(g, out, x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


_register("neg", lambda x: -x, lambda g, out, x: (-g,))
_register("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),))
_register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))
_register("gelu", _gelu_fwd, _gelu_vjp)
_register("exp", np.exp, lambda g, out, x: (g * out,))
_register("log", np.log, lambda g, out, x: (g / x,))
_register("square", np.square, lambda g, out, x: (2.0 * g * x,))


def neg(x):
    return _apply("neg", x)


def tanh(x):
    return _apply("tanh", x)


def relu(x):
    return _apply("relu", x)


def gelu(x):
    """GELU, tanh approximation."""
    return _apply("gelu", x)


def exp(x):
    return _apply("exp", x)


def log(x):
    return _apply("log", x)


def square(x):
    return _apply("square", x)


# -- softmax family ----------------------------------------------------------

def _softmax_fwd(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


_register(
    "softmax",
    _softmax_fwd,
    lambda g, out, x: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
)
_register(
    "log_softmax",
    _log_softmax_fwd,
    lambda g, out, x: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
)


def softmax(x):
    """Softmax over the last axis."""
    return _apply("softmax", x)


def log_softmax(x):
    return _apply("log_softmax", x)


# -- layer norm --------------------------------------------------------------

def _layer_norm_fwd(x, gamma, beta, eps=1e-12):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", f"gain/bias {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gamma + beta


def _layer_norm_vjp(g, out, x, gamma, beta, eps=1e-12):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    g_gamma = (g * xhat).sum(axis=lead)
    g_beta = g.sum(axis=lead)
    gh = g * gamma
    gx = inv * (
        gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, g_gamma, g_beta


_register("layer_norm", _layer_norm_fwd, _layer_norm_vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-12):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    return _apply("layer_norm", x, gamma, beta, eps=eps)


# -- reductions --------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


_register(
    "sum",
    lambda x, axis=None, keepdims=False: np.asarray(x.sum(axis=axis, keepdims=keepdims)),
    lambda g, out, x, axis=None, keepdims=False: (
        np.array(_expand_reduced(g, x.shape, axis, keepdims)),
    ),
)
_register(
    "mean",
    lambda x, axis=None, keepdims=False: np.asarray(x.mean(axis=axis, keepdims=keepdims)),
    lambda g, out, x, axis=None, keepdims=False: (
        np.array(_expand_reduced(g, x.shape, axis, keepdims)) / _reduced_count(x.shape, axis),
    ),
)
_register(
    "sum_squares",
    lambda x: np.asarray(np.sum(x * x)),
    lambda g, out, x: (2.0 * g * x,),
)


def sum_(x, axis=None, keepdims: bool = False):
    return _apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return _apply("mean", x, axis=axis, keepdims=keepdims)


def sum_squares(x):
    """Sum of squared elements (squared Frobenius norm), as a 0-d value."""
    return _apply("sum_squares", x)


# -- shape manipulation ------------------------------------------------------

def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None


def _transpose_vjp(g, out, x, axes):
    if axes is None:
        return (g.T,)
    return (np.transpose(g, np.argsort(axes)),)


def _getitem_vjp(g, out, x, index):
    gx = np.zeros_like(x)
    np.add.at(gx, index, g)
    return (gx,)


_register("reshape", _reshape_fwd, lambda g, out, x, shape: (g.reshape(x.shape),))
_register("transpose", lambda x, axes: np.transpose(x, axes), _transpose_vjp)
_register("getitem", lambda x, index: np.array(x[index]), _getitem_vjp)
_register(
    "where",
    lambda a, b, mask: np.where(mask, a, b),
    lambda g, out, a, b, mask: (
        _unbroadcast(np.where(mask, g, 0.0), a.shape),
        _unbroadcast(np.where(mask, 0.0, g), b.shape),
    ),
)


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(shape))


def transpose(x, axes=None):
    return _apply("transpose", x, axes=None if axes is None else tuple(axes))


def getitem(x, index):
    """Slicing and integer-array gathering (e.g. embedding lookup)."""
    return _apply("getitem", x, index=index)


def where(mask, a, b):
    """Elementwise select: ``a`` where ``mask`` is true, else ``b``."""
    return _apply("where", a, b, mask=np.asarray(mask, dtype=bool))


def detach(x):
    """Copy of ``x`` that blocks gradient flow."""
    if isinstance(x, Var):
        return x.tape.const(x.value)
    return _as_array(x)


# -- composites --------------------------------------------------------------

def cross_entropy(logits, labels) -> Any:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


# -- driving the tape --------------------------------------------------------

def evaluate(builder: Callable[..., Any], inputs: Mapping[str, Any]):
    """Run ``builder(**vars)`` on a fresh tape with ``inputs`` as parameters.

    ``builder`` returns a Var or a dict of Vars. Returns the output values
    (same structure, as arrays) and the tape.
    """
    tape = Tape()
    vars_ = {name: tape.param(name, val) for name, val in inputs.items()}
    result = builder(**vars_)
    if isinstance(result, Mapping):
        outs = {k: _ensure_on_tape(tape, v) for k, v in result.items()}
        tape.outputs = {k: v.id for k, v in outs.items()}
        return {k: v.value for k, v in outs.items()}, tape
    out = _ensure_on_tape(tape, result)
    tape.outputs = {"out": out.id}
    return out.value, tape


def _ensure_on_tape(tape: Tape, v) -> Var:
    if isinstance(v, Var):
        return v
    return tape.const(v)


def backward(tape: Tape, output_seed=None, output: str | Var | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of one tape output with respect to every parameter.

    ``output_seed`` defaults to ones of the output's shape.
    """
    if not tape.valid:
        raise TapeError("tape has been released")
    if isinstance(output, Var):
        out_id = output.id
    elif output is not None:
        out_id = tape.outputs[output]
    elif len(tape.outputs) == 1:
        out_id = next(iter(tape.outputs.values()))
    elif tape.outputs:
        raise TapeError("tape has several outputs; name one")
    else:
        out_id = len(tape.nodes) - 1
    out_val = tape.nodes[out_id].value
    if output_seed is None:
        seed = np.ones_like(out_val)
    else:
        seed = _as_array(output_seed)
        if seed.shape != out_val.shape:
            raise ShapeError("backward", f"seed shape {seed.shape} != output shape {out_val.shape}")

    grads: dict[int, np.ndarray] = {out_id: seed}
    nodes = tape.nodes
    for node in reversed(nodes[: out_id + 1]):
        if node.op in ("param", "const"):
            continue
        g = grads.pop(node.id, None)
        if g is None:
            continue
        prim = PRIMITIVES[node.op]
        in_vals = [nodes[i].value for i in node.inputs]
        contribs = prim.vjp(g, node.value, *in_vals, **node.attrs)
        for i, c in zip(node.inputs, contribs):
            if c is None or nodes[i].op == "const":
                continue
            if i in grads:
                grads[i] = grads[i] + c
            else:
                grads[i] = np.array(c, dtype=np.float64)
    return {
        name: grads.get(i, np.zeros_like(nodes[i].value)) for name, i in tape.params.items()
    }


def jacobian(f: Callable[[Var], Any], x) -> np.ndarray:
    """Exact Jacobian of a vector function via one reverse pass per output."""
    x = _as_array(x)
    out, tape = evaluate(lambda x: f(x), {"x": x})
    out = np.atleast_1d(out)
    flat_out = out.size
    jac = np.empty((flat_out, x.size))
    for k in range(flat_out):
        seed = np.zeros(flat_out)
        seed[k] = 1.0
        jac[k] = backward(tape, seed.reshape(tape.nodes[tape.outputs["out"]].value.shape))["x"].ravel()
    return jac


def finite_difference_jacobian(f: Callable[[np.ndarray], Any], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, shape (out_dim, in_dim).

    Entry (k, i) is ``(f_k(x + h e_i) - f_k(x - h e_i)) / (2h)``.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    x = _as_array(x)
    flat = x.ravel()
    cols = []
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.atleast_1d(value_of(f(xp.reshape(x.shape)))).ravel()
        fm = np.atleast_1d(value_of(f(xm.reshape(x.shape)))).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteError("finite_difference_jacobian", None)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def finite_difference_gradient(f: Callable[[np.ndarray], Any], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, shaped like ``x``."""
    x = _as_array(x)
    return finite_difference_jacobian(f, x, h)[0].reshape(x.shape)


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """``max|a - b|`` scaled by the larger of the two max magnitudes."""
    a = _as_array(a)
    b = _as_array(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)

