"""Dense float64 tensors with a reverse-mode tape and an Adam optimizer.

Every primitive is a pure numpy function returning its value together with a
closure that maps the output gradient to input gradients.  A :class:`Tape`
records those closures in execution order; :meth:`Tape.backward` replays them
in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""


class Tensor:
    """A float64 array optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


# -- primitives -------------------------------------------------------------
#
# Each returns (value, backward) where backward(g) yields one gradient (or
# None) per tensor input.


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(prim: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{prim}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(a, *, factor: float):
    return a * factor, lambda g: (g * factor,)


def _matmul(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0] or b.ndim > 2:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def backward(g):
        if b.ndim == 1:
            return np.multiply.outer(g, b), np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
        ga = g @ b.T
        a2 = a.reshape(-1, a.shape[-1])
        return ga, a2.T @ g.reshape(-1, b.shape[1])

    return out, backward


def _concat(*xs):
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[x.shape for x in xs]}")
    out = np.concatenate(xs, axis=-1)
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return out, backward


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _sigmoid(x):
    s = _sigmoid_np(x)
    return s, lambda g: (g * s * (1.0 - s),)


def _tanh(x):
    t = np.tanh(x)
    return t, lambda g: (g * (1.0 - t * t),)


def _log(x):
    # only ever applied to probabilities
    c = np.clip(x, PROB_EPS, 1.0 - PROB_EPS)
    inside = (x >= PROB_EPS) & (x <= 1.0 - PROB_EPS)
    return np.log(c), lambda g: (np.where(inside, g / c, 0.0),)


def _softmax(x, *, segments=None, n_segments=None):
    if x.ndim != 1:
        raise ShapeError(f"softmax: expected a vector, got shape {x.shape}")
    if segments is None:
        if x.size == 0:
            raise ShapeError("softmax: empty vector")
        e = np.exp(x - x.max())
        p = e / e.sum()

        def backward(g):
            return (p * (g - np.dot(g, p)),)

        return p, backward
    segments = np.asarray(segments)
    if segments.shape != x.shape:
        raise ShapeError(f"softmax: segment ids {segments.shape} do not match scores {x.shape}")
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segments, x)
    e = np.exp(x - peak[segments])
    denom = np.zeros(n_segments)
    np.add.at(denom, segments, e)
    p = e / denom[segments]

    def backward(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, segments, g * p)
        return (p * (g - dot[segments]),)

    return p, backward


def _segment_sum(x, *, segments, n_segments):
    segments = np.asarray(segments)
    if x.shape[0] != segments.shape[0]:
        raise ShapeError(f"segment_sum: {x.shape[0]} rows but {segments.shape[0]} segment ids")
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x)
    return out, lambda g: (g[segments],)


def _reshape(x, *, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _l1(x):
    return np.abs(x).sum(), lambda g: (g * np.sign(x),)


def _sum(x):
    return x.sum(), lambda g: (np.broadcast_to(g, x.shape).copy(),)


def _mean(x):
    n = x.size
    return x.mean(), lambda g: (np.full(x.shape, g / n),)


def _dropout(x, *, mask, keep):
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} does not match input {x.shape}")
    scale = mask / keep
    return x * scale, lambda g: (g * scale,)


def _gather(table, *, index):
    index = np.asarray(index, dtype=np.int64)
    if table.ndim < 1 or (index.size and (index.min() < 0 or index.max() >= table.shape[0])):
        raise ShapeError(f"gather: index out of range for table of shape {table.shape}")

    def backward(g):
        out = np.zeros_like(table)
        np.add.at(out, index, g)
        return (out,)

    return table[index], backward


PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scale": _scale,
    "matmul": _matmul,
    "concat": _concat,
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "log": _log,
    "softmax": _softmax,
    "segment_sum": _segment_sum,
    "reshape": _reshape,
    "l1": _l1,
    "sum": _sum,
    "mean": _mean,
    "dropout": _dropout,
    "gather": _gather,
}


@dataclass
class _Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable | None


class Tape:
    """Ordered record of primitive applications.

    With ``grad_enabled=False`` nothing is recorded, which is what evaluation
    and posterior refreshes use.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[_Node] = []

    def leaf(self, data, requires_grad: bool = False, name: str | None = None) -> Tensor:
        t = Tensor(data, requires_grad=requires_grad and self.grad_enabled, name=name)
        t._tape = self
        return t

    def forward(self, primitive: str, *inputs: Tensor, **kwargs) -> Tensor:
        try:
            fn = PRIMITIVES[primitive]
        except KeyError:
            raise ValueError(f"unknown primitive {primitive!r}") from None
        arrays = [x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64) for x in inputs]
        value, backward = fn(*arrays, **kwargs)
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{primitive}: non-finite output")
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
        track = self.grad_enabled and any(t.requires_grad for t in tensors)
        out = Tensor(value, requires_grad=track)
        out._tape = self
        if track:
            out._node = len(self.nodes)
            self.nodes.append(_Node(primitive, tensors, out, backward))
        return out

    # convenience wrappers
    def add(self, a, b):
        return self.forward("add", a, b)

    def sub(self, a, b):
        return self.forward("sub", a, b)

    def mul(self, a, b):
        return self.forward("mul", a, b)

    def scale(self, a, factor: float):
        return self.forward("scale", a, factor=float(factor))

    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def concat(self, xs: Sequence[Tensor]):
        return self.forward("concat", *xs)

    def sigmoid(self, x):
        return self.forward("sigmoid", x)

    def tanh(self, x):
        return self.forward("tanh", x)

    def log(self, x):
        return self.forward("log", x)

    def softmax(self, x, segments=None, n_segments: int | None = None):
        return self.forward("softmax", x, segments=segments, n_segments=n_segments)

    def segment_sum(self, x, segments, n_segments: int):
        return self.forward("segment_sum", x, segments=segments, n_segments=n_segments)

    def reshape(self, x, shape):
        return self.forward("reshape", x, shape=tuple(shape))

    def l1(self, x):
        return self.forward("l1", x)

    def sum(self, x):
        return self.forward("sum", x)

    def mean(self, x):
        return self.forward("mean", x)

    def gather(self, table, index):
        return self.forward("gather", table, index=index)

    def dropout(self, x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
        """Inverted dropout; the identity when ``rate == 0`` or not training."""
        if not training or rate == 0.0:
            return x
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        keep = 1.0 - rate
        mask = (rng.random(x.shape) < keep).astype(np.float64)
        return self.forward("dropout", x, mask=mask, keep=keep)

    def backward(self, output: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``output`` with respect to tracked leaves.

        Leaves listed in ``wrt`` that did not take part in the computation get
        exact zeros.
        """
        if output._tape is not self:
            raise ValueError("output was not produced by this tape")
        if output.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if output._node is not None:
            grads[id(output)] = np.ones(())
            for node in reversed(self.nodes[: output._node + 1]):
                g = grads.pop(id(node.output), None)
                if g is None:
                    continue
                for t, gi in zip(node.inputs, node.backward(g)):
                    if gi is None or not t.requires_grad:
                        continue
                    gi = np.asarray(gi, dtype=np.float64)
                    if id(t) in grads:
                        grads[id(t)] = grads[id(t)] + gi
                    else:
                        grads[id(t)] = gi
                    if t._node is None:
                        leaves[id(t)] = t
        result = {t: grads[i] for i, t in leaves.items()}
        for t in wrt or ():
            if t not in result:
                result[t] = np.zeros_like(t.data)
        for t, g in result.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {t.name or t!r}")
        return result


def sigmoid(x):
    """Numerically stable logistic function on floats or arrays."""
    out = _sigmoid_np(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


# -- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self, name: str) -> None:
        """Forget the moment estimates of one parameter."""
        self.m.pop(name, None)
        self.v.pop(name, None)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient so their moments still decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def finite_difference(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x`` (mutated then restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# -- persistence ------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_tensors(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a ``.npz`` container: a JSON ``__header__`` entry plus named arrays."""
    import json

    payload = {"__header__": np.array(json.dumps({"format_version": CHECKPOINT_FORMAT, **header}, sort_keys=True))}
    for name, arr in tensors.items():
        if name == "__header__":
            raise ValueError("reserved tensor name")
        payload[name] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    import json

    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format_version')!r}")
        return header, {k: z[k] for k in z.files if k != "__header__"}
