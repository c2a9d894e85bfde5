"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape`.  Creation
order on a tape is already a topological order, so the backward pass is a
single reverse sweep over the recorded nodes.  Outside a tape every operation
evaluates eagerly and records nothing, which is how inference runs.

The op set is deliberately small: what dense networks, Runge-Kutta updates
and Gaussian ELBO terms need, and nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DiffValue", "Tape", "NonFiniteGradient", "backward", "as_value",
    "add", "sub", "mul", "neg", "matmul", "dense", "elu", "relu", "exp", "log",
    "softplus", "square", "clamp", "concat", "stack", "reshape", "take", "transpose",
    "sum", "mean", "sample",
    "MlpParams", "init_mlp", "mlp_forward",
    "AdamState", "adam_init", "adam_step", "global_grad_norm",
    "save_params", "load_params",
]

_TAPES: list["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient contains NaN or inf and the update must not run."""


class Tape:
    """Wengert list of recorded operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    receives the records.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[DiffValue, tuple[DiffValue, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "DiffValue", parents: tuple["DiffValue", ...], fn: BackwardFn) -> int:
        self.nodes.append((out, parents, fn))
        return len(self.nodes) - 1


class DiffValue:
    """Dense float64 array that can take part in gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "tape")
    __array_priority__ = 100.0  # numpy defers binary operators to us

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self.tape: Tape | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

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
        if isinstance(other, DiffValue):
            raise TypeError("division by a DiffValue is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _result(data: np.ndarray, parents: tuple[DiffValue, ...], fn: BackwardFn) -> DiffValue:
    if not _TAPES or not any(p.requires_grad for p in parents):
        return DiffValue(data)
    tape = _TAPES[-1]
    out = DiffValue(data, requires_grad=True)
    out.tape = tape
    out.node_id = tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: DiffValue, params: Sequence[DiffValue] | None = None) -> list[np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf reachable from ``loss``.

    When ``params`` is given their ``.grad`` fields are reset first, so a
    parameter the loss does not depend on ends up with an all-zero gradient.
    Returns the gradients of ``params`` in order (empty list otherwise).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if loss.tape is None or loss.node_id is None:
        return [p.grad for p in params] if params is not None else []

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # keys whose pending array may be updated in place
    nodes = loss.tape.nodes
    for k in range(loss.node_id, -1, -1):
        out, parents, fn = nodes[k]
        key_out = id(out)
        g = pending.pop(key_out, None)
        if g is None:
            continue
        owned.discard(key_out)
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id is None:
                if isinstance(pg, _IndexedGrad):
                    pg = pg.dense()
                p.grad = pg.copy() if p.grad is None else p.grad + pg
                continue
            key = id(p)
            prev = pending.get(key)
            if isinstance(pg, _IndexedGrad):
                if prev is None:
                    prev = np.zeros(pg.shape)
                elif key not in owned:
                    prev = np.array(prev)
                prev[pg.index] += pg.g
                pending[key] = prev
                owned.add(key)
            elif prev is None:
                pending[key] = pg
            else:
                pending[key] = prev + pg
                owned.add(key)
    return [p.grad for p in params] if params is not None else []


class _IndexedGrad:
    """Gradient that is nonzero only at ``index``; accumulated without a dense temporary."""

    __slots__ = ("index", "g", "shape")

    def __init__(self, index, g: np.ndarray, shape: tuple[int, ...]):
        self.index, self.g, self.shape = index, g, shape

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.index] = self.g
        return full


# --------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), fn)


def neg(a) -> DiffValue:
    a = as_value(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> DiffValue:
    """``a @ b`` with ``b`` a matrix; ``a`` may carry leading batch axes."""
    a, b = as_value(a), as_value(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), fn)


def _elu_fwd(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


_ACTIVATIONS = ("elu", "relu", "identity")


def dense(x, weight, bias, activation: str = "identity") -> DiffValue:
    """Fused ``act(x @ W + b)``; one tape node instead of three.

    ``b`` is normally a vector but may be any array broadcastable against the
    pre-activation, which lets callers fold a precomputed input term into it.
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x, weight, bias = as_value(x), as_value(weight), as_value(bias)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"dense input width {x.shape[-1]} does not match layer input width {weight.shape[0]}")
    xd, wd = x.data, weight.data
    z = xd @ wd
    z += bias.data
    if activation == "elu":
        out = _elu_fwd(z)
    elif activation == "relu":
        out = np.maximum(z, 0.0)
    else:
        out = z

    def fn(g):
        if activation == "elu":
            g = np.where(z > 0.0, g, g * (out + 1.0))
        elif activation == "relu":
            g = g * (z > 0.0)
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        gb = None
        if bias.requires_grad:
            gb = g2.sum(axis=0) if bias.ndim == 1 else _unbroadcast(g, bias.shape)
        return gx, gw, gb

    return _result(out, (x, weight, bias), fn)


def elu(a) -> DiffValue:
    a = as_value(a)
    z = a.data
    out = _elu_fwd(z)
    return _result(out, (a,), lambda g: (np.where(z > 0.0, g, g * (out + 1.0)),))


def relu(a) -> DiffValue:
    a = as_value(a)
    z = a.data
    return _result(np.maximum(z, 0.0), (a,), lambda g: (g * (z > 0.0),))


def exp(a) -> DiffValue:
    a = as_value(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> DiffValue:
    a = as_value(a)
    z = a.data
    return _result(np.log(z), (a,), lambda g: (g / z,))


def softplus(a) -> DiffValue:
    a = as_value(a)
    z = a.data
    out = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
    return _result(out, (a,), lambda g: (g / (1.0 + np.exp(-z)),))


def square(a) -> DiffValue:
    a = as_value(a)
    z = a.data
    return _result(z * z, (a,), lambda g: (2.0 * g * z,))


def clamp(a, lo: float, hi: float) -> DiffValue:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_value(a)
    z = a.data
    inside = (z >= lo) & (z <= hi)
    return _result(np.clip(z, lo, hi), (a,), lambda g: (g * inside,))


def sample(mu, sigma, eps: np.ndarray) -> DiffValue:
    """Reparameterized draw ``mu + eps * sigma`` with externally fixed noise."""
    mu, sigma = as_value(mu), as_value(sigma)
    eps = np.asarray(eps, dtype=np.float64)
    sm, ss = mu.shape, sigma.shape
    return _result(mu.data + eps * sigma.data, (mu, sigma),
                   lambda g: (_unbroadcast(g, sm), _unbroadcast(g * eps, ss)))


# --------------------------------------------------------------------------
# structural ops


def concat(values: Sequence, axis: int = -1) -> DiffValue:
    vals = [as_value(v) for v in values]
    if len(vals) == 1:
        return vals[0]
    datas = [v.data for v in vals]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def fn(g):
        return np.split(g, bounds, axis=ax)

    return _result(out, tuple(vals), fn)


def stack(values: Sequence, axis: int = 0) -> DiffValue:
    vals = [as_value(v) for v in values]
    out = np.stack([v.data for v in vals], axis=axis)
    ax = axis % out.ndim

    def fn(g):
        return [np.take(g, k, axis=ax) for k in range(len(vals))]

    return _result(out, tuple(vals), fn)


def reshape(a, shape: tuple[int, ...]) -> DiffValue:
    a = as_value(a)
    s = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(s),))


def take(a, index) -> DiffValue:
    """Basic (slice) indexing; ``a[index]``."""
    a = as_value(a)
    src = a.data

    return _result(np.array(src[index]), (a,), lambda g: (_IndexedGrad(index, g, src.shape),))


def transpose(a) -> DiffValue:
    """Matrix transpose of a 2-D value."""
    a = as_value(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D value")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum(a, axis=None) -> DiffValue:  # noqa: A001 - mirrors numpy naming
    a = as_value(a)
    s = a.shape
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s),)

    return _result(out, (a,), fn)


def mean(a, axis=None) -> DiffValue:
    a = as_value(a)
    s = a.shape
    out = a.data.mean(axis=axis)
    n = a.data.size / max(out.size, 1)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, s),)

    return _result(out, (a,), fn)


# --------------------------------------------------------------------------
# multilayer perceptrons


@dataclass
class MlpParams:
    """Weights ``W_k`` of shape ``(in, out)`` and biases ``b_k`` of shape ``(out,)``."""

    weights: list[DiffValue]
    biases: list[DiffValue]
    activation: str = "elu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {k} expects width {w.shape[0]}, previous layer emits "
                    f"{self.weights[k - 1].shape[1]}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1] if self.n_layers > 1 else 0

    def parameters(self) -> list[DiffValue]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self, prefix: str) -> dict[str, DiffValue]:
        named = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}.W{k}"] = w
            named[f"{prefix}.b{k}"] = b
        return named


def init_mlp(sizes: Sequence[int], activation: str, rng: np.random.Generator) -> MlpParams:
    """Uniform init in ``+-sqrt(1/fan_in)`` for weights and biases alike."""
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / fan_in) if fan_in else 0.0
        weights.append(DiffValue(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        biases.append(DiffValue(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))
    return MlpParams(weights, biases, activation)


def mlp_forward(params: MlpParams, x) -> DiffValue:
    x = as_value(x)
    if x.shape[-1] != params.in_features:
        raise ValueError(
            f"MLP input has last dimension {x.shape[-1]}, first layer expects {params.in_features}")
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = dense(x, w, b, params.activation if k < last else "identity")
    return x


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_init(params: Sequence[DiffValue], **hyper) -> AdamState:
    state = AdamState(**hyper)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.add.reduce([np.vdot(g, g) for g in grads], dtype=np.float64)))


def adam_step(state: AdamState, params: Sequence[DiffValue],
              grads: Sequence[np.ndarray]) -> list[DiffValue]:
    """Clip by global norm, apply decoupled weight decay, then the Adam update.

    Parameters are updated in place and returned for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradient(f"gradient norm is {norm}; update skipped at step {state.step}")
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / norm

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if scale != 1.0:
            g = g * scale
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return list(params)


# --------------------------------------------------------------------------
# checkpoints: text manifest + one flat little-endian float64 blob

_MANIFEST = "params.manifest"
_BLOB = "params.bin"


def save_params(directory: str | Path, named: Mapping[str, "DiffValue | np.ndarray"]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["format=bnode-params", "version=1", "dtype=float64", "byteorder=little"]
    offset = 0
    with open(directory / _BLOB, "wb") as fh:
        for name, value in named.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter name {name!r} contains whitespace")
            # np.array keeps 0-d shapes, ascontiguousarray would promote them to 1-d
            arr = np.array(value.data if isinstance(value, DiffValue) else value,
                           dtype="<f8", order="C")
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"param name={name} shape={shape} offset={offset} count={arr.size}")
            fh.write(arr.tobytes(order="C"))
            offset += arr.nbytes
    (directory / _MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_params(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    blob = (directory / _BLOB).read_bytes()
    out: dict[str, np.ndarray] = {}
    for line in (directory / _MANIFEST).read_text().splitlines():
        if not line.startswith("param "):
            continue
        fields = dict(tok.split("=", 1) for tok in line.split()[1:])
        shape = tuple(int(s) for s in fields["shape"].split(",") if s)
        offset, count = int(fields["offset"]), int(fields["count"])
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        out[fields["name"]] = arr.reshape(shape).astype(np.float64)
    return out
