"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable computation in the package goes through
:func:`apply_primitive`.  A primitive returns its output together with a
closure mapping the upstream gradient to one gradient per input; the graph
is recorded on the output tensors and linearised into a :class:`Tape` when
:func:`backward` runs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PRIMITIVES = (
    "matmul",
    "add",
    "mul",
    "conv1d",
    "layer_norm",
    "gelu",
    "masked_softmax",
    "embedding_lookup",
    "cross_entropy_masked",
    "l2_normalize",
    "concat",
    "slice",
    "reshape",
    "mean",
    "sum",
    "gradient_reverse",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _Config:
    grad_enabled = True
    dtype = np.float32


def default_dtype():
    return _Config.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    old = _Config.dtype
    _Config.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _Config.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _Config.grad_enabled
    _Config.grad_enabled = False
    try:
        yield
    finally:
        _Config.grad_enabled = old


class Node:
    __slots__ = ("kind", "inputs", "backward", "saved")

    def __init__(self, kind, inputs, backward, saved=None):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.saved = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _Config.dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def detach(self) -> "Tensor":
        """A constant view of the same values; the stop-gradient operator."""
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


@dataclass
class Tape:
    """Recorded primitive applications in topological order."""

    nodes: list[Node] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(nodes=[t._node for t in order], outputs=order)

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------- helpers


def _suffix_broadcast(a: np.ndarray, b: np.ndarray, kind: str):
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} only broadcast over leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ------------------------------------------------------------- primitives


def _matmul(a, b, transpose_b=False):
    if a.ndim < 2:
        raise ShapeError("matmul: left operand must be at least 2-D")
    bb = _swap(b) if transpose_b else b
    if bb.ndim < 2 or a.shape[-1] != bb.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} (transpose_b={transpose_b})")
    if bb.ndim > 2 and bb.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    out = a @ bb

    def backward(g):
        ga = g @ _swap(bb)
        if b.ndim == 2:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = g2.T @ a2 if transpose_b else a2.T @ g2
        else:
            gb = _swap(g) @ a if transpose_b else _swap(a) @ g
        return ga, gb

    return out, backward


def _add(a, b):
    _suffix_broadcast(a, b, "add")
    out = a + b

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, backward


def _mul(a, b):
    _suffix_broadcast(a, b, "mul")
    out = a * b

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, backward


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _conv1d(x, w, b=None, stride=1, padding=0):
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} vs kernel {w.shape}")
    m, cin, length = x.shape
    cout, _, k = w.shape
    lout = conv_output_length(length, k, stride, padding)
    if lout < 1:
        raise ShapeError("conv1d: kernel longer than padded input")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d: bias {b.shape} for {cout} output channels")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    starts = stride * np.arange(lout)
    idx = starts[:, None] + np.arange(k)[None, :]
    cols = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(m * lout, cin * k)
    w2 = w.reshape(cout, cin * k)
    out = (cols @ w2.T).reshape(m, lout, cout).transpose(0, 2, 1)
    if b is not None:
        out = out + b[:, None]

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(m * lout, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ w2).reshape(m, lout, cin, k).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        for kk in range(k):
            gxp[:, :, starts + kk] += gcols[..., kk]
        gx = gxp[:, :, padding:padding + length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return np.ascontiguousarray(out), backward


def _layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} for width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return out, backward


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu(x):
    # tanh approximation
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return out, backward


def _masked_softmax(x, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        if x.shape[x.ndim - mask.ndim:] != mask.shape:
            raise ShapeError(f"masked_softmax: mask {mask.shape} for scores {x.shape}")
        mask = np.broadcast_to(mask, x.shape)
    any_row = mask.any(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        xm = np.where(mask, x, -np.inf)
        top = np.where(any_row, xm.max(axis=-1, keepdims=True), 0.0)
        e = np.exp(xm - top)
    s = e.sum(axis=-1, keepdims=True)
    # fully masked rows (padding queries) yield all-zero weights
    out = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out.astype(x.dtype, copy=False), backward


def _embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_lookup: table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    out = table[ids]

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, backward


def _cross_entropy_masked(logits, targets, mask):
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    sel = np.flatnonzero(mask.reshape(-1))
    if sel.size == 0:
        raise ValueError("cross_entropy_masked: no positions selected by the mask")
    tgt = targets.reshape(-1)[sel]
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError("cross_entropy_masked: target id outside the vocabulary")
    rows = flat[sel]
    top = rows.max(axis=-1, keepdims=True)
    shifted = rows - top
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(sel.size), tgt]
    n = sel.size
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        gflat = np.zeros_like(flat)
        gflat[sel] = p * (g / n)
        return (gflat.reshape(logits.shape),)

    return out, backward


def _l2_normalize(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm vector has no direction")
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return out, backward


def _concat(*xs, axis=0):
    out = np.concatenate(xs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, backward


def _slice(x, key):
    out = x[key]
    if out.base is not None:
        out = out.copy()

    def backward(g):
        gx = np.zeros_like(x)
        gx[key] = g
        return (gx,)

    return out, backward


def _reshape(x, shape):
    out = x.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return out, backward


def _reduce_sum(x, axis=None, keepdims=False):
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, backward


def _reduce_mean(x, axis=None, keepdims=False):
    out, back = _reduce_sum(x, axis, keepdims)
    count = max(x.size // max(out.size, 1), 1)
    out = out / count

    def backward(g):
        return (back(g)[0] / count,)

    return np.asarray(out, dtype=x.dtype), backward


def _gradient_reverse(x, lam=1.0):
    if lam < 0:
        raise ValueError(f"gradient_reverse: lambda must be >= 0, got {lam}")

    def backward(g):
        return (-lam * g,)

    return x.copy(), backward


_IMPL: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "conv1d": _conv1d,
    "layer_norm": _layer_norm,
    "gelu": _gelu,
    "masked_softmax": _masked_softmax,
    "embedding_lookup": _embedding_lookup,
    "cross_entropy_masked": _cross_entropy_masked,
    "l2_normalize": _l2_normalize,
    "concat": _concat,
    "slice": _slice,
    "reshape": _reshape,
    "mean": _reduce_mean,
    "sum": _reduce_sum,
    "gradient_reverse": _gradient_reverse,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one primitive and record it for differentiation when needed.

    Raises:
        KeyError: unknown ``kind``.
        ShapeError: inputs do not conform to ``kind``.
        NonFiniteError: the output contains NaN or Inf.
    """
    try:
        impl = _IMPL[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}") from None
    inputs = tuple(inputs)
    attrs = attrs or {}
    out, backward = impl(*(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind}: non-finite output")
    dtype = inputs[0].dtype if inputs else _Config.dtype
    result = Tensor(np.asarray(out, dtype=dtype), dtype=dtype)
    if _Config.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(kind, inputs, backward, saved=attrs)
    return result


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded graph is consumed: intermediate tensors lose their nodes, so a
    second call on the same loss raises.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is detached from every trainable leaf")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return Tape()
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        node = out._node
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for out in tape.outputs:
        out._node = None
    return tape


# ------------------------------------------------------------ thin wrappers


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    return apply_primitive("matmul", (_lift(a), _lift(b)), {"transpose_b": transpose_b})


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    return apply_primitive("add", (a, _lift(b, a)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    return apply_primitive("mul", (a, _lift(b, a)))


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv1d", inputs, {"stride": stride, "padding": padding})


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", (x, gamma, beta), {"eps": eps})


def gelu(x) -> Tensor:
    return apply_primitive("gelu", (x,))


def masked_softmax(x, mask) -> Tensor:
    return apply_primitive("masked_softmax", (x,), {"mask": mask})


def embedding_lookup(table, ids) -> Tensor:
    return apply_primitive("embedding_lookup", (table,), {"ids": np.asarray(ids)})


def cross_entropy_masked(logits, targets, mask) -> Tensor:
    return apply_primitive(
        "cross_entropy_masked", (logits,), {"targets": np.asarray(targets), "mask": np.asarray(mask)}
    )


def l2_normalize(x) -> Tensor:
    return apply_primitive("l2_normalize", (x,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(xs), {"axis": axis})


def slice_(x, key) -> Tensor:
    return apply_primitive("slice", (x,), {"key": key})


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", (x,), {"shape": tuple(shape)})


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", (x,), {"axis": axis, "keepdims": keepdims})


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", (x,), {"axis": axis, "keepdims": keepdims})


def gradient_reverse(x, lam: float) -> Tensor:
    return apply_primitive("gradient_reverse", (x,), {"lam": float(lam)})


# ------------------------------------------------------------------- oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 100,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare autodiff gradients with central differences.

    ``f`` closes over ``params`` and returns a scalar loss. Returns the max over
    sampled coordinates of ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check needs 64-bit parameters")
        p.grad = None
    loss = f()
    reference = loss.data.copy()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(f().data)

    first, second = value(), value()
    if first != second or first != float(reference):
        raise RuntimeError("finite_diff_check: f is not deterministic")

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[which], int(flat - offsets[which])
        orig = p.data.flat[i]
        p.data.flat[i] = orig + step
        up = value()
        p.data.flat[i] = orig - step
        down = value()
        p.data.flat[i] = orig
        cd = (up - down) / (2 * step)
        a = float(analytic[which].flat[i])
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst
