"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every differentiable operation executed while it is
the active tape and at least one input requires a gradient.  ``Tape.backward``
walks the recorded nodes in exact reverse order and accumulates gradients into
the ``grad`` buffers of the participating tensors.  Tensors created while no
tape is active, or that do not require gradients, are never written to.
"""
from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MaskingError, ShapeError, TrainingError

DTYPE = np.float64

_TAPES: list["Tape"] = []
_FAULTS: set[str] = set()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations needed for one backward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op, inputs, output, backward) -> None:
        output.tape_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> list[str]:
        """Propagate from ``loss``; returns the op kinds in visiting order."""
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or explicit grad, got {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.array(grad, dtype=DTYPE)
        visited = []
        for node in reversed(self.nodes):
            g = node.output.grad
            visited.append(node.op)
            if g is None:
                continue
            grads = node.backward(g)
            flip = node.op in _FAULTS
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if flip:
                    gi = -gi
                # grads are never mutated in place, so sharing buffers is safe
                inp.grad = gi if inp.grad is None else inp.grad + gi
        return visited


@contextlib.contextmanager
def inject_fault(op: str):
    """Debug hook: flip the sign of every gradient produced by ``op``."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(op: str, data, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if a tape is live."""
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("mul", a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return custom_op("div", out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return custom_op("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return custom_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return custom_op("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.broadcast_to(mask, x.shape)
    return custom_op("masked_fill", np.where(mask, value, x.data), (x,),
                     lambda g: (np.where(mask, 0.0, g),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return custom_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return custom_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return custom_op("transpose", np.transpose(x.data, axes), (x,),
                     lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return custom_op("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def take(bank: Tensor, index) -> Tensor:
    """Gather rows of ``bank`` along axis 0.

    Rows that are never indexed receive an exactly-zero gradient, which is
    what keeps unrouted expert weights untouched.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= bank.shape[0]):
        raise IndexError(f"index out of range for bank of {bank.shape[0]}")

    def backward(g):
        gb = np.zeros_like(bank.data)
        for e in np.unique(index):
            gb[e] = g[index == e].sum(axis=0)
        return (gb,)

    return custom_op("take", bank.data[index], (bank,), backward)


# --- reductions ------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # one flat gemm instead of a stack of small ones
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return custom_op("matmul", (a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return custom_op("matmul", a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilised softmax; ``-inf`` entries come out as exact zeros."""
    top = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(top).any():
        raise MaskingError("softmax row has no finite entry (everything masked)")
    e = np.exp(x.data - top)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    top = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(top).any():
        raise MaskingError("log_softmax row has no finite entry (everything masked)")
    shifted = x.data - top
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return custom_op("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gain.data
        gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, bias: Tensor | None = None) -> Tensor:
    """Same-length dilated cross-correlation over time.

    ``x`` is ``[..., T, Cin]`` and ``kernel`` is ``[w, Cin, Cout]`` with odd ``w``;
    the time axis is zero padded by ``dilation * (w - 1) / 2`` on both sides.
    """
    w, cin, cout = kernel.shape
    if w % 2 == 0:
        raise ShapeError(f"conv1d kernel width must be odd, got {w}")
    if x.ndim < 2 or x.shape[-1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    T = x.shape[-2]
    pad = dilation * (w - 1) // 2
    if T + 2 * pad < dilation * (w - 1) + 1:
        raise ShapeError(f"conv1d kernel span {dilation * (w - 1) + 1} wider than padded input {T + 2 * pad}")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-1] + (cout,))
    for j in range(w):
        out += xp[..., j * dilation:j * dilation + T, :] @ kernel.data[j]
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += bias.data
        inputs = (x, kernel, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        g2 = g.reshape(-1, cout)
        for j in range(w):
            sl = xp[..., j * dilation:j * dilation + T, :]
            gxp[..., j * dilation:j * dilation + T, :] += g @ kernel.data[j].T
            gk[j] = sl.reshape(-1, cin).T @ g2
        gx = gxp[..., pad:pad + T, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return custom_op("conv1d", out, inputs, backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) strided 2-D cross-correlation, ``[B, Cin, H, W]`` input."""
    cout, cin, kh_, kw_ = kernel.shape
    B, c, H, W = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if H < kh_ or W < kw_:
        raise ShapeError(f"conv2d kernel {kernel.shape[2:]} larger than input {(H, W)}")
    Ho = (H - kh_) // stride + 1
    Wo = (W - kw_) // stride + 1

    def window(arr, i, j):
        return arr[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]

    out = np.zeros((B, cout, Ho, Wo))
    for i in range(kh_):
        for j in range(kw_):
            out += np.einsum("bchw,oc->bohw", window(x.data, i, j), kernel.data[:, :, i, j])
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += bias.data[None, :, None, None]
        inputs = (x, kernel, bias)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(kh_):
            for j in range(kw_):
                window(gx, i, j)[...] += np.einsum("bohw,oc->bchw", g, kernel.data[:, :, i, j])
                gk[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window(x.data, i, j))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return custom_op("conv2d", out, inputs, backward)


# --- optimisation ----------------------------------------------------------

@dataclass(frozen=True)
class NoamSchedule:
    """lr = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)"""

    d_model: int
    warmup: int
    scale: float = 1.0

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule step starts at 1")
        return self.scale * self.d_model ** -0.5 * min(step ** -0.5, step * self.warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              step: int, schedule: Callable[[int], float]) -> float:
    """Apply one bias-corrected Adam update in place; returns the learning rate used."""
    if step < 1:
        raise ValueError("adam step starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", param=name, step=step)
    lr = schedule(step)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(builtins.sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total



# --- gradient checking -----------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        fp = f()
        x.flat[i] = orig - eps
        fm = f()
        x.flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``fn`` receives the input tensors and must return a scalar Tensor.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: float(fn(*inputs).data), t.data, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
