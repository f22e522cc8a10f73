"""Reverse-mode automatic differentiation over dense numpy arrays.

Just enough tensor machinery for the summarization model: a ``Tensor``
wrapping an ndarray, fused forward ops with hand-written backward rules, a
``ComputationTape`` that replays the recorded graph in reverse topological
order, and a central-finite-difference gradient checker.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or the second must be a suffix of the first (bias adds), or both must have
equal rank with explicit size-1 axes.  Anything fancier needs a reshape.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "Parameter",
    "ComputationTape",
    "ShapeError",
    "NumericsError",
    "no_grad",
    "set_debug_checks",
    "backward",
    "grad_check",
    "GradCheckReport",
    # ops
    "add", "sub", "mul", "scale", "matmul", "transpose", "permute", "reshape",
    "concat", "take_rows", "embedding_lookup", "take_per_row", "gather_pairs",
    "softmax", "layer_norm", "linear", "gelu", "sigmoid", "log", "dropout",
    "tensor_sum", "tensor_mean", "cross_entropy", "binary_cross_entropy",
]

_GRAD_ENABLED = True
_DEBUG_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Incompatible operand shapes; the message names both."""


class NumericsError(FloatingPointError):
    """A forward op produced NaN/Inf while debug checks were enabled."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion run after every forward op."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = enabled


class Tensor:
    """Dense array with optional gradient tracking.

    ``grad`` accumulates additively across backward passes; call sites that
    want fresh gradients zero it explicitly.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _basic_index(self, key)


class Parameter(Tensor):
    """Named learnable tensor; ``decay`` marks eligibility for weight decay."""

    __slots__ = ("name", "decay")

    def __init__(self, name: str, data, decay: bool = True):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Build a graph node; records only parents that require gradients."""
    if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(tracked) and _GRAD_ENABLED)
    if out.requires_grad:
        out._parents = tracked
        out._backward = backward
    return out


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if len(sb) < len(sa) and sb == sa[len(sa) - len(sb):]:
        return
    if len(sb) == len(sa) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ShapeError(f"shapes {sa} and {sb} are not compatible here")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ad, b.shape))

    return _make(ad * bd, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g, a=a, s=s):
        a.accumulate_grad(g * s)

    return _make(a.data * s, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape} do not align")
    if ad.ndim != bd.ndim and min(ad.ndim, bd.ndim) != 2:
        raise ShapeError(f"matmul batch dims of {ad.shape} and {bd.shape} must match (or one side be 2-d)")
    if ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims of {ad.shape} and {bd.shape} must match")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(ad @ bd, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (matrix transpose under leading batch dims)."""

    def bwd(g, a=a):
        a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), bwd, "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g, a=a):
        a.accumulate_grad(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bwd, "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.data.shape

    def bwd(g, a=a):
        a.accumulate_grad(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tuple(tensors)):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def _basic_index(a: Tensor, key) -> Tensor:
    def bwd(g, a=a, key=key):
        ga = np.zeros_like(a.data)
        ga[key] += g
        a.accumulate_grad(ga)

    return _make(a.data[key], (a,), bwd, "index")


# ---------------------------------------------------------------------------
# gathers


def take_rows(a: Tensor, ids) -> Tensor:
    """Gather rows along axis 0; ``ids`` may repeat (backward scatter-adds)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for table with {a.shape[0]} rows")

    def bwd(g, a=a, ids=ids):
        ga = np.zeros_like(a.data)
        np.add.at(ga, ids, g)
        a.accumulate_grad(ga)

    return _make(a.data[ids], (a,), bwd, "take_rows")


embedding_lookup = take_rows


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., r, c] = a[..., r, idx[r, c]] for an integer matrix ``idx``.

    The index matrix is shared across leading batch axes; duplicated column
    indices accumulate in the backward pass.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or a.ndim < 2 or a.shape[-2] != idx.shape[0]:
        raise ShapeError(f"take_per_row needs a [..., R, E] tensor and [R, C] indices; got {a.shape} and {idx.shape}")
    rows, cols = idx.shape
    lead = a.shape[:-2]

    def bwd(g, a=a, idx=idx):
        ga = np.zeros_like(a.data)
        if lead:
            batch = int(np.prod(lead))
            g3 = g.reshape(batch, rows, cols)
            ga3 = ga.reshape(batch, rows, a.shape[-1])
            bi = np.arange(batch)[:, None, None]
            ri = np.arange(rows)[None, :, None]
            np.add.at(ga3, (bi, ri, idx[None, :, :]), g3)
        else:
            np.add.at(ga, (np.arange(rows)[:, None], idx), g)
        a.accumulate_grad(ga)

    idx_b = np.broadcast_to(idx, lead + idx.shape)
    return _make(np.take_along_axis(a.data, idx_b, axis=-1), (a,), bwd, "take_per_row")


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """out[m] = a[rows[m], cols[m]] for a 2-d tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bwd(g, a=a):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        a.accumulate_grad(ga)

    return _make(a.data[rows, cols], (a,), bwd, "gather_pairs")


# ---------------------------------------------------------------------------
# neural-net ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=a, y=y, axis=axis):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate_grad((g - inner) * y)

    return _make(y, (a,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},); got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gxhat = g * gain.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gxhat - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bwd, "layer_norm")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shapes {x.shape} and {w.shape} do not align")
    din, dout = w.shape
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, x=x, w=w, b=b):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.reshape(-1, din).T @ g.reshape(-1, dout))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.reshape(-1, dout).sum(axis=0))

    return _make(y, parents, bwd, "linear")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g, x=x, cdf=cdf):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x.accumulate_grad(g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), bwd, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def bwd(g, x=x, y=y):
        x.accumulate_grad(g * y * (1.0 - y))

    return _make(y, (x,), bwd, "sigmoid")


def log(x: Tensor) -> Tensor:
    def bwd(g, x=x):
        x.accumulate_grad(g / x.data)

    return _make(np.log(x.data), (x,), bwd, "log")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: active units are rescaled by 1/(1-p) at train time."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bwd(g, x=x, mask=mask):
        x.accumulate_grad(g * mask)

    return _make(x.data * mask, (x,), bwd, "dropout")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g, x=x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]

    def bwd(g, x=x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape) / count)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd, "mean")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood over a [T, V] logit matrix."""
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeError(f"cross_entropy targets must have shape ({t},); got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of vocabulary of size {v}")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    nll = lse - logits.data[np.arange(t), targets]

    def bwd(g, logits=logits, e=e, z=z):
        p = e / z
        p[np.arange(t), targets] -= 1.0
        logits.accumulate_grad(p * (g / t))

    return _make(np.asarray(nll.mean()), (logits,), bwd, "cross_entropy")


def binary_cross_entropy(probs: Tensor, labels, reduction: str = "sum", clamp: float = 1e-7) -> Tensor:
    """Bernoulli cross-entropy over a vector of probabilities.

    Probabilities outside (clamp, 1-clamp) are clamped and flagged with a
    warning; the clamped entries get zero gradient.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=probs.dtype)
    p = probs.data
    clamped = (p < clamp) | (p > 1.0 - clamp)
    if clamped.any():
        warnings.warn(f"binary_cross_entropy clamped {int(clamped.sum())} saturated probabilities", RuntimeWarning)
    pc = np.clip(p, clamp, 1.0 - clamp)
    losses = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))
    n = max(losses.size, 1)

    def bwd(g, probs=probs, pc=pc, clamped=clamped):
        dp = -(labels / pc - (1.0 - labels) / (1.0 - pc))
        dp[clamped] = 0.0
        if reduction == "mean":
            dp /= n
        probs.accumulate_grad(dp * g)

    value = losses.sum() if reduction == "sum" else losses.mean()
    return _make(np.asarray(value), (probs,), bwd, "binary_cross_entropy")


# ---------------------------------------------------------------------------
# backward machinery


class ComputationTape:
    """The recorded graph under a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.root = root
        self.nodes = order

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Run every recorded backward rule once, children before parents.

        Intermediate gradient buffers are dropped as soon as they are
        consumed; parameters keep accumulating across calls.
        """
        self.root.grad = np.ones_like(self.root.data) if seed is None else np.asarray(seed)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not isinstance(node, Parameter):
                node.grad = None


def backward(loss: Tensor) -> None:
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss; got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor detached from any parameter")
    ComputationTape(loss).backward()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format(self) -> str:
        width = max((len(e.name) for e in self.entries), default=4)
        lines = [
            f"{e.name:<{width}}  max_rel_err={e.max_rel_err:.3e}  {'ok' if e.passed else 'FAIL'}"
            for e in self.entries
        ]
        verdict = "all gradients match" if self.passed else "GRADIENT MISMATCH"
        lines.append(f"-- {verdict} (tol={self.tol:g})")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-3,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic (dropout off, fixed seeds) and is evaluated
    twice up front to detect hidden randomness.  Relative error per element
    is |a - b| / max(|a|, |b|, 1e-8).
    """
    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise RuntimeError(f"function is not deterministic: {v1!r} != {v2!r}")

    for p in params:
        p.zero_grad()
    backward(f())
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    entries = []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * eps)
            ana = analytic[p.name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-8)
            rel = float((np.abs(ana - numeric) / denom).max()) if flat.size else 0.0
            entries.append(GradCheckEntry(p.name, rel, rel < tol))
    return GradCheckReport(entries, tol)
