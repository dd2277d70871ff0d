"""Dense float64 tensors with tape-based reverse-mode gradients.

Only the operation set needed by the segmentation network and the two
correspondence losses is provided.  Ops record onto the thread's active
:class:`Tape` whenever one of their inputs requires a gradient; outside a
tape everything is evaluated eagerly without bookkeeping.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, LabelError, NumericError

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered list of op records for one forward pass.

    Use as a context manager; :meth:`backward` replays the records in
    exact reverse push order and accumulates into ``.grad`` buffers.
    Gradients accumulate, so call :meth:`zero_grads` (or zero the leaves)
    before replaying a second time.
    """

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def push(self, rec: _Record) -> None:
        self.records.append(rec)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        if loss.grad is None:
            raise NumericError("backward() called on a tensor that does not require grad")
        loss.grad += seed
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp.grad += gi

    def zero_grads(self) -> None:
        for rec in self.records:
            for t in rec.inputs:
                t.zero_grad()
            rec.output.zero_grad()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in output")


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, out)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.name = None
    res.requires_grad = needs
    res.grad = np.zeros_like(out) if needs else None
    if needs:
        tape.push(_Record(op, tuple(inputs), res, backward))
    return res


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scale", x.data * s, (x,), lambda g: (g * s,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def backward(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _make("silu", xd * sig, (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-row bias ``b[C]`` to ``x[C, ...]``."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} vs input {x.shape}")
    shape = (-1,) + (1,) * (x.data.ndim - 1)
    axes = tuple(range(1, x.data.ndim))
    return _make("add_bias", x.data + b.data.reshape(shape), (x, b),
                 lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over every entry, max-shifted."""
    xd = x.data
    m = xd.max()
    e = np.exp(xd - m)
    s = e.sum()
    return _make("logsumexp", np.array(m + np.log(s)), (x,), lambda g: (g * e / s,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("permute", np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(xs), backward)


def stack(xs: Sequence[Tensor]) -> Tensor:
    try:
        out = np.stack([t.data for t in xs])
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make("stack", out, tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))))


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """``np.take`` with a scatter-add backward; a scalar index drops the axis."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise LabelError(f"take: index out of range for axis of extent {x.shape[axis]}")
    shape = x.shape
    sl = (slice(None),) * (axis % x.data.ndim) + (idx,)

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, sl, g)
        return (gx,)

    return _make("take", np.take(x.data, idx, axis=axis), (x,), backward)


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather ``x[rows[k], cols[k]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _make("pick", x.data[rows, cols], (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


MEASURES = ("dot", "neg_l2", "cosine")


def pairwise_similarity(a: Tensor, b: Tensor, measure: str = "neg_l2") -> Tensor:
    """Similarity between the columns of ``a[C×M]`` and ``b[C×N]``.

    ``neg_l2`` is the negative squared Euclidean distance; ``cosine``
    rejects zero columns.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"pairwise_similarity: channel mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if measure == "dot":
        return _make("sim_dot", ad.T @ bd, (a, b), lambda g: (bd @ g.T, ad @ g))
    if measure == "neg_l2":
        na = (ad * ad).sum(axis=0)
        nb = (bd * bd).sum(axis=0)
        out = 2.0 * (ad.T @ bd) - na[:, None] - nb[None, :]

        def backward(g):
            ga = 2.0 * (bd @ g.T) - 2.0 * ad * g.sum(axis=1)[None, :]
            gb = 2.0 * (ad @ g) - 2.0 * bd * g.sum(axis=0)[None, :]
            return ga, gb

        return _make("sim_neg_l2", out, (a, b), backward)
    if measure == "cosine":
        la = np.sqrt((ad * ad).sum(axis=0))
        lb = np.sqrt((bd * bd).sum(axis=0))
        if np.any(la == 0.0) or np.any(lb == 0.0):
            raise DegenerateInputError("cosine similarity of a zero column")
        ua, ub = ad / la, bd / lb
        out = ua.T @ ub

        def backward(g):
            gua = ub @ g.T
            gub = ua @ g
            ga = (gua - ua * (ua * gua).sum(axis=0)) / la
            gb = (gub - ub * (ub * gub).sum(axis=0)) / lb
            return ga, gb

        return _make("sim_cosine", out, (a, b), backward)
    raise DimensionError(f"unknown similarity measure {measure!r}")


def l2_normalize(x: Tensor, axis: int = 0) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("l2_normalize of a zero vector")
    u = xd / n

    def backward(g):
        return ((g - u * (u * g).sum(axis=axis, keepdims=True)) / n,)

    return _make("l2_normalize", u, (x,), backward)


# ---------------------------------------------------------------- softmax family


def _softmax_np(xd: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    p = _softmax_np(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make("softmax", p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the rows of ``logits[N×K]``."""
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects logits of shape N×K")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n == 0:
        raise DimensionError("cross_entropy over zero rows")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"cross_entropy: label outside [0, {k})")
    xd = logits.data
    m = xd.max(axis=1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", np.array(loss), (logits,), backward)


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: [N, C, Hp, Wp] -> [N, C*k*k, ho*wo]
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Batched 2-D cross-correlation: ``x[N,Cin,H,W]`` with ``w[Cout,Cin,k,k]``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    cout, cin, k, _ = w.shape
    pad = k // 2 if padding is None else padding
    n, _, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = np.einsum("oc,ncp->nop", wm, cols, optimize=True)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    xshape = xp.shape

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nop,ncp->oc", g2, cols, optimize=True).reshape(w.shape)
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = np.einsum("oc,nop->ncp", wm, g2, optimize=True).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros(xshape)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += gcols[:, :, dy, dx]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("conv2d", out, inputs, backward)


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Half-pixel-centred bilinear interpolation matrix of shape [n_in*factor, n_in]."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Separable bilinear upsampling of ``x[N,C,H,W]`` by an integer factor."""
    if x.data.ndim != 4:
        raise DimensionError("upsample_bilinear expects N×C×H×W")
    uy = bilinear_matrix(x.shape[2], factor)
    ux = bilinear_matrix(x.shape[3], factor)
    out = np.einsum("yh,nchw,xw->ncyx", uy, x.data, ux, optimize=True)

    def backward(g):
        return (np.einsum("yh,ncyx,xw->nchw", uy, g, ux, optimize=True),)

    return _make("upsample", out, (x,), backward)


# ---------------------------------------------------------------- gradient oracle


@dataclass
class GradReport:
    max_rel_err: float
    tol: float
    n_coords: int
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      tol: float = 1e-4, floor: float = 1e-6) -> GradReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is ~0 from dividing
    round-off by round-off.
    """
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        if y.size != 1:
            raise DimensionError("finite_diff_check needs a scalar function")
        _check_finite("finite_diff_check", y.data)
        if y.requires_grad:
            tape.backward(y)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).data
        flat[i] = orig - eps
        fm = f(Tensor(x0)).data
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_check: non-finite function value")
        nflat[i] = (float(fp) - float(fm)) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradReport(rel, tol, int(x0.size), analytic, numeric)
