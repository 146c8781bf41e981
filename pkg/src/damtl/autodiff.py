"""Dense float64 tensors with reverse-mode differentiation.

The operation set is closed and fixed: exactly the arithmetic the masked
multi-task training graph needs (2-d convolution, Hadamard product, dense
layers, the loss reductions) plus structural glue (reshape, add, scale).
Every value is a float64 numpy array wrapped in a Tensor node; ops record
their inputs and a backward closure, and ``backward`` replays the recorded
graph in exact reverse creation order, accumulating gradients into leaves.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Creation-order ids; reverse order is the backward schedule. itertools.count
# increments atomically, so concurrent per-task graph building keeps each
# task's internal order monotone.
_SEQ = itertools.count()


class Tensor:
    """A node in the computation graph: float64 data plus an optional grad."""

    __slots__ = ("data", "grad", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Populate grads of every node reachable from ``loss``.

    ``seed`` is the upstream gradient injected at the loss node; seeding with
    a task weight alpha yields exactly the gradients of alpha * loss, bit for
    bit equal to differentiating the scaled joint objective.

    Grads accumulate; callers zero them between passes. Leaves not reachable
    from the loss are never touched (their grad stays absent / zero).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    seen = {loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent not in seen:
                seen.add(parent)
                stack.append(parent)

    loss._accumulate(np.full(loss.data.shape, float(seed)))
    # Consumers always carry a higher creation id than their inputs, so the
    # reverse creation order visits every node after all of its consumers.
    for node in sorted(seen, key=lambda t: t._seq, reverse=True):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; grad w.r.t. each factor is upstream * other."""
    _require_same_shape(a, b, "hadamard")
    out = Tensor(a.data * b.data, (a, b))

    def _bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward_fn = _bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, (a, b))

    def _bw(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward_fn = _bw
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a non-differentiable python scalar."""
    c = float(factor)
    out = Tensor(x.data * c, (x,))

    def _bw(g):
        x._accumulate(g * c)

    out._backward_fn = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape), (x,))

    def _bw(g):
        x._accumulate(g.reshape(x.data.shape))

    out._backward_fn = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def _bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward_fn = _bw
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias: (n,d)+(d,) rows or (n,c,h,w)+(c,) channels."""
    if bias.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-d, got {bias.shape}")
    if x.ndim == 2 and x.shape[1] == bias.shape[0]:
        out = Tensor(x.data + bias.data, (x, bias))
        axes = (0,)
    elif x.ndim == 4 and x.shape[1] == bias.shape[0]:
        out = Tensor(x.data + bias.data[None, :, None, None], (x, bias))
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias: cannot broadcast bias {bias.shape} onto {x.shape}")

    def _bw(g):
        x._accumulate(g)
        bias._accumulate(g.sum(axis=axes))

    out._backward_fn = _bw
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))

    def _bw(g):
        x._accumulate(g * mask)

    out._backward_fn = _bw
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-d cross-correlation, NCHW input against OIHW kernel.

    Output spatial dims are floor((in + 2*pad - k) / stride) + 1; the forward
    pass contracts strided input windows against the kernel, the backward
    pass scatters each kernel tap back onto the padded input grid.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    # im2col: one GEMM per conv instead of a high-rank contraction.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    kflat = kernel.data.reshape(o, c * kh * kw)
    out_data = np.ascontiguousarray((cols @ kflat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    out = Tensor(out_data, (x, kernel))

    def _bw(g):
        g_cols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        kernel._accumulate((g_cols.T @ cols).reshape(o, c, kh, kw))
        # col2im: route each kernel tap's column back to its strided grid slice
        dcols = (g_cols @ kflat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, :, :, i, j
                ]
        if padding:
            x._accumulate(gxp[:, :, padding : padding + h, padding : padding + w])
        else:
            x._accumulate(gxp)

    out._backward_fn = _bw
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Cross-entropy of softmax(logits) against integer targets, summed over rows."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {t.shape} does not match {logits.shape[0]} rows"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: targets must be integer class indices")
    n, classes = logits.shape
    if t.min() < 0 or t.max() >= classes:
        raise ShapeError(
            f"softmax_cross_entropy: class index out of range [0, {classes}): "
            f"min={t.min()}, max={t.max()}"
        )

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - m) - np.log(sez)
    rows = np.arange(n)
    out = Tensor(-log_probs[rows, t].sum(), (logits,))
    probs = ez / sez

    def _bw(g):
        d = probs.copy()
        d[rows, t] -= 1.0
        logits._accumulate(g * d)

    out._backward_fn = _bw
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), (x,))

    def _bw(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    out._backward_fn = _bw
    return out


def reduce_mean(x: Tensor) -> Tensor:
    inv = 1.0 / x.size
    out = Tensor(x.data.mean(), (x,))

    def _bw(g):
        x._accumulate(np.broadcast_to(g * inv, x.data.shape))

    out._backward_fn = _bw
    return out


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at 0 taken as 0."""
    out = Tensor(np.abs(x.data).sum(), (x,))

    def _bw(g):
        x._accumulate(g * np.sign(x.data))

    out._backward_fn = _bw
    return out


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    results: list[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def render(self) -> str:
        width = max([len(r.name) for r in self.results] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}}  {r.max_rel_err:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"overall: {'ok' if self.passed else 'FAIL'} (eps={self.eps:g}, tol={self.tol:g})")
        return "\n".join(lines)


def grad_check(build, params, eps: float = 1e-5, tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare reverse-mode grads of ``build()`` against central differences.

    ``build`` must deterministically rebuild the scalar loss from the current
    contents of ``params`` (leaf tensors, perturbed in place). The per
    coordinate error is |ad - fd| / max(1, |ad|, |fd|): relative for large
    entries, absolute for tiny ones where the ratio would only amplify
    finite-difference noise.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    for p in params:
        p.zero_grad()
    loss = build()
    backward(loss)
    ad_grads = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    report = GradCheckReport(eps=eps, tol=tol)
    for p, ad, name in zip(params, ad_grads, names):
        flat = p.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        max_rel = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(build().data)
            flat[i] = orig - eps
            lm = float(build().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            rel = abs(ad_flat[i] - fd) / max(1.0, abs(ad_flat[i]), abs(fd))
            if rel > max_rel:
                max_rel = rel
        report.results.append(GradCheckResult(name, max_rel, max_rel < tol))
    return report
