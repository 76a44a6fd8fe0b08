"""Dense float64 tensors with taped reverse-mode differentiation.

All math in the package runs through the ops in this module. A forward
pass executed inside a ``with Tape() as tape:`` block records every op
whose inputs require gradients; ``tape.backward(loss)`` then walks the
record in reverse and accumulates ``.grad`` on every participating
tensor. Tapes are single-use: a consumed tape refuses further backward
calls, and each optimization step rebuilds its graph from scratch.

Geometry is deliberately fixed where the network needs it: conv kernels
are 3x3 stride-1 pad-1, average pooling is 3x3 stride-2 pad-1 with a
constant divisor of 9, so output spatial sizes are H and ceil(H/2)
respectively.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AutodiffError, ShapeError

# Cap on the transient im2col buffer (elements) used by conv2d; batches
# larger than this are processed in chunks.
_COL_BUDGET = 4_000_000


class Tensor:
    """A dense float64 array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything funnels into the module-level ops.
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of the differentiable ops of one forward pass."""

    def __init__(self):
        # each node: (output, inputs tuple, backward fn grad -> per-input grads)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every requires_grad tensor.

        The tape is consumed afterwards; leaf gradients add onto any
        pre-existing .grad buffers.
        """
        if self._consumed:
            raise AutodiffError("backward on a consumed tape")
        if loss.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise AutodiffError("loss tensor was not produced on this tape")

        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g.reshape(inp.shape).astype(np.float64, copy=True)
                else:
                    inp.grad = inp.grad + g.reshape(inp.shape)
        self._consumed = True
        self._nodes = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the active tape."""
    tape = active_tape()
    if tape is None:
        raise AutodiffError("backward called with no active tape")
    tape.backward(loss)


def _finish(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _finish(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(g, b.shape) if b.requires_grad else None,
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _finish(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(-g, b.shape) if b.requires_grad else None,
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _finish(out, (a, b), lambda g: (
        _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
        _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
    ))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).copy(),)

    return _finish(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else (
        np.prod([x.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, x.shape).copy(),)

    return _finish(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _finish(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _finish(out, (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, xs))

    return _finish(out, tuple(xs), bwd)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0 (duplicate indices allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _finish(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra and network layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _finish(out, (a, b), lambda g: (
        g @ bd.T if a.requires_grad else None,
        ad.T @ g if b.requires_grad else None,
    ))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,F] @ weight[K,F]^T + bias[K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)
    xd, wd = x.data, weight.data
    return _finish(out, (x, weight, bias), lambda g: (
        g @ wd if x.requires_grad else None,
        g.T @ xd if weight.requires_grad else None,
        g.sum(axis=0) if bias.requires_grad else None,
    ))


def _im2col(xp: np.ndarray, height: int, width: int) -> np.ndarray:
    # xp: zero-padded (b, C, H+2, W+2) -> (b*H*W, C*9)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, xp.shape[1] * 9)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; spatial size preserved."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input, got {x.shape}")
    batch, cin, height, width = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != cin or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    cout = kernel.shape[0]
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")

    wmat = kernel.data.reshape(cout, cin * 9)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    chunk = max(1, _COL_BUDGET // (cin * 9 * height * width))
    out = np.empty((batch, cout, height, width))
    for b0 in range(0, batch, chunk):
        b1 = min(b0 + chunk, batch)
        cols = _im2col(xp[b0:b1], height, width)
        out[b0:b1] = (cols @ wmat.T).reshape(b1 - b0, height, width, cout).transpose(0, 3, 1, 2)
    out += bias.data[None, :, None, None]

    def bwd(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for b0 in range(0, batch, chunk):
                b1 = min(b0 + chunk, batch)
                gmat = g[b0:b1].transpose(0, 2, 3, 1).reshape(-1, cout)
                gcols = (gmat @ wmat).reshape(b1 - b0, height, width, cin, 3, 3)
                for di in range(3):
                    for dj in range(3):
                        gxp[b0:b1, :, di:di + height, dj:dj + width] += (
                            gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                        )
            gx = gxp[:, :, 1:height + 1, 1:width + 1]
        if kernel.requires_grad:
            gwmat = np.zeros((cout, cin * 9))
            for b0 in range(0, batch, chunk):
                b1 = min(b0 + chunk, batch)
                cols = _im2col(xp[b0:b1], height, width)
                gmat = g[b0:b1].transpose(0, 2, 3, 1).reshape(-1, cout)
                gwmat += gmat.T @ cols
            gw = gwmat.reshape(kernel.shape)
        return (gx, gw, gb)

    return _finish(Tensor(out), (x, kernel, bias), bwd)


def avgpool2d(x: Tensor) -> Tensor:
    """3x3 average pooling, stride 2, zero padding 1, divisor fixed at 9."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects 4-D input, got {x.shape}")
    batch, ch, height, width = x.shape
    if height < 1 or width < 1:
        raise ShapeError(f"avgpool2d: empty spatial dims {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    out = win.sum(axis=(-1, -2)) / 9.0
    oh, ow = out.shape[2], out.shape[3]

    def bwd(g):
        gs = g / 9.0
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + 2 * oh:2, dj:dj + 2 * ow:2] += gs
        return (gxp[:, :, 1:height + 1, 1:width + 1],)

    return _finish(Tensor(out), (x,), bwd)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) spatial normalization with affine scale/shift."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects 4-D input, got {x.shape}")
    ch = x.shape[1]
    if scale.shape != (ch,) or shift.shape != (ch,):
        raise ShapeError(f"instance_norm: affine params {scale.shape}/{shift.shape} vs C={ch}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    n = x.shape[2] * x.shape[3]

    def bwd(g):
        gx = gs = gb = None
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=(0, 2, 3))
        if shift.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None, None]
            s1 = gxhat.sum(axis=(2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
            gx = (inv / n) * (n * gxhat - s1 - xhat * s2)
        return (gx, gs, gb)

    return _finish(Tensor(out), (x, scale, shift), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max-subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, nclass = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {batch}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= nclass:
        raise ValueError(f"cross_entropy: label out of range [0, {nclass})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(batch), labels].mean())
    softmax = np.exp(logp)

    def bwd(g):
        gl = softmax.copy()
        gl[np.arange(batch), labels] -= 1.0
        return (gl * (g / batch),)

    return _finish(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# Spatial resampling ops (augmentation / multiformation support)
# ---------------------------------------------------------------------------

def flip_w(x: Tensor) -> Tensor:
    """Reverse the last (width) axis."""
    out = Tensor(x.data[..., ::-1].copy())
    return _finish(out, (x,), lambda g: (g[..., ::-1].copy(),))


def pad2d(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing spatial axes."""
    p = int(padding)
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))))
    return _finish(out, (x,), lambda g: (g[:, :, p:-p or None, p:-p or None],))


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Take a spatial window; gradient scatters back into place."""
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(f"crop2d window out of bounds for {x.shape}")
    out = Tensor(x.data[:, :, top:top + height, left:left + width].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return _finish(out, (x,), bwd)


def bilinear_gather(x: Tensor, ys: np.ndarray, xs: np.ndarray, fill: str = "zero") -> Tensor:
    """Bilinear sampling of x[B,C,H,W] at float input coordinates.

    ys/xs give, for each output pixel, the input-space row/column to
    sample. fill="zero" treats samples outside the grid as zeros (used
    by rotation/scaling); fill="edge" clamps coordinates (used by
    resizing).
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_gather expects 4-D input, got {x.shape}")
    hin, win = x.shape[2], x.shape[3]
    hout, wout = ys.shape
    ys = ys.astype(np.float64)
    xs = xs.astype(np.float64)
    if fill == "edge":
        ys = np.clip(ys, 0.0, hin - 1.0)
        xs = np.clip(xs, 0.0, win - 1.0)
    elif fill != "zero":
        raise ValueError(f"unknown fill mode {fill!r}")

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    corners = []
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < hin) & (xx >= 0) & (xx < win)
        idx = np.clip(yy, 0, hin - 1) * win + np.clip(xx, 0, win - 1)
        corners.append((idx.ravel(), (w * valid).ravel()))

    x2d = x.data.reshape(-1, hin * win)
    out2d = np.zeros((x2d.shape[0], hout * wout))
    for idx, w in corners:
        out2d += x2d[:, idx] * w
    out = Tensor(out2d.reshape(x.shape[0], x.shape[1], hout, wout))

    def bwd(g):
        g2d = g.reshape(-1, hout * wout)
        gxt = np.zeros((hin * win, g2d.shape[0]))
        for idx, w in corners:
            np.add.at(gxt, idx, (g2d * w).T)
        return (gxt.T.reshape(x.shape),)

    return _finish(out, (x,), bwd)


def affine_sample(x: Tensor, mat: np.ndarray) -> Tensor:
    """Resample with a 2x2 output->input map about the image center, zero fill."""
    h, w = x.shape[2], x.shape[3]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    ys = mat[0, 0] * yy + mat[0, 1] * xx + cy
    xs = mat[1, 0] * yy + mat[1, 1] * xx + cx
    return bilinear_gather(x, ys, xs, fill="zero")


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize with bilinear interpolation, half-pixel centers, edge clamp."""
    hin, win = x.shape[2], x.shape[3]
    ys = (np.arange(out_h) + 0.5) * (hin / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (win / out_w) - 0.5
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_gather(x, yg, xg, fill="edge")
