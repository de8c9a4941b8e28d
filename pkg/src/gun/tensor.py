"""Dense float64 tensors with reverse-mode gradient recording.

Layout convention for 4-D signals is [batch, channel, height, width],
row-major. Every operator is a pure function of its inputs; when gradient
recording is enabled and an input requires grad, the output tensor carries
a backward closure used by autodiff.backward.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

_SEQ = itertools.count()
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends graph recording (inference fast path)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A float64 ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "meta",
                 "_parents", "_backward", "_op", "_seq", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0 or any(e < 1 for e in arr.shape):
            raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.meta: Optional[dict] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._seq = next(_SEQ)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains NaN/Inf")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable) -> Tensor:
    """Wrap an op result; attach the backward closure if recording applies."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """2-D convolution parameters: kernel [out_ch, in_ch, kh, kw], optional bias."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_ch {self.kernel.shape[0]}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError("stride/dilation must be >= 1 and padding >= 0")

    def out_extent(self, n: int, k: int) -> int:
        return (n + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """Contiguous [C*kh*kw, N*ho*wo] patch matrix from a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, n * ho * wo)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                  stride: int, dilation: int, padding: int):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out += b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def _conv_input_grad(dout: np.ndarray, w: np.ndarray, x_shape, stride: int,
                     dilation: int, padding: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input.

    Realized as a stride-1 correlation of the (zero-stuffed, zero-padded)
    output cotangent with the spatially flipped kernel, then cropping the
    original padding. The extra bottom/right rows account for input
    positions the strided forward never covered.
    """
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    qh, qw = dilation * (kh - 1), dilation * (kw - 1)
    rh = hp - ((ho - 1) * stride + qh + 1)
    rw = wp - ((wo - 1) * stride + qw + 1)
    buf = np.zeros((n, o, (ho - 1) * stride + 1 + 2 * qh + rh,
                    (wo - 1) * stride + 1 + 2 * qw + rw), dtype=dout.dtype)
    buf[:, :, qh:qh + (ho - 1) * stride + 1:stride,
        qw:qw + (wo - 1) * stride + 1:stride] = dout
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [in, out, kh, kw]
    cols = _im2col(buf, kh, kw, 1, dilation, hp, wp)
    dxp = (np.ascontiguousarray(wflip).reshape(c, -1) @ cols).reshape(c, n, hp, wp)
    dxp = dxp.transpose(1, 0, 2, 3)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dxp)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation of a [N,C,H,W] tensor with params.kernel plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got shape {x.shape}")
    w = params.kernel
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    ho = params.out_extent(x.shape[2], w.shape[2])
    wo = params.out_extent(x.shape[3], w.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output extent non-positive ({ho}x{wo}) for input {x.shape} "
            f"kernel {w.shape} stride={params.stride} dilation={params.dilation} "
            f"padding={params.padding}")
    b = params.bias
    out, cols = _conv_forward(x.data, w.data, None if b is None else b.data,
                              params.stride, params.dilation, params.padding)
    xd, wd = x.data, w.data
    stride, dilation, padding = params.stride, params.dilation, params.padding

    def backward(g: np.ndarray):
        o = wd.shape[0]
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw = (gmat @ cols.T).reshape(wd.shape)
        dx = _conv_input_grad(g, wd, xd.shape, stride, dilation, padding)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", out, parents, backward)


# ---------------------------------------------------------------------------
# normalization


def scale_shift_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                     stats=None, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization, then an affine scale/shift.

    stats=None normalizes by the batch statistics over (N, H, W) and
    backpropagates through them; stats=(mean, var) uses the given frozen
    statistics (eval mode). Zero-variance channels are handled by eps.
    """
    if x.ndim != 4:
        raise ShapeError(f"scale_shift_norm input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    if stats is None:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        frozen = False
    else:
        mu, var = (np.asarray(s, dtype=np.float64) for s in stats)
        if mu.shape != (c,) or var.shape != (c,):
            raise ShapeError(f"frozen stats must have shape ({c},)")
        frozen = True
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd.reshape(1, c, 1, 1)
        if frozen:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        else:
            m1 = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            m2 = (dxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = inv.reshape(1, c, 1, 1) * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    out_t = _record("scale_shift_norm", out, (x, gamma, beta), backward)
    out_t.meta = {"mean": mu, "var": var}
    return out_t


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0. NaN propagates."""
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _record("relu", np.maximum(x.data, 0.0), (x,), backward)


def merge(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """Combine two feature maps: elementwise 'sum' or channel 'concat'."""
    if mode == "sum":
        if a.shape != b.shape:
            raise ShapeError(f"merge(sum) needs identical shapes, got {a.shape} vs {b.shape}")

        def backward(g: np.ndarray):
            return g, g

        return _record("merge-sum", a.data + b.data, (a, b), backward)
    if mode == "concat":
        if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] \
                or a.shape[2:] != b.shape[2:]:
            raise ShapeError(
                f"merge(concat) needs matching non-channel extents, got {a.shape} vs {b.shape}")
        ca = a.shape[1]

        def backward(g: np.ndarray):
            return g[:, :ca], g[:, ca:]

        return _record("merge-concat", np.concatenate([a.data, b.data], axis=1),
                       (a, b), backward)
    raise ShapeError(f"unknown merge mode {mode!r}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same shapes)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g: np.ndarray):
        return g * bd, g * ad

    return _record("mul", ad * bd, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape

    def backward(g: np.ndarray):
        return (np.full(shape, float(g.reshape(())), dtype=np.float64),)

    return _record("sum", np.asarray(x.data.sum()), (x,), backward)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    targets is an integer [N,H,W] map; pixels equal to ignore_index
    contribute neither loss nor gradient. If every pixel is ignored the
    loss is 0 and meta["all_ignored"] is set.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be 4-D, got shape {logits.shape}")
    n, c, h, w = logits.shape
    if c < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    valid = targets != ignore_index
    tv = targets[valid]
    if tv.size and (tv.min() < 0 or tv.max() >= c):
        bad = tv[(tv < 0) | (tv >= c)][0]
        raise ShapeError(f"target class {bad} outside [0, {c}) and not ignore_index")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    n_valid = int(valid.sum())
    if n_valid == 0:
        loss = 0.0
    else:
        t_idx = np.where(valid, targets, 0).reshape(n, 1, h, w)
        picked = np.take_along_axis(logp, t_idx, axis=1)[:, 0]
        loss = -picked[valid].sum() / n_valid

    probs = ez / sez

    def backward(g: np.ndarray):
        if n_valid == 0:
            return (np.zeros_like(probs),)
        t_idx = np.where(valid, targets, 0).reshape(n, 1, h, w)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, t_idx, 1.0, axis=1)
        d = (probs - onehot) * valid[:, None, :, :]
        return (d * (float(g.reshape(())) / n_valid),)

    out = _record("softmax_ce", np.asarray(loss), (logits,), backward)
    out.meta = {"valid_pixels": n_valid, "all_ignored": n_valid == 0}
    return out
