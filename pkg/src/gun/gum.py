"""Offset-guided upsampling: grids, sampling kernels, guidance modules.

The sampler maps every output pixel to a source coordinate from a regular
grid, optionally shifted by a learned per-pixel offset pair (p, q) in
source-pixel units, then reads the source by nearest or bilinear
interpolation. The same warp is applied to every channel.

Coordinate convention: x_s = (x_t + 0.5) / f - 0.5 with f the output/input
ratio (half-pixel centers; identity at f = 1). Out-of-range samples
replicate the border: interpolation weights are kept, neighbor indices are
clamped, which makes the clamped regions exactly constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import ConvParams, Tensor, _record, conv2d, merge, relu, scale_shift_norm

# ---------------------------------------------------------------------------
# sampling grids


@dataclass(frozen=True)
class SamplingGrid:
    """Separable per-output-pixel source coordinates for a regular resize."""

    h_in: int
    w_in: int
    h_out: int
    w_out: int
    factor: float
    xs: np.ndarray  # [w_out] source x per output column
    ys: np.ndarray  # [h_out] source y per output row


def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def make_regular_grid(h_in: int, w_in: int, h_out: int, w_out: int) -> SamplingGrid:
    """Regular upsampling grid with half-pixel-centered source coordinates."""
    if min(h_in, w_in, h_out, w_out) < 1:
        raise ShapeError("grid extents must be positive")
    if h_out * w_in != w_out * h_in:
        raise ShapeError(
            f"inconsistent aspect ratio: {h_out}/{h_in} != {w_out}/{w_in}")
    if h_out < h_in:
        raise ShapeError(f"upsampling grid needs h_out >= h_in, got {h_out} < {h_in}")
    return SamplingGrid(h_in=h_in, w_in=w_in, h_out=h_out, w_out=w_out,
                        factor=h_out / h_in,
                        xs=_axis_coords(w_out, w_in), ys=_axis_coords(h_out, h_in))


def kink_mask(grid: SamplingGrid, offsets: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Mark offset coordinates central differences cannot score.

    Covers sample points within tol of an integer coordinate (hat-weight
    kinks) and points at or beyond the border interval (0, n-1), where the
    clamp defines the axis derivative as 0 by convention and makes the
    sampled value exactly constant. Gradient checks list and skip these;
    the clamped regions are verified separately by exact constancy.
    """
    offsets = np.asarray(offsets, dtype=np.float64)

    def axis_mask(c: np.ndarray, n_in: int) -> np.ndarray:
        return (np.abs(c - np.rint(c)) < tol) | (c <= tol) | (c >= n_in - 1 - tol)

    cx = grid.xs[None, None, :] + offsets[:, 0]
    cy = grid.ys[None, :, None] + offsets[:, 1]
    near = np.empty_like(offsets, dtype=bool)
    near[:, 0] = axis_mask(cx, grid.w_in)
    near[:, 1] = axis_mask(cy, grid.h_in)
    return near


# ---------------------------------------------------------------------------
# raw sampling kernels (plain ndarrays; dtype follows the input)


def _check_sample_args(u: np.ndarray, grid: SamplingGrid,
                       offsets: Optional[np.ndarray]):
    if u.ndim != 4:
        raise ShapeError(f"sampler input must be 4-D, got shape {u.shape}")
    if u.shape[2] != grid.h_in or u.shape[3] != grid.w_in:
        raise ShapeError(
            f"input extents {u.shape[2:]} do not match grid source {grid.h_in}x{grid.w_in}")
    if offsets is not None:
        expect = (u.shape[0], 2, grid.h_out, grid.w_out)
        if offsets.shape != expect:
            raise ShapeError(f"offset table shape {offsets.shape}, expected {expect}")


def _sample_coords(u: np.ndarray, grid: SamplingGrid,
                   offsets: Optional[np.ndarray]):
    n = u.shape[0]
    if offsets is None:
        cx = np.broadcast_to(grid.xs[None, None, :], (n, grid.h_out, grid.w_out))
        cy = np.broadcast_to(grid.ys[None, :, None], (n, grid.h_out, grid.w_out))
    else:
        cx = grid.xs[None, None, :] + offsets[:, 0]
        cy = grid.ys[None, :, None] + offsets[:, 1]
    return cx, cy


def _lerp_terms(coords: np.ndarray, n_in: int):
    lo = np.floor(coords)
    w1 = coords - lo
    w0 = 1.0 - w1
    i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, w0, w1


def _gather(u: np.ndarray, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """out[n,c,l] = u[n,c,yi[n,l],xi[n,l]] for flattened output pixels l."""
    n, c, hi, wi = u.shape
    flat = (yi * wi + xi).reshape(n, 1, -1)
    return np.take_along_axis(u.reshape(n, c, hi * wi), flat, axis=2)


def guided_sample_forward(u: np.ndarray, grid: SamplingGrid,
                          offsets: Optional[np.ndarray] = None,
                          mode: str = "bilinear") -> np.ndarray:
    """Sample u at the (offset-shifted) grid coordinates.

    nearest: the source index is floor(coord + 0.5), clamped to range.
    bilinear: hat-weighted blend of the two neighbors per axis; weights
    follow the unclamped coordinate, indices are border-clamped.
    """
    u = np.asarray(u)
    if not np.issubdtype(u.dtype, np.floating):
        u = u.astype(np.float64)
    offs = None if offsets is None else np.asarray(offsets, dtype=np.float64)
    _check_sample_args(u, grid, offs)
    n, c = u.shape[:2]
    cx, cy = _sample_coords(u, grid, offs)
    if mode == "nearest":
        xi = np.clip(np.floor(cx + 0.5), 0, grid.w_in - 1).astype(np.intp)
        yi = np.clip(np.floor(cy + 0.5), 0, grid.h_in - 1).astype(np.intp)
        out = _gather(u, yi, xi)
        return out.reshape(n, c, grid.h_out, grid.w_out)
    if mode != "bilinear":
        raise ShapeError(f"unknown sampling mode {mode!r}")
    xi0, xi1, wx0, wx1 = _lerp_terms(cx, grid.w_in)
    yi0, yi1, wy0, wy1 = _lerp_terms(cy, grid.h_in)
    l = grid.h_out * grid.w_out
    corners = ((yi0, xi0, wy0, wx0), (yi0, xi1, wy0, wx1),
               (yi1, xi0, wy1, wx0), (yi1, xi1, wy1, wx1))
    out = None
    for yi, xi, wy, wx in corners:
        g = _gather(u, yi, xi)  # fresh copy, safe to scale in place
        np.multiply(g, (wy * wx).reshape(n, 1, l), out=g)
        out = g if out is None else np.add(out, g, out=out)
    return out.reshape(n, c, grid.h_out, grid.w_out)


class SampleGradients(NamedTuple):
    du: np.ndarray
    d_offsets: np.ndarray
    offsets_differentiable: bool


def _scatter_add(du_flat: np.ndarray, yi, xi, vals, n, c, hi, wi):
    """Deterministic scatter of vals[n,c,l] into du_flat (length n*c*hi*wi)."""
    l = vals.shape[2]
    pix = (yi * wi + xi).reshape(n, 1, l)
    base = (np.arange(n, dtype=np.intp)[:, None, None] * c
            + np.arange(c, dtype=np.intp)[None, :, None]) * (hi * wi)
    idx = (base + pix).ravel()
    du_flat += np.bincount(idx, weights=vals.ravel(), minlength=du_flat.size)


def guided_sample_backward(dv: np.ndarray, u: np.ndarray, grid: SamplingGrid,
                           offsets: Optional[np.ndarray] = None,
                           mode: str = "bilinear") -> SampleGradients:
    """Cotangents of guided_sample_forward.

    bilinear: du scatters dv by the forward interpolation weights
    (exact transpose); offset gradients use the hat-function derivative,
    which is 0 at kink points and wherever both neighbors clamp to the
    same border index. nearest: du scatters dv to the rounded source
    pixel; the offset gradient is identically zero and the result is
    flagged non-differentiable.
    """
    u = np.asarray(u)
    dv = np.asarray(dv, dtype=np.float64)
    offs = None if offsets is None else np.asarray(offsets, dtype=np.float64)
    _check_sample_args(u, grid, offs)
    n, c, hi, wi = u.shape
    if dv.shape != (n, c, grid.h_out, grid.w_out):
        raise ShapeError(
            f"dv shape {dv.shape} does not match output "
            f"({n},{c},{grid.h_out},{grid.w_out})")
    cx, cy = _sample_coords(u, grid, offs)
    l = grid.h_out * grid.w_out
    dvf = dv.reshape(n, c, l)
    du_flat = np.zeros(n * c * hi * wi, dtype=np.float64)
    if mode == "nearest":
        xi = np.clip(np.floor(cx + 0.5), 0, wi - 1).astype(np.intp)
        yi = np.clip(np.floor(cy + 0.5), 0, hi - 1).astype(np.intp)
        _scatter_add(du_flat, yi, xi, dvf, n, c, hi, wi)
        return SampleGradients(du_flat.reshape(u.shape),
                               np.zeros((n, 2, grid.h_out, grid.w_out)), False)
    if mode != "bilinear":
        raise ShapeError(f"unknown sampling mode {mode!r}")
    xi0, xi1, wx0, wx1 = _lerp_terms(cx, wi)
    yi0, yi1, wy0, wy1 = _lerp_terms(cy, hi)
    wy0f, wy1f = wy0.reshape(n, 1, l), wy1.reshape(n, 1, l)
    wx0f, wx1f = wx0.reshape(n, 1, l), wx1.reshape(n, 1, l)
    _scatter_add(du_flat, yi0, xi0, dvf * (wy0f * wx0f), n, c, hi, wi)
    _scatter_add(du_flat, yi0, xi1, dvf * (wy0f * wx1f), n, c, hi, wi)
    _scatter_add(du_flat, yi1, xi0, dvf * (wy1f * wx0f), n, c, hi, wi)
    _scatter_add(du_flat, yi1, xi1, dvf * (wy1f * wx1f), n, c, hi, wi)

    g00 = _gather(u, yi0, xi0)
    g01 = _gather(u, yi0, xi1)
    g10 = _gather(u, yi1, xi0)
    g11 = _gather(u, yi1, xi1)
    dvdx = wy0f * (g01 - g00) + wy1f * (g11 - g10)
    dvdy = wx0f * (g10 - g00) + wx1f * (g11 - g01)
    d_off = np.empty((n, 2, grid.h_out, grid.w_out), dtype=np.float64)
    d_off[:, 0] = (dvf * dvdx).sum(axis=1).reshape(n, grid.h_out, grid.w_out)
    d_off[:, 1] = (dvf * dvdy).sum(axis=1).reshape(n, grid.h_out, grid.w_out)
    return SampleGradients(du_flat.reshape(u.shape), d_off, True)


def _separable_sample(u: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                      mode: str) -> np.ndarray:
    if mode == "nearest":
        yi = np.clip(np.floor(ys + 0.5), 0, u.shape[2] - 1).astype(np.intp)
        xi = np.clip(np.floor(xs + 0.5), 0, u.shape[3] - 1).astype(np.intp)
        return u[:, :, yi][:, :, :, xi]
    if mode != "bilinear":
        raise ShapeError(f"unknown sampling mode {mode!r}")
    if not np.issubdtype(u.dtype, np.floating):
        u = u.astype(np.float64)
    yi0, yi1, wy0, wy1 = _lerp_terms(ys, u.shape[2])
    xi0, xi1, wx0, wx1 = _lerp_terms(xs, u.shape[3])
    rows = u[:, :, yi0, :]  # fancy indexing copies; in-place scaling is safe
    np.multiply(rows, wy0[None, None, :, None], out=rows)
    high = u[:, :, yi1, :]
    np.multiply(high, wy1[None, None, :, None], out=high)
    rows += high
    out = rows[:, :, :, xi0]
    np.multiply(out, wx0, out=out)
    right = rows[:, :, :, xi1]
    np.multiply(right, wx1, out=right)
    out += right
    return out


def plain_upsample_forward(u: np.ndarray, grid: SamplingGrid,
                           mode: str = "bilinear") -> np.ndarray:
    """Regular-grid upsampling via the separable fast path (no offsets)."""
    u = np.asarray(u)
    _check_sample_args(u, grid, None)
    return _separable_sample(u, grid.ys, grid.xs, mode)


def resize_plain(arr: np.ndarray, h_out: int, w_out: int,
                 mode: str = "bilinear") -> np.ndarray:
    """Resize the trailing two axes of a 3-D or 4-D array to any extents."""
    arr = np.asarray(arr)
    squeeze = arr.ndim == 3
    u = arr[None] if squeeze else arr
    if u.ndim != 4:
        raise ShapeError(f"resize_plain expects 3-D or 4-D input, got {arr.shape}")
    ys = _axis_coords(h_out, u.shape[2])
    xs = _axis_coords(w_out, u.shape[3])
    out = _separable_sample(u, ys, xs, mode)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# differentiable wrappers

_AXIS_MATRIX_CACHE: Dict[tuple, np.ndarray] = {}


def _axis_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    """Dense [n_out, n_in] interpolation matrix for one axis of a regular resize."""
    key = (n_out, n_in, mode)
    cached = _AXIS_MATRIX_CACHE.get(key)
    if cached is not None:
        return cached
    coords = _axis_coords(n_out, n_in)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if mode == "nearest":
        i = np.clip(np.floor(coords + 0.5), 0, n_in - 1).astype(np.intp)
        m[rows, i] = 1.0
    else:
        i0, i1, w0, w1 = _lerp_terms(coords, n_in)
        np.add.at(m, (rows, i0), w0)
        np.add.at(m, (rows, i1), w1)
    _AXIS_MATRIX_CACHE[key] = m
    return m


def resize(x: Tensor, h_out: int, w_out: int, mode: str = "bilinear") -> Tensor:
    """Differentiable regular-grid resize of a [N,C,H,W] tensor."""
    if x.ndim != 4:
        raise ShapeError(f"resize expects a 4-D tensor, got shape {x.shape}")
    hi, wi = x.shape[2], x.shape[3]
    ys = _axis_coords(h_out, hi)
    xs = _axis_coords(w_out, wi)
    out = _separable_sample(x.data, ys, xs, mode)

    def backward(g: np.ndarray):
        sy = _axis_matrix(h_out, hi, mode)
        sx = _axis_matrix(w_out, wi, mode)
        return (np.matmul(np.matmul(sy.T, g), sx),)

    return _record("resize", out, (x,), backward)


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    """Differentiable plain upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    return resize(x, x.shape[2] * factor, x.shape[3] * factor, mode)


def guided_sample(u: Tensor, grid: SamplingGrid, offsets: Optional[Tensor],
                  mode: str = "bilinear") -> Tensor:
    """Differentiable offset-guided sampling (see guided_sample_forward)."""
    offs = None if offsets is None else offsets.data
    out = guided_sample_forward(u.data, grid, offs, mode)
    ud = u.data

    def backward(g: np.ndarray):
        res = guided_sample_backward(g, ud, grid, offs, mode)
        if offsets is None:
            return (res.du,)
        return res.du, res.d_offsets

    parents = (u,) if offsets is None else (u, offsets)
    return _record(f"guided-{mode}", out, parents, backward)


# ---------------------------------------------------------------------------
# parameter-dict layer helpers (shared with the network module)


def init_conv(params: Dict[str, Tensor], rng: np.random.Generator, name: str,
              out_ch: int, in_ch: int, k: int, bias: bool = True,
              zero: bool = False) -> None:
    if zero:
        w = np.zeros((out_ch, in_ch, k, k))
    else:
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
    params[name + ".weight"] = Tensor(w, requires_grad=True)
    if bias:
        params[name + ".bias"] = Tensor(np.zeros(out_ch), requires_grad=True)


def init_bn_state(state: Dict[str, np.ndarray], name: str, ch: int) -> None:
    state[name + ".running_mean"] = np.zeros(ch)
    state[name + ".running_var"] = np.ones(ch)


def init_bn(params: Dict[str, Tensor], state: Dict[str, np.ndarray],
            name: str, ch: int) -> None:
    params[name + ".gamma"] = Tensor(np.ones(ch), requires_grad=True)
    params[name + ".beta"] = Tensor(np.zeros(ch), requires_grad=True)
    init_bn_state(state, name, ch)


def conv_op(x: Tensor, params: Dict[str, Tensor], name: str, stride: int = 1,
            dilation: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, ConvParams(kernel=params[name + ".weight"],
                                bias=params.get(name + ".bias"),
                                stride=stride, dilation=dilation, padding=padding))


def bn_op(x: Tensor, params: Dict[str, Tensor], state: Dict[str, np.ndarray],
          name: str, training: bool, momentum: float = 0.1,
          state_name: Optional[str] = None) -> Tensor:
    """Batch norm in training mode, frozen running stats in eval mode.

    state_name decouples the statistics from the parameters, so branches
    that share weights still keep their own running statistics.
    """
    gamma, beta = params[name + ".gamma"], params[name + ".beta"]
    sname = state_name or name
    if training:
        out = scale_shift_norm(x, gamma, beta, stats=None)
        state[sname + ".running_mean"] = ((1 - momentum) * state[sname + ".running_mean"]
                                          + momentum * out.meta["mean"])
        state[sname + ".running_var"] = ((1 - momentum) * state[sname + ".running_var"]
                                         + momentum * out.meta["var"])
        return out
    stats = (state[sname + ".running_mean"], state[sname + ".running_var"])
    return scale_shift_norm(x, gamma, beta, stats=stats)


def conv_bn_relu(x: Tensor, params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                 name: str, training: bool, stride: int = 1, dilation: int = 1,
                 padding: int = 1, activate: bool = True,
                 state_name: Optional[str] = None) -> Tensor:
    out = conv_op(x, params, name + ".conv", stride=stride,
                  dilation=dilation, padding=padding)
    out = bn_op(out, params, state, name + ".bn", training,
                state_name=None if state_name is None else state_name + ".bn")
    return relu(out) if activate else out


# ---------------------------------------------------------------------------
# guidance modules


@dataclass
class GuidanceConfig:
    """Which features feed the offset predictor and how wide it is."""

    variant: str  # "large-rf" | "high-res" | "fusion"
    deep_channels: int = 0
    early_channels: int = 0
    hidden_channels: int = 16
    up_stages: int = 2

    VARIANTS = ("large-rf", "high-res", "fusion")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ConfigError(f"unknown guidance variant {self.variant!r}")
        if self.variant in ("large-rf", "fusion") and self.deep_channels < 1:
            raise ConfigError(f"variant {self.variant!r} requires deep_channels")
        if self.variant in ("high-res", "fusion") and self.early_channels < 1:
            raise ConfigError(f"variant {self.variant!r} requires early_channels")


def init_guidance_params(cfg: GuidanceConfig, rng: np.random.Generator,
                         params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                         prefix: str = "guidance") -> None:
    """Allocate guidance parameters; the final offset layer starts at zero.

    Zero initialization makes a freshly built guided head reproduce plain
    upsampling exactly, so training starts from the baseline.
    """
    h = cfg.hidden_channels
    if cfg.variant == "large-rf":
        in_ch = cfg.deep_channels
        for s in range(cfg.up_stages):
            init_conv(params, rng, f"{prefix}.block{s}.conv", h, in_ch, 3, bias=False)
            init_bn(params, state, f"{prefix}.block{s}.bn", h)
            in_ch = h
        init_conv(params, rng, f"{prefix}.final", 2, h, 1, zero=True)
    elif cfg.variant == "high-res":
        init_conv(params, rng, f"{prefix}.final", 2, cfg.early_channels, 1, zero=True)
    else:  # fusion
        init_conv(params, rng, f"{prefix}.deep.conv", h, cfg.deep_channels, 1, bias=False)
        init_bn(params, state, f"{prefix}.deep.bn", h)
        init_conv(params, rng, f"{prefix}.early.conv", h, cfg.early_channels, 1, bias=False)
        init_bn(params, state, f"{prefix}.early.bn", h)
        init_conv(params, rng, f"{prefix}.final", 2, h, 1, zero=True)


def _require_feature(features: Dict[str, Tensor], key: str, ch: int,
                     variant: str) -> Tensor:
    feat = features.get(key)
    if feat is None:
        raise ConfigError(f"guidance variant {variant!r} requires feature {key!r}")
    if feat.shape[1] != ch:
        raise ConfigError(
            f"guidance variant {variant!r} expects {ch} channels for {key!r}, "
            f"got {feat.shape[1]}")
    return feat


def guidance_offsets(features: Dict[str, Tensor], cfg: GuidanceConfig,
                     params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                     target_hw: tuple, training: bool = True,
                     prefix: str = "guidance") -> Tensor:
    """Predict the offset table [N,2,H,W] at the target resolution.

    large-rf climbs from the post-fusion features through conv-norm-relu
    blocks interleaved with x2 upsampling; high-res is a single 1x1
    convolution on the early high-resolution features; fusion projects and
    sums both streams before the final offset projection.
    """
    th, tw = target_hw
    if cfg.variant == "large-rf":
        x = _require_feature(features, "deep", cfg.deep_channels, cfg.variant)
        for s in range(cfg.up_stages):
            x = conv_bn_relu(x, params, state, f"{prefix}.block{s}", training)
            x = upsample(x, 2, mode="bilinear")
        out = conv_op(x, params, f"{prefix}.final")
    elif cfg.variant == "high-res":
        x = _require_feature(features, "early", cfg.early_channels, cfg.variant)
        out = conv_op(x, params, f"{prefix}.final")
    else:
        deep = _require_feature(features, "deep", cfg.deep_channels, cfg.variant)
        early = _require_feature(features, "early", cfg.early_channels, cfg.variant)
        deep = resize(deep, early.shape[2], early.shape[3], mode="bilinear")
        a = conv_op(deep, params, f"{prefix}.deep.conv")
        a = bn_op(a, params, state, f"{prefix}.deep.bn", training)
        b = conv_op(early, params, f"{prefix}.early.conv")
        b = bn_op(b, params, state, f"{prefix}.early.bn", training)
        x = relu(merge(a, b, "sum"))
        out = conv_op(x, params, f"{prefix}.final")
    if out.shape[2] != th or out.shape[3] != tw:
        out = resize(out, th, tw, mode="bilinear")
    return out
