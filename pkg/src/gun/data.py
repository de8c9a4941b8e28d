"""Synthetic boundary-rich segmentation scenes and bit-exact file I/O.

Scenes are stacks of rectangles, disks and thin oriented bars drawn
back-to-front with a counter-based generator, so a (spec, seed) pair is a
pure function of its inputs on every platform. Thin bars (1-3 px) exist
to stress boundary accuracy. Tensors round-trip through a small container
format; label maps and RGB previews use binary PGM/PPM.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (BadMagicError, ConfigError, ContainerError, ShapeError,
                     TruncatedError, UnsupportedDtypeError)
from .gum import _axis_coords, resize_plain
from .metrics import IGNORE_LABEL

GENERATOR_ID = "numpy-philox4x64-10"


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic distinct base colors; class 0 is a dark background."""
    colors = [(0.15, 0.15, 0.15)]
    for i in range(1, num_classes):
        hue = (i - 1) * 0.61803398875 % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.65, 0.85))
    return np.asarray(colors, dtype=np.float64)


@dataclass
class SceneSpec:
    """Geometry and appearance of one synthetic scene family."""

    height: int = 64
    width: int = 64
    num_classes: int = 5
    shape_count: Tuple[int, int] = (12, 20)
    shape_kinds: Tuple[str, ...] = ("rectangle", "disk", "bar")
    bar_width: Tuple[float, float] = (1.0, 3.0)
    bar_fraction: float = 0.55
    noise: float = 0.08
    base_colors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("scene needs at least 2 classes")
        if self.height < 8 or self.width < 8:
            raise ConfigError("scene extents below 8 px cannot fit the shapes")
        if self.shape_count[0] < 0 or self.shape_count[1] < self.shape_count[0]:
            raise ConfigError(f"bad shape_count range {self.shape_count}")
        if self.bar_width[0] < 1.0 or self.bar_width[1] < self.bar_width[0]:
            raise ConfigError(f"bar width range {self.bar_width} needs min >= 1 px")
        unknown = set(self.shape_kinds) - {"rectangle", "disk", "bar"}
        if unknown:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}")
        if self.base_colors is not None:
            self.base_colors = np.asarray(self.base_colors, dtype=np.float64)
            if self.base_colors.shape != (self.num_classes, 3):
                raise ConfigError("base_colors must have shape [num_classes, 3]")

    def palette(self) -> np.ndarray:
        return self.base_colors if self.base_colors is not None \
            else class_palette(self.num_classes)


def generate_scene(spec: SceneSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (image [3,H,W] float64 in [0,1], gt [H,W] uint8) pair.

    Shapes are painted in draw order, so the ground truth holds the
    topmost class; the background is class 0.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gt = np.zeros((h, w), dtype=np.uint8)
    n_shapes = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
    non_bar = [k for k in spec.shape_kinds if k != "bar"]
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        if "bar" in spec.shape_kinds and (not non_bar or rng.random() < spec.bar_fraction):
            kind = "bar"
        else:
            kind = non_bar[int(rng.integers(len(non_bar)))]
        if kind == "rectangle":
            rw = int(rng.integers(3, max(4, w // 2)))
            rh = int(rng.integers(3, max(4, h // 2)))
            x0 = int(rng.integers(0, w - 2))
            y0 = int(rng.integers(0, h - 2))
            gt[y0:min(h, y0 + rh), x0:min(w, x0 + rw)] = cls
        elif kind == "disk":
            r = rng.uniform(2.0, min(h, w) / 5.0)
            cx = rng.uniform(0, w - 1)
            cy = rng.uniform(0, h - 1)
            gt[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = cls
        else:
            theta = rng.uniform(0.0, np.pi)
            width = rng.uniform(spec.bar_width[0], spec.bar_width[1])
            length = rng.uniform(0.4, 1.0) * max(h, w)
            cx = rng.uniform(0, w - 1)
            cy = rng.uniform(0, h - 1)
            dx, dy = xx - cx, yy - cy
            d_perp = np.abs(-dx * np.sin(theta) + dy * np.cos(theta))
            d_par = np.abs(dx * np.cos(theta) + dy * np.sin(theta))
            gt[(d_perp <= width / 2.0) & (d_par <= length / 2.0)] = cls
    palette = spec.palette()
    image = palette[gt].transpose(2, 0, 1).copy()
    if spec.noise > 0:
        image += spec.noise * rng.standard_normal((3, h, w))
        np.clip(image, 0.0, 1.0, out=image)
    return image, gt


def _resize_labels(gt: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbor label resize; labels never blend."""
    yi = np.clip(np.floor(_axis_coords(h_out, gt.shape[0]) + 0.5),
                 0, gt.shape[0] - 1).astype(np.intp)
    xi = np.clip(np.floor(_axis_coords(w_out, gt.shape[1]) + 0.5),
                 0, gt.shape[1] - 1).astype(np.intp)
    return gt[yi][:, xi]


def _fit_extent(arr: np.ndarray, axis: int, target: int, pad_value) -> np.ndarray:
    """Center-crop or center-pad one axis to the target extent."""
    cur = arr.shape[axis]
    if cur == target:
        return arr
    if cur > target:
        lo = (cur - target) // 2
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(lo, lo + target)
        return arr[tuple(sl)]
    shape = list(arr.shape)
    shape[axis] = target
    out = np.full(shape, pad_value, dtype=arr.dtype)
    lo = (target - cur) // 2
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(lo, lo + cur)
    out[tuple(sl)] = arr
    return out


def random_scale(image: np.ndarray, gt: np.ndarray, rng: np.random.Generator,
                 scale_range: Tuple[float, float] = (0.5, 2.0)):
    """Rescale by a random factor, then crop/pad back to the input extents.

    The image is resampled bilinearly, labels by nearest neighbor; padding
    uses 0 for the image and the ignore label for the ground truth.
    """
    h, w = gt.shape
    s = float(rng.uniform(scale_range[0], scale_range[1]))
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    img2 = resize_plain(image, nh, nw, mode="bilinear")
    gt2 = _resize_labels(gt, nh, nw)
    img2 = _fit_extent(_fit_extent(img2, 1, h, 0.0), 2, w, 0.0)
    gt2 = _fit_extent(_fit_extent(gt2, 0, h, IGNORE_LABEL), 1, w, IGNORE_LABEL)
    return img2, gt2


# ---------------------------------------------------------------------------
# tensor container ("GUNT"): magic, version, dtype code, rank, u32 extents, payload

_MAGIC = b"GUNT"
_VERSION = 1
_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "u1"}
_CODE_FOR_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1,
                  np.dtype(np.uint8): 2}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an ndarray: row-major little-endian payload after the header."""
    arr = np.asarray(arr)
    code = _CODE_FOR_KIND.get(arr.dtype)
    if code is None:
        raise UnsupportedDtypeError(
            f"dtype {arr.dtype} not storable; use float64, float32 or uint8")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ContainerError(f"rank {arr.ndim} outside [1, 255]")
    header = _MAGIC + bytes([_VERSION, code, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr.astype(_DTYPE_CODES[code], copy=False))
    return header + payload.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    """Parse container bytes back into an ndarray (bitwise round-trip)."""
    if len(buf) < 4 or buf[:4] != _MAGIC:
        raise BadMagicError(f"expected magic {_MAGIC!r}")
    if len(buf) < 7:
        raise TruncatedError("header cut short")
    version, code, rank = buf[4], buf[5], buf[6]
    if version != _VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    offset = 7 + 4 * rank
    if len(buf) < offset:
        raise TruncatedError("extent table cut short")
    shape = struct.unpack(f"<{rank}I", buf[7:offset])
    dtype = np.dtype(_DTYPE_CODES[code])
    expect = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - offset < expect:
        raise TruncatedError(
            f"payload holds {len(buf) - offset} bytes, header promises {expect}")
    if len(buf) - offset > expect:
        raise ContainerError(f"{len(buf) - offset - expect} trailing bytes")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)),
                         offset=offset).reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# PGM (P5) label maps and PPM (P6) RGB previews


def segmap_to_pgm(gt: np.ndarray) -> bytes:
    gt = np.asarray(gt)
    if gt.ndim != 2 or gt.dtype != np.uint8:
        raise ShapeError("PGM label map must be a 2-D uint8 array")
    h, w = gt.shape
    return f"P5\n{w} {h}\n255\n".encode() + gt.tobytes()


def rgb_to_ppm(rgb: np.ndarray) -> bytes:
    """rgb is [3,H,W] float in [0,1] or [H,W,3] uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 3 and rgb.shape[0] == 3 and rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError("PPM wants [3,H,W] float or [H,W,3] uint8")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def _parse_netpbm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if not buf.startswith(magic):
        raise BadMagicError(f"expected {magic!r} header")
    pos = len(magic)
    fields: List[int] = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError("header cut short")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContainerError(f"only maxval 255 supported, got {maxval}")
    expect = w * h * channels
    data = buf[pos:pos + expect]
    if len(data) < expect:
        raise TruncatedError(f"pixel data holds {len(data)} bytes, needs {expect}")
    arr = np.frombuffer(data, dtype=np.uint8).copy()
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))


def pgm_to_segmap(buf: bytes) -> np.ndarray:
    return _parse_netpbm(buf, b"P5", 1)


def ppm_to_rgb(buf: bytes) -> np.ndarray:
    return _parse_netpbm(buf, b"P6", 3)


def write_pgm(path, gt: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(segmap_to_pgm(gt))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return pgm_to_segmap(fh.read())


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(rgb_to_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return ppm_to_rgb(fh.read())


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    """A stack of scenes: images [K,3,H,W] float64 and labels [K,H,W] uint8."""

    images: np.ndarray
    gts: np.ndarray
    seeds: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def build_corpus(spec: SceneSpec, seeds: Sequence[int]) -> Corpus:
    images = np.empty((len(seeds), 3, spec.height, spec.width))
    gts = np.empty((len(seeds), spec.height, spec.width), dtype=np.uint8)
    for i, s in enumerate(seeds):
        images[i], gts[i] = generate_scene(spec, s)
    return Corpus(images=images, gts=gts, seeds=list(seeds))
