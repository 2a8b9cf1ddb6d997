"""Periodic orthonormal discrete wavelet transforms for 1D, 2D and 3D grids.

The transform is the Mallat pyramid algorithm applied separably along
each axis (tensor-product basis). Boundaries are handled by periodizing
the filters, so every transform is an exact orthonormal change of basis
and the inverse is the transpose.

Coefficients are stored in one flat vector. The first block holds the
scaling coefficients at level ``j0``; detail blocks follow, level by
level from coarse to fine, and inside a level by orientation. A
:class:`Layout` records where each block lives and can be serialized to
JSON so saved coefficient vectors can be read by other tools.

Grids whose sides are different powers of two are allowed: an axis of
length ``2**J_i`` takes part in levels ``j < J_i`` only. Every axis
therefore ends with ``2**j0`` scaling coefficients.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import prod
from typing import Sequence

import numpy as np

from .filters import filter_pair

LAYOUT_SCHEMA = "waveir.layout/1"


@dataclass(frozen=True)
class WaveletSpec:
    """Wavelet family, decomposition level and boundary rule."""

    family: str = "daubechies-least-asymmetric"
    vanishing_moments: int = 10
    j0: int = 4
    boundary: str = "periodic"

    def __post_init__(self):
        if self.boundary != "periodic":
            raise ValueError("only periodic boundary handling is supported")
        if self.j0 < 0:
            raise ValueError("j0 must be nonnegative")
        filter_pair(self.family, self.vanishing_moments)

    @classmethod
    def haar(cls, j0: int = 0) -> "WaveletSpec":
        return cls(family="haar", vanishing_moments=1, j0=j0)

    @property
    def filters(self) -> tuple[np.ndarray, np.ndarray]:
        return filter_pair(self.family, self.vanishing_moments)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "vanishing_moments": self.vanishing_moments,
            "j0": self.j0,
            "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WaveletSpec":
        return cls(
            family=d["family"],
            vanishing_moments=int(d["vanishing_moments"]),
            j0=int(d["j0"]),
            boundary=d.get("boundary", "periodic"),
        )


@dataclass(frozen=True)
class Block:
    level: int
    orientation: str  # one char per axis: 'a' scaling, 'd' wavelet, 'x' untouched
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return prod(self.shape)


@dataclass(frozen=True)
class Padding:
    """Record of a centered zero padding; enough to undo it exactly."""

    original_shape: tuple[int, ...]
    widths: tuple[tuple[int, int], ...]

    @property
    def is_empty(self) -> bool:
        return all(b == 0 and a == 0 for b, a in self.widths)

    def crop(self, grid: np.ndarray) -> np.ndarray:
        """Remove the padding from the trailing ``len(widths)`` axes."""
        lead = grid.ndim - len(self.widths)
        sl = [slice(None)] * lead
        sl += [slice(b, b + s) for (b, _), s in zip(self.widths, self.original_shape)]
        return grid[tuple(sl)]


def _log2_exact(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"side length {n} is not a power of 2")
    return n.bit_length() - 1


@dataclass(frozen=True)
class Layout:
    """Map from flat coefficient positions to (level, orientation, shift)."""

    spec: WaveletSpec
    padded_shape: tuple[int, ...]
    blocks: tuple[Block, ...]
    padding: Padding

    @classmethod
    def build(cls, padded_shape: Sequence[int], spec: WaveletSpec,
              padding: Padding | None = None) -> "Layout":
        padded_shape = tuple(int(s) for s in padded_shape)
        if not 1 <= len(padded_shape) <= 3:
            raise ValueError("grids must be 1D, 2D or 3D")
        levels = [_log2_exact(s) for s in padded_shape]
        if spec.j0 >= min(levels):
            raise ValueError(
                f"decomposition level j0={spec.j0} is not admissible for grid "
                f"{padded_shape}; need j0 < {min(levels)}"
            )
        if padding is None:
            padding = Padding(padded_shape, tuple((0, 0) for _ in padded_shape))
        d = len(padded_shape)
        blocks = []
        offset = 0
        scaling = tuple(2 ** spec.j0 for _ in range(d))
        blocks.append(Block(spec.j0, "a" * d, 0, scaling))
        offset += prod(scaling)
        for j in range(spec.j0, max(levels)):
            active = [ax for ax in range(d) if levels[ax] > j]
            shape = tuple(2 ** min(j, levels[ax]) for ax in range(d))
            for combo in _orientations(len(active)):
                orient = ["x"] * d
                for ax, c in zip(active, combo):
                    orient[ax] = c
                blocks.append(Block(j, "".join(orient), offset, shape))
                offset += prod(shape)
        if offset != prod(padded_shape):
            raise AssertionError("layout does not partition the coefficient vector")
        return cls(spec, padded_shape, tuple(blocks), padding)

    @property
    def size(self) -> int:
        return prod(self.padded_shape)

    @property
    def ndim(self) -> int:
        return len(self.padded_shape)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(_log2_exact(s) for s in self.padded_shape)

    def level_blocks(self, j: int) -> list[Block]:
        return [b for b in self.blocks if b.level == j and "d" in b.orientation]

    def locate(self, index: int) -> tuple[int, str, tuple[int, ...]]:
        """Return ``(level, orientation, shift)`` for a flat coefficient index."""
        for b in self.blocks:
            if b.offset <= index < b.offset + b.length:
                return b.level, b.orientation, tuple(
                    int(i) for i in np.unravel_index(index - b.offset, b.shape)
                )
        raise IndexError(index)

    def to_dict(self) -> dict:
        return {
            "schema": LAYOUT_SCHEMA,
            "wavelet": self.spec.to_dict(),
            "padded_shape": list(self.padded_shape),
            "original_shape": list(self.padding.original_shape),
            "padding": [list(w) for w in self.padding.widths],
            "blocks": [
                {
                    "level": b.level,
                    "orientation": b.orientation,
                    "offset": b.offset,
                    "length": b.length,
                    "shape": list(b.shape),
                }
                for b in self.blocks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        if d.get("schema") != LAYOUT_SCHEMA:
            raise ValueError(f"unsupported layout schema {d.get('schema')!r}")
        spec = WaveletSpec.from_dict(d["wavelet"])
        padding = Padding(
            tuple(int(s) for s in d["original_shape"]),
            tuple((int(b), int(a)) for b, a in d["padding"]),
        )
        layout = cls.build(d["padded_shape"], spec, padding)
        stored = [
            (b["level"], b["orientation"], b["offset"], b["length"], tuple(b["shape"]))
            for b in d["blocks"]
        ]
        expected = [(b.level, b.orientation, b.offset, b.length, b.shape) for b in layout.blocks]
        if stored != expected:
            raise ValueError("layout blocks are inconsistent with the wavelet spec and shape")
        return layout

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        return cls.from_dict(json.loads(text))


def _orientations(k: int):
    for combo in itertools.product("ad", repeat=k):
        if "d" in combo:
            yield combo


@dataclass
class WaveletCoeffs:
    values: np.ndarray
    layout: Layout

    @property
    def spec(self) -> WaveletSpec:
        return self.layout.spec

    @property
    def original_shape(self) -> tuple[int, ...]:
        return self.layout.padding.original_shape

    def block(self, level: int, orientation: str) -> np.ndarray:
        for b in self.layout.blocks:
            if b.level == level and b.orientation == orientation:
                return self.values[b.offset:b.offset + b.length].reshape(b.shape)
        raise KeyError((level, orientation))


@dataclass
class ImageStack:
    """``n`` images on a shared 1D/2D/3D grid, with an optional validity mask."""

    data: np.ndarray
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim < 2 or self.data.ndim > 4:
            raise ValueError("image stack must have shape (n, d1[, d2[, d3]])")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.grid_shape:
                raise ValueError("mask shape must match the image grid")
            if not np.all(np.isfinite(self.data[:, self.mask])):
                raise ValueError("images contain missing values inside the mask")
        elif not np.all(np.isfinite(self.data)):
            raise ValueError("images contain missing values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def masked(self) -> np.ndarray:
        """Image data with out-of-mask voxels set to zero."""
        if self.mask is None:
            return self.data
        return np.where(self.mask, np.nan_to_num(self.data), 0.0)

    def matrix(self) -> np.ndarray:
        return self.masked().reshape(self.n, -1)


# --------------------------------------------------------------------------
# padding


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def padding_for(shape: Sequence[int]) -> Padding:
    widths = []
    for s in shape:
        if s < 1:
            raise ValueError("grid sides must be at least 1")
        total = next_pow2(s) - s
        widths.append((total // 2, total - total // 2))
    return Padding(tuple(int(s) for s in shape), tuple(widths))


def pad_to_pow2(image: np.ndarray, mode: str = "zero") -> tuple[np.ndarray, Padding]:
    """Zero-pad every side of ``image`` to the next power of 2, centered.

    When the number of added cells is odd the extra one goes on the
    trailing side.
    """
    if mode != "zero":
        raise ValueError("only zero padding is supported")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("grid is empty")
    record = padding_for(image.shape)
    if record.is_empty:
        return image.copy(), record
    return np.pad(image, record.widths), record


def _pad_stack(grids: np.ndarray, record: Padding) -> np.ndarray:
    if record.is_empty:
        return grids
    return np.pad(grids, ((0, 0),) + record.widths)


# --------------------------------------------------------------------------
# one-dimensional periodic filter bank steps along the last axis


def _wrap_extend(x: np.ndarray, width: int) -> np.ndarray:
    L = x.shape[-1]
    reps = -(-(L + width) // L)
    return np.concatenate([x] * reps, axis=-1)


def _analysis(x: np.ndarray, h: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # a[k] = sum_m h[m] x[(2k + m) mod L], same for d with g
    L = x.shape[-1]
    half = L // 2
    xe = _wrap_extend(x, len(h))
    a = np.zeros(x.shape[:-1] + (half,))
    d = np.zeros_like(a)
    for m in range(len(h)):
        seg = xe[..., m:m + L:2]
        a += h[m] * seg
        d += g[m] * seg
    return a, d


def _synthesis(a: np.ndarray, d: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = a.shape[-1]
    L = 2 * half
    F = len(h)
    reps = -(-(L + F) // L)
    out = np.zeros(a.shape[:-1] + (reps * L,))
    for m in range(F):
        out[..., m:m + L:2] += h[m] * a + g[m] * d
    return out.reshape(a.shape[:-1] + (reps, L)).sum(axis=-2)


def _split(x: np.ndarray, axis: int, h, g):
    xm = np.moveaxis(x, axis, -1)
    a, d = _analysis(xm, h, g)
    return np.moveaxis(a, -1, axis), np.moveaxis(d, -1, axis)


def _merge(a: np.ndarray, d: np.ndarray, axis: int, h, g) -> np.ndarray:
    out = _synthesis(np.moveaxis(a, axis, -1), np.moveaxis(d, axis, -1), h, g)
    return np.moveaxis(out, -1, axis)


# --------------------------------------------------------------------------
# batched transforms: leading axis indexes images


def _forward_batch(grids: np.ndarray, layout: Layout) -> np.ndarray:
    h, g = layout.spec.filters
    d = layout.ndim
    levels = layout.levels
    n = grids.shape[0]
    out = np.empty((n, layout.size))
    cur = grids
    for j in range(max(levels) - 1, layout.spec.j0 - 1, -1):
        active = [ax for ax in range(d) if levels[ax] > j]
        bands = {"": cur}
        for ax in active:
            nxt = {}
            for key, arr in bands.items():
                a, dd = _split(arr, ax + 1, h, g)
                nxt[key + "a"] = a
                nxt[key + "d"] = dd
            bands = nxt
        for b in layout.level_blocks(j):
            key = "".join(b.orientation[ax] for ax in active)
            out[:, b.offset:b.offset + b.length] = bands[key].reshape(n, -1)
        cur = bands["a" * len(active)]
    first = layout.blocks[0]
    out[:, :first.length] = cur.reshape(n, -1)
    return out


def _inverse_batch(values: np.ndarray, layout: Layout) -> np.ndarray:
    h, g = layout.spec.filters
    d = layout.ndim
    levels = layout.levels
    n = values.shape[0]
    first = layout.blocks[0]
    cur = values[:, :first.length].reshape((n,) + first.shape)
    for j in range(layout.spec.j0, max(levels)):
        active = [ax for ax in range(d) if levels[ax] > j]
        bands = {"a" * len(active): cur}
        for b in layout.level_blocks(j):
            key = "".join(b.orientation[ax] for ax in active)
            bands[key] = values[:, b.offset:b.offset + b.length].reshape((n,) + b.shape)
        for i in range(len(active) - 1, -1, -1):
            ax = active[i]
            merged = {}
            for key in {k[:i] for k in bands}:
                merged[key] = _merge(bands[key + "a"], bands[key + "d"], ax + 1, h, g)
            bands = merged
        cur = bands[""]
    return cur


# --------------------------------------------------------------------------
# public operations


def dwt(image: np.ndarray, spec: WaveletSpec) -> WaveletCoeffs:
    """Wavelet coefficients of a single image whose sides are powers of 2."""
    image = np.asarray(image, dtype=np.float64)
    layout = Layout.build(image.shape, spec)
    values = _forward_batch(image[None], layout)[0]
    return WaveletCoeffs(values, layout)


def idwt(coeffs: WaveletCoeffs) -> np.ndarray:
    """Inverse transform back to the padded grid."""
    values = np.asarray(coeffs.values, dtype=np.float64)
    if values.shape != (coeffs.layout.size,):
        raise ValueError(
            f"coefficient vector has shape {values.shape}, layout expects ({coeffs.layout.size},)"
        )
    return _inverse_batch(values[None], coeffs.layout)[0]


def stack_layout(grid_shape: Sequence[int], spec: WaveletSpec) -> Layout:
    """Layout used by :func:`dwt_stack` for images of ``grid_shape``."""
    record = padding_for(grid_shape)
    padded = tuple(s + b + a for s, (b, a) in zip(grid_shape, record.widths))
    return Layout.build(padded, spec, record)


def dwt_stack(stack: ImageStack | np.ndarray, spec: WaveletSpec) -> tuple[np.ndarray, Layout]:
    """Transform every image of a stack; returns the ``n x N`` matrix and its layout.

    Images are zero-padded (centered) to power-of-2 sides first, all
    with the same padding.
    """
    if not isinstance(stack, ImageStack):
        stack = ImageStack(stack)
    layout = stack_layout(stack.grid_shape, spec)
    grids = _pad_stack(stack.masked(), layout.padding)
    return _forward_batch(grids, layout), layout


def idwt_rows(values: np.ndarray, layout: Layout, crop: bool = True) -> np.ndarray:
    """Inverse transform each row of ``values``; optionally crop the padding."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[1] != layout.size:
        raise ValueError("coefficient rows do not match the layout size")
    grids = _inverse_batch(values, layout)
    return layout.padding.crop(grids) if crop else grids


def coefficient_image(beta_tilde: np.ndarray, layout: Layout,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """Image-domain version of a coefficient vector, cropped to the original grid."""
    img = idwt_rows(beta_tilde, layout)[0]
    if mask is not None:
        img = np.where(mask, img, 0.0)
    return img
