"""Window partitioning for token feature maps.

Feature maps are channels-last tensors [*spatial, c] with 2 or 3
spatial axes.  ``window_partition`` tiles the map into non-overlapping
base windows; ``window_area_partition`` extracts enlarged searching
windows by sliding a magnified window with the base window as stride,
padded so each searching window is centered on its base window.  Both
produce the same window count.  Partitions are built as flat gather
indices so they stay differentiable and invert exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class Magnification:
    """Integer per-axis scaling of the base window for searching windows."""

    alpha: int = 2
    beta: int = 2
    gamma: int = 2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1:
            raise ValueError(f"magnification components must be >= 1, got {self}")

    def factors(self, rank: int):
        return (self.alpha, self.beta, self.gamma)[:rank]

    @property
    def mu(self) -> int:
        return self.alpha * self.beta * self.gamma


@dataclass
class WindowSet:
    """A batch of fixed-size token windows plus inversion bookkeeping.

    windows:        Tensor [n, tokens_per_window, c]
    window_extents: token counts per window, per spatial axis
    origin_grid:    [n, rank] window origins in source-map coordinates
                    (searching-window origins may be negative: they index
                    into the symmetric border padding)
    source_shape:   original map shape (*spatial, c)
    kind:           "base" | "searching"
    """

    windows: Tensor
    window_extents: tuple
    origin_grid: np.ndarray
    source_shape: tuple
    kind: str
    _padded_spatial: tuple = None
    _indices: np.ndarray = None

    @property
    def count(self) -> int:
        return self.windows.shape[0]

    def with_windows(self, windows: Tensor) -> "WindowSet":
        """Same bookkeeping, new window contents (e.g. after attention)."""
        if windows.shape != self.windows.shape:
            raise ShapeError(
                f"replacement windows shape {windows.shape} != {self.windows.shape}")
        return WindowSet(windows, self.window_extents, self.origin_grid,
                         self.source_shape, self.kind,
                         self._padded_spatial, self._indices)


def _check_map(features: Tensor):
    if features.ndim not in (3, 4):
        raise ShapeError(
            f"feature map must be [*spatial, c] with 2 or 3 spatial axes, "
            f"got shape {features.shape}")
    return features.ndim - 1


def _gather_indices(padded_spatial, window, origins_per_axis):
    """Flat token indices [n, tokens] into the padded grid."""
    rank = len(padded_spatial)
    strides = np.ones(rank, dtype=np.int64)
    for i in range(rank - 2, -1, -1):
        strides[i] = strides[i + 1] * padded_spatial[i + 1]
    grids = np.meshgrid(*origins_per_axis, indexing="ij")
    origins = np.stack([g.reshape(-1) for g in grids], axis=1)  # [n, rank]
    offs = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij"),
                    axis=-1).reshape(-1, rank)                  # [tokens, rank]
    coords = origins[:, None, :] + offs[None, :, :]
    idx = (coords * strides).sum(axis=2)
    return idx, origins


def window_partition(features: Tensor, window) -> WindowSet:
    """Tile a map into non-overlapping base windows (zero-padded high side)."""
    rank = _check_map(features)
    window = tuple(int(w) for w in window)
    if len(window) != rank:
        raise ShapeError(f"window {window} does not match map rank {rank}")
    spatial = features.shape[:-1]
    c = features.shape[-1]
    if any(w > s for w, s in zip(window, spatial)):
        raise ShapeError(f"window {window} larger than map {spatial}")

    padded = tuple(-(-s // w) * w for s, w in zip(spatial, window))
    x = features
    if padded != spatial:
        x = T.pad(x, tuple((0, p - s) for p, s in zip(padded, spatial)) + ((0, 0),))
    flat = T.reshape(x, (int(np.prod(padded)), c))

    origins_per_axis = [np.arange(0, p, w) for p, w in zip(padded, window)]
    idx, origins = _gather_indices(padded, window, origins_per_axis)
    windows = T.take_rows(flat, idx)
    return WindowSet(windows, window, origins, features.shape, "base",
                     padded, idx)


def window_area_partition(features: Tensor, window, mag: Magnification) -> WindowSet:
    """Extract enlarged searching windows, one per base window.

    Searching extents are the base window scaled by the magnification;
    the slide stride is the base window, with symmetric zero padding of
    (mag-1)*window/2 per side so each searching window is centered on
    its base window.  The window count equals window_partition's.
    """
    rank = _check_map(features)
    window = tuple(int(w) for w in window)
    factors = mag.factors(rank)
    spatial = features.shape[:-1]
    c = features.shape[-1]
    if any(w > s for w, s in zip(window, spatial)):
        raise ShapeError(f"window {window} larger than map {spatial}")

    padded = tuple(-(-s // w) * w for s, w in zip(spatial, window))
    search = tuple(a * w for a, w in zip(factors, window))
    lo = tuple((a - 1) * w // 2 for a, w in zip(factors, window))
    hi = tuple((a - 1) * w - l for (a, w, l) in zip(factors, window, lo))

    pad_width = tuple((l, (p - s) + h)
                      for l, h, p, s in zip(lo, hi, padded, spatial)) + ((0, 0),)
    x = T.pad(features, pad_width)
    full = tuple(p + l + h for p, l, h in zip(padded, lo, hi))
    flat = T.reshape(x, (int(np.prod(full)), c))

    origins_per_axis = [np.arange(0, p, w) for p, w in zip(padded, window)]
    idx, origins = _gather_indices(full, search, origins_per_axis)
    windows = T.take_rows(flat, idx)
    # report origins relative to the unpadded source map
    origins = origins - np.asarray(lo, dtype=origins.dtype)
    return WindowSet(windows, search, origins, features.shape, "searching",
                     full, idx)


def window_merge(ws: WindowSet, target_shape=None) -> Tensor:
    """Exact inverse of window_partition; strips any recorded padding."""
    if ws.kind != "base":
        raise ShapeError("window_merge applies to base window sets only")
    if target_shape is not None and tuple(target_shape) != tuple(ws.source_shape):
        raise ShapeError(
            f"target shape {tuple(target_shape)} disagrees with recorded "
            f"source shape {tuple(ws.source_shape)}")
    spatial = ws.source_shape[:-1]
    c = ws.source_shape[-1]
    n, t = ws.windows.shape[0], ws.windows.shape[1]

    inv = np.empty(int(np.prod(ws._padded_spatial)), dtype=np.int64)
    inv[ws._indices.reshape(-1)] = np.arange(n * t)
    flat = T.reshape(ws.windows, (n * t, c))
    merged = T.take_rows(flat, inv)
    merged = T.reshape(merged, ws._padded_spatial + (c,))
    if ws._padded_spatial != spatial:
        merged = T.crop(merged, tuple(slice(0, s) for s in spatial) + (slice(None),))
    return merged


def cyclic_shift(features: Tensor, shift, direction: str = "forward") -> Tensor:
    """Cyclic roll of the token lattice; inverse(forward(x)) == x."""
    rank = _check_map(features)
    shift = tuple(int(s) for s in shift)
    if len(shift) != rank:
        raise ShapeError(f"shift {shift} does not match map rank {rank}")
    if any(abs(s) >= e for s, e in zip(shift, features.shape[:-1])):
        raise ShapeError(
            f"shift {shift} must be smaller than map extents {features.shape[:-1]}")
    if direction == "forward":
        shifts = tuple(-s for s in shift)
    elif direction == "inverse":
        shifts = shift
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return T.roll(features, shifts, tuple(range(rank)))
