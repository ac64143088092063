"""Uniform grid tiling of 2D/3D images into subimages.

Channels are never split; only the spatial axes are tiled.  With a
non-divisible extent the last tile along that axis takes the remainder.
Overlap ``delta`` grows each tile on its interior sides and is clipped at
the image border.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class Tile:
    index: int
    position: tuple          # grid coordinates
    origin: tuple            # expanded region start
    extents: tuple           # expanded region size
    core_origin: tuple       # region before overlap expansion
    core_extents: tuple

    @property
    def slices(self):
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extents))

    @property
    def region(self):
        return tuple((o, o + e) for o, e in zip(self.origin, self.extents))


@dataclass(frozen=True)
class Decomposition:
    shape: tuple             # spatial extents (H, W[, D])
    grid: tuple
    delta: int
    tiles: tuple
    channels: int = 1

    @property
    def n(self) -> int:
        return len(self.tiles)

    @property
    def rank(self) -> int:
        return len(self.shape)

    def tile_input_shape(self, i: int) -> tuple:
        return (self.channels,) + self.tiles[i].extents

    @property
    def uniform(self) -> bool:
        return len({t.extents for t in self.tiles}) == 1

    def label(self) -> str:
        return format_grid(self.grid)


def parse_grid(text: str) -> tuple:
    """``"2x2"`` -> ``(2, 2)``; ``"4x4x2"`` -> ``(4, 4, 2)``."""
    if not re.fullmatch(r"\s*\d+(\s*[xX]\s*\d+){1,2}\s*", str(text)):
        raise ContractError(f"grid must look like PxQ or PxQxR, got {text!r}")
    grid = tuple(int(v) for v in re.split(r"[xX]", str(text).replace(" ", "")))
    if any(g < 1 for g in grid):
        raise ContractError(f"grid extents must be >= 1, got {text!r}")
    return grid


def format_grid(grid) -> str:
    return "x".join(str(g) for g in grid)


def _axis_bounds(n, g):
    size = n // g
    starts = [i * size for i in range(g)]
    ends = starts[1:] + [n]
    return list(zip(starts, ends))


def plan_grid(shape, grid, delta: int = 0, channels: int = 1) -> Decomposition:
    shape = tuple(int(s) for s in shape)
    grid = tuple(int(g) for g in grid)
    if len(shape) not in (2, 3) or len(grid) != len(shape):
        raise ContractError(f"grid {grid} does not match spatial shape {shape}")
    if delta < 0:
        raise ContractError("overlap must be >= 0")
    for n, g in zip(shape, grid):
        if g < 1 or g > n:
            raise ContractError(f"grid extent {g} exceeds spatial extent {n}")
    bounds = [_axis_bounds(n, g) for n, g in zip(shape, grid)]
    tiles = []
    for idx, pos in enumerate(itertools.product(*(range(g) for g in grid))):
        core = [bounds[a][p] for a, p in enumerate(pos)]
        grown = [(max(0, lo - delta), min(n, hi + delta)) for (lo, hi), n in zip(core, shape)]
        tiles.append(Tile(
            index=idx,
            position=pos,
            origin=tuple(lo for lo, _ in grown),
            extents=tuple(hi - lo for lo, hi in grown),
            core_origin=tuple(lo for lo, _ in core),
            core_extents=tuple(hi - lo for lo, hi in core),
        ))
    return Decomposition(shape, grid, int(delta), tuple(tiles), int(channels))


def _check_image(image, plan):
    if tuple(image.shape[-plan.rank:]) != plan.shape:
        raise ShapeError(f"image spatial shape {image.shape[-plan.rank:]} != plan {plan.shape}")
    if image.ndim < plan.rank + 1 or image.shape[-plan.rank - 1] != plan.channels:
        raise ShapeError(f"image {image.shape} does not carry {plan.channels} channel(s)")


def extract_tiles(image, plan: Decomposition) -> list[np.ndarray]:
    """Copy each tile out of `image` (``(C, ...)`` or batched ``(N, C, ...)``)."""
    image = np.asarray(image)
    _check_image(image, plan)
    lead = (Ellipsis,)
    return [image[lead + t.slices].copy() for t in plan.tiles]


def reassemble(tiles, plan: Decomposition) -> np.ndarray:
    """Inverse of :func:`extract_tiles`, writing back each tile's core region."""
    if len(tiles) != plan.n:
        raise ContractError(f"expected {plan.n} tiles, got {len(tiles)}")
    first = np.asarray(tiles[0])
    out = np.empty(first.shape[:-plan.rank] + plan.shape, dtype=first.dtype)
    for tile, t in zip(tiles, plan.tiles):
        tile = np.asarray(tile)
        if tuple(tile.shape[-plan.rank:]) != t.extents:
            raise ShapeError(f"tile {t.index} has shape {tile.shape}, expected extents {t.extents}")
        inner = tuple(
            slice(co - o, co - o + ce)
            for co, o, ce in zip(t.core_origin, t.origin, t.core_extents)
        )
        dest = tuple(slice(co, co + ce) for co, ce in zip(t.core_origin, t.core_extents))
        out[(Ellipsis,) + dest] = tile[(Ellipsis,) + inner]
    return out


def stack_tiles(images, plan: Decomposition) -> np.ndarray:
    """Batch ``(N, C, ...)`` -> ``(N, tiles*C, tile extents)``, tile-major channels."""
    if not plan.uniform:
        raise ContractError("stacking tiles needs equal tile extents (divisible grid, delta=0)")
    return np.concatenate(extract_tiles(images, plan), axis=1)
