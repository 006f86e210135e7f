"""Global-local high-resolution splitting.

An input image is resized so both sides are multiples of the tile size,
cut into a row-major grid of tile-sized local views, and paired with one
global view (the whole image resized to a single tile). The grid is the
ceiling of each side over the tile size, capped so the tile count never
exceeds ``max_patches``.

Capping rule (the raw ceiling grid can overflow the budget): enumerate all
(rows, cols) with rows*cols <= max_patches and keep the pair whose log
aspect ratio is closest to the image's; ties prefer more tiles, then more
rows. This keeps the retained resolution as high and as undistorted as the
budget allows, and is fully deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .image import ContractError, ImageDims, RasterImage, bilinear_resize, crop

TILE_PX = 336
MAX_PATCHES = 12


@dataclass(frozen=True)
class GridShape:
    """Tile grid: p_h rows by p_w columns."""

    p_h: int
    p_w: int

    def __post_init__(self):
        if self.p_h < 1 or self.p_w < 1:
            raise ContractError(f"grid sides must be positive, got {self.p_h}x{self.p_w}")

    @property
    def n_tiles(self) -> int:
        return self.p_h * self.p_w


@dataclass(frozen=True)
class TileBox:
    """Pixel box of one local view inside the resized image."""

    top: int
    left: int
    h: int
    w: int


@dataclass(frozen=True)
class SplitPlan:
    source: ImageDims
    resize_to: ImageDims
    grid: GridShape
    tiles: tuple[TileBox, ...]
    include_global: bool
    tile_px: int

    @property
    def n_views(self) -> int:
        return len(self.tiles) + (1 if self.include_global else 0)


def uncapped_grid(dims: ImageDims, tile: int = TILE_PX) -> GridShape:
    """ceil(h/tile) x ceil(w/tile), before the patch-budget cap."""
    if tile < 1:
        raise ContractError(f"tile must be positive, got {tile}")
    return GridShape(p_h=math.ceil(dims.h_px / tile), p_w=math.ceil(dims.w_px / tile))


def cap_grid(dims: ImageDims, max_patches: int) -> GridShape:
    """Best grid with at most ``max_patches`` tiles for this aspect ratio."""
    target = math.log(dims.h_px / dims.w_px)
    best = None
    best_key = None
    for rows in range(1, max_patches + 1):
        for cols in range(1, max_patches // rows + 1):
            # Minimize aspect distortion; prefer more tiles, then more rows.
            key = (abs(math.log(rows / cols) - target), -(rows * cols), -rows)
            if best_key is None or key < best_key:
                best, best_key = GridShape(rows, cols), key
    return best


def compute_grid(dims: ImageDims, tile: int = TILE_PX, max_patches: int = MAX_PATCHES) -> GridShape:
    if max_patches < 1:
        raise ContractError(f"max_patches must be positive, got {max_patches}")
    grid = uncapped_grid(dims, tile)
    if grid.n_tiles <= max_patches:
        return grid
    return cap_grid(dims, max_patches)


def plan_split(
    dims: ImageDims,
    tile: int = TILE_PX,
    max_patches: int = MAX_PATCHES,
    include_global: bool = True,
) -> SplitPlan:
    """Resize target, tile boxes (row-major), and the global-view flag.

    The image is resized straight to (p_h*tile, p_w*tile); aspect distortion
    is absorbed by the resize rather than padding.
    """
    grid = compute_grid(dims, tile, max_patches)
    tiles = tuple(
        TileBox(top=r * tile, left=c * tile, h=tile, w=tile)
        for r in range(grid.p_h)
        for c in range(grid.p_w)
    )
    return SplitPlan(
        source=dims,
        resize_to=ImageDims(grid.p_h * tile, grid.p_w * tile),
        grid=grid,
        tiles=tiles,
        include_global=include_global,
        tile_px=tile,
    )


def apply_split(img: RasterImage, plan: SplitPlan) -> list[RasterImage]:
    """Global view first (when enabled), then the local tiles row-major."""
    if img.dims != plan.source:
        raise ContractError(f"plan was made for {plan.source}, image is {img.dims}")
    views: list[RasterImage] = []
    if plan.include_global:
        views.append(bilinear_resize(img, plan.tile_px, plan.tile_px))
    resized = bilinear_resize(img, plan.resize_to.h_px, plan.resize_to.w_px)
    for box in plan.tiles:
        views.append(crop(resized, box.top, box.left, box.h, box.w))
    return views
