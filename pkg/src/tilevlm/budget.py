"""Token and position-ID budget accounting.

Pure arithmetic over the split planner, the merger, and the position-ID
schemes: how many views a media input produces, how many raw and merged
visual tokens those views cost, and how many position IDs each scheme
consumes. No model parameters are involved.
"""

from __future__ import annotations

from dataclasses import dataclass

from .fpid import PositionMode, SequenceLayout, VisualFrame, count_positions
from .glhr import MAX_PATCHES, TILE_PX, compute_grid
from .image import ContractError, ImageDims
from .merger import merged_token_count

STRATEGIES = ("resize", "uniform4", "ds4", "ds12")

DEFAULT_GRID_SIDE = 24  # 336px tile / 14px patch


@dataclass(frozen=True)
class BudgetReport:
    input: dict
    strategy: str | None
    merge_window: int
    views: int
    raw_tokens: int
    merged_tokens: int
    naive_position_ids: int
    shared_position_ids: int

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "strategy": self.strategy,
            "merge_window": self.merge_window,
            "views": self.views,
            "raw_tokens": self.raw_tokens,
            "merged_tokens": self.merged_tokens,
            "naive_position_ids": self.naive_position_ids,
            "shared_position_ids": self.shared_position_ids,
        }


def _views_budget(input_desc: dict, strategy: str | None, views: int,
                  window: int, grid_side: int) -> BudgetReport:
    per_view_raw = grid_side**2
    per_view_merged = merged_token_count(grid_side, window)
    layout = SequenceLayout(tuple(VisualFrame(per_view_merged) for _ in range(views)))
    return BudgetReport(
        input=input_desc,
        strategy=strategy,
        merge_window=window,
        views=views,
        raw_tokens=views * per_view_raw,
        merged_tokens=views * per_view_merged,
        naive_position_ids=count_positions(layout, PositionMode.NAIVE),
        shared_position_ids=count_positions(layout, PositionMode.SHARED_FPID),
    )


def image_budget(
    dims: ImageDims,
    strategy: str,
    window: int = 2,
    tile: int = TILE_PX,
    max_patches: int | None = None,
    grid_side: int = DEFAULT_GRID_SIDE,
) -> BudgetReport:
    """Budget for one image under a splitting strategy.

    ``resize`` is a single global view; ``uniform4`` is a fixed 2x2 split
    plus the global view; ``ds4``/``ds12`` are dynamic splits capped at 4
    or 12 tiles plus the global view.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    if strategy == "resize":
        views = 1
    elif strategy == "uniform4":
        views = 5
    else:
        cap = max_patches if max_patches is not None else (4 if strategy == "ds4" else MAX_PATCHES)
        views = compute_grid(dims, tile=tile, max_patches=cap).n_tiles + 1
    input_desc = {"h_px": dims.h_px, "w_px": dims.w_px}
    return _views_budget(input_desc, strategy, views, window, grid_side)


def video_budget(frames: int, window: int = 2, grid_side: int = DEFAULT_GRID_SIDE) -> BudgetReport:
    """Budget for a video: one view per frame, no splitting."""
    if frames < 1:
        raise ContractError(f"frame count must be >= 1, got {frames}")
    return _views_budget({"frames": frames}, None, frames, window, grid_side)
