"""Position-ID assignment for mixed text/visual token sequences.

Two schemes over the same layout:

* ``naive``: every token consumes a fresh ID (0, 1, 2, ...).
* ``shared_fpid``: each text token consumes a fresh ID, but all tokens of
  one visual frame/view share a single ID, so a video of F frames spends F
  positions instead of F times the per-frame token count.

Assignment is pure: it returns a new layout with the ID array filled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .image import ContractError


class PositionMode(str, Enum):
    NAIVE = "naive"
    SHARED_FPID = "shared_fpid"


@dataclass(frozen=True)
class TextSegment:
    token_count: int


@dataclass(frozen=True)
class VisualFrame:
    token_count: int


Segment = TextSegment | VisualFrame


@dataclass(frozen=True)
class SequenceLayout:
    """Ordered text/visual segments plus per-token types and position IDs."""

    entries: tuple[Segment, ...]
    position_ids: np.ndarray | None = None

    def __post_init__(self):
        if not self.entries:
            raise ContractError("layout must contain at least one segment")
        for seg in self.entries:
            if seg.token_count < 1:
                raise ContractError(f"segment token_count must be >= 1, got {seg}")
        if self.position_ids is not None and len(self.position_ids) != self.total_tokens:
            raise ContractError(
                f"position_ids length {len(self.position_ids)} != {self.total_tokens} tokens"
            )

    @property
    def total_tokens(self) -> int:
        return sum(seg.token_count for seg in self.entries)

    @property
    def visual_mask(self) -> np.ndarray:
        """Bool array, True at visual-token positions."""
        parts = [
            np.full(seg.token_count, isinstance(seg, VisualFrame), dtype=bool)
            for seg in self.entries
        ]
        return np.concatenate(parts)

    @property
    def token_types(self) -> list[str]:
        return ["visual" if v else "text" for v in self.visual_mask]


def assign_positions(layout: SequenceLayout, mode: PositionMode) -> SequenceLayout:
    """Fill position IDs; IDs start at 0 and are dense."""
    mode = PositionMode(mode)
    ids: list[int] = []
    next_id = 0
    for seg in layout.entries:
        if mode is PositionMode.SHARED_FPID and isinstance(seg, VisualFrame):
            ids.extend([next_id] * seg.token_count)
            next_id += 1
        else:
            ids.extend(range(next_id, next_id + seg.token_count))
            next_id += seg.token_count
    return replace(layout, position_ids=np.asarray(ids, dtype=np.int64))


def count_positions(layout: SequenceLayout, mode: PositionMode) -> int:
    """Number of distinct IDs the layout consumes (max ID + 1)."""
    assigned = assign_positions(layout, mode)
    return int(assigned.position_ids[-1]) + 1
