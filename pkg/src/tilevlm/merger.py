"""Mean-pooling token merger.

Pools a token grid inside a w x w spatial window before projection, cutting
the visual token count by roughly w**2. The window is a runtime knob: train
and eval may use different sizes, and nothing downstream depends on the
count. Edge windows on non-divisible grids are clipped and averaged over
the cells actually present, never zero-padded, so constant fields stay
exactly constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .encoder import TokenGrid
from .image import ContractError


@dataclass(frozen=True)
class MergeSpec:
    window: int
    op: str = "mean"

    def __post_init__(self):
        if self.window < 1:
            raise ContractError(f"merge window must be >= 1, got {self.window}")
        if self.op != "mean":
            raise ContractError(f"only mean pooling is implemented, got {self.op!r}")


def merged_token_count(g: int, w: int) -> int:
    """ceil(g/w)**2 tokens remain from a g x g grid."""
    if g < 1 or w < 1:
        raise ContractError(f"grid side and window must be >= 1, got g={g} w={w}")
    return math.ceil(g / w) ** 2


def merge_features(features: torch.Tensor, window: int) -> torch.Tensor:
    """(g_h, g_w, d) -> (ceil(g_h/w), ceil(g_w/w), d) window means."""
    if window < 1:
        raise ContractError(f"merge window must be >= 1, got {window}")
    if window == 1:
        return features
    g_h, g_w, d = features.shape
    if g_h % window == 0 and g_w % window == 0:
        out_h, out_w = g_h // window, g_w // window
        return features.view(out_h, window, out_w, window, d).mean(dim=(1, 3))
    out_h, out_w = math.ceil(g_h / window), math.ceil(g_w / window)
    rows = []
    for oh in range(out_h):
        cols = []
        for ow in range(out_w):
            block = features[oh * window : min((oh + 1) * window, g_h),
                             ow * window : min((ow + 1) * window, g_w)]
            cols.append(block.mean(dim=(0, 1)))
        rows.append(torch.stack(cols))
    return torch.stack(rows)


def merge(grid: TokenGrid, spec: MergeSpec) -> TokenGrid:
    return TokenGrid(merge_features(grid.features, spec.window))
