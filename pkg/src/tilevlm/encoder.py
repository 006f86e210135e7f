"""Toy vision transformer: one tile-sized view to a square grid of features.

At the default geometry (336px tile, 14px patches) each view becomes a
24x24 grid of 576 feature vectors. The architecture is intentionally
minimal: non-overlapping patchify, linear embed, learned 2D positional
embedding, then pre-norm attention/MLP blocks. Everything runs in float64
so analytic gradients can be checked against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .image import ContractError, RasterImage
from .nninit import init_parameters


@dataclass(frozen=True)
class EncoderConfig:
    tile_px: int = 336
    patch_px: int = 14
    d_v: int = 64
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.tile_px % self.patch_px != 0:
            raise ContractError(f"tile_px {self.tile_px} not divisible by patch_px {self.patch_px}")
        if self.d_v % self.n_heads != 0:
            raise ContractError(f"d_v {self.d_v} not divisible by n_heads {self.n_heads}")

    @property
    def grid_side(self) -> int:
        return self.tile_px // self.patch_px

    @property
    def tokens_per_view(self) -> int:
        return self.grid_side**2


@dataclass
class TokenGrid:
    """A g_h x g_w spatial grid of feature vectors, shape (g_h, g_w, d)."""

    features: torch.Tensor

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ContractError(f"expected (g_h, g_w, d) features, got {tuple(self.features.shape)}")
        if not torch.isfinite(self.features).all():
            raise ContractError("token grid contains non-finite entries")

    @property
    def g_h(self) -> int:
        return self.features.shape[0]

    @property
    def g_w(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]


def full_attention(x: torch.Tensor, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Plain joint-softmax attention over (T, d) projections, head-batched."""
    t, d = x.shape
    hd = d // n_heads
    qh = q.view(t, n_heads, hd).transpose(0, 1)
    kh = k.view(t, n_heads, hd).transpose(0, 1)
    vh = v.view(t, n_heads, hd).transpose(0, 1)
    scores = qh @ kh.transpose(-1, -2) / hd**0.5
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(0, 1).reshape(t, d)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        kw = dict(dtype=torch.float64)
        self.norm1 = nn.LayerNorm(d, **kw)
        self.q = nn.Linear(d, d, **kw)
        self.k = nn.Linear(d, d, **kw)
        self.v = nn.Linear(d, d, **kw)
        self.out = nn.Linear(d, d, **kw)
        self.norm2 = nn.LayerNorm(d, **kw)
        self.fc1 = nn.Linear(d, 4 * d, **kw)
        self.fc2 = nn.Linear(4 * d, d, **kw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.out(full_attention(h, self.q(h), self.k(h), self.v(h), self.n_heads))
        h = self.norm2(x)
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(h)))


class VisionEncoder(nn.Module):
    """Maps a tile_px x tile_px view to a TokenGrid of d_v-dim features."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g, p, d = config.grid_side, config.patch_px, config.d_v
        self.patch_embed = nn.Linear(p * p * 3, d, dtype=torch.float64)
        self.pos_embed = nn.Parameter(torch.zeros(g, g, d, dtype=torch.float64))
        self.blocks = nn.ModuleList(EncoderBlock(d, config.n_heads) for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(d, dtype=torch.float64)
        init_parameters(self, seed)

    def _as_tensor(self, view: RasterImage | torch.Tensor) -> torch.Tensor:
        if isinstance(view, RasterImage):
            view = torch.from_numpy(np.ascontiguousarray(view.pixels))
        t = self.config.tile_px
        if view.shape != (t, t, 3):
            raise ContractError(f"expected a {t}x{t}x3 view, got {tuple(view.shape)}")
        return view.to(self.patch_embed.weight.dtype)

    def patch_embeddings(self, view: RasterImage | torch.Tensor) -> torch.Tensor:
        """Patch embeddings before the positional term, shape (g, g, d_v).

        A shift of the input by whole patches permutes these rows/columns
        correspondingly, which the equivariance test checks.
        """
        pixels = self._as_tensor(view)
        g, p = self.config.grid_side, self.config.patch_px
        patches = pixels.view(g, p, g, p, 3).permute(0, 2, 1, 3, 4).reshape(g, g, p * p * 3)
        return self.patch_embed(patches)

    def encode_view(self, view: RasterImage | torch.Tensor) -> TokenGrid:
        g = self.config.grid_side
        x = (self.patch_embeddings(view) + self.pos_embed).reshape(g * g, self.config.d_v)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return TokenGrid(x.reshape(g, g, self.config.d_v))

    def encode_views(self, views: list[RasterImage | torch.Tensor]) -> list[TokenGrid]:
        return [self.encode_view(v) for v in views]
