import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilevlm.glhr import (
    MAX_PATCHES,
    TILE_PX,
    GridShape,
    apply_split,
    cap_grid,
    compute_grid,
    plan_split,
    uncapped_grid,
)
from tilevlm.image import ContractError, ImageDims, RasterImage, bilinear_resize


def brute_force_cap(h, w, max_patches):
    """Independent re-derivation of the capping rule, kept deliberately dumb."""
    target = math.log(h / w)
    candidates = [
        (rows, cols)
        for rows in range(1, max_patches + 1)
        for cols in range(1, max_patches + 1)
        if rows * cols <= max_patches
    ]
    return min(candidates, key=lambda rc: (abs(math.log(rc[0] / rc[1]) - target),
                                           -(rc[0] * rc[1]), -rc[0]))


def test_uncapped_examples():
    assert uncapped_grid(ImageDims(672, 672)) == GridShape(2, 2)
    assert uncapped_grid(ImageDims(336, 336)) == GridShape(1, 1)
    assert uncapped_grid(ImageDims(337, 336)) == GridShape(2, 1)
    assert uncapped_grid(ImageDims(1000, 700)) == GridShape(3, 3)


def test_square_700_uses_the_plain_ceiling():
    # ceil(700/336) = 3 on both sides and 9 <= 12, so no capping happens.
    plan = plan_split(ImageDims(700, 700))
    assert plan.grid == GridShape(3, 3)
    assert plan.resize_to == ImageDims(1008, 1008)
    assert plan.n_views == 10


def test_cap_kicks_in_for_wide_input():
    dims = ImageDims(500, 4000)  # ceiling grid 2x12 = 24 tiles
    assert uncapped_grid(dims).n_tiles > MAX_PATCHES
    grid = compute_grid(dims)
    assert grid.n_tiles <= MAX_PATCHES
    assert (grid.p_h, grid.p_w) == brute_force_cap(500, 4000, MAX_PATCHES)


def test_cap_prefers_more_tiles_on_square():
    # For a square image every (k, k) grid has zero aspect error; the
    # tie-break should pick the largest budget-feasible k (3x3 under 12).
    assert cap_grid(ImageDims(5000, 5000), 12) == GridShape(3, 3)


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 4000), w=st.integers(1, 4000))
def test_cap_matches_brute_force(h, w):
    grid = cap_grid(ImageDims(h, w), MAX_PATCHES)
    assert (grid.p_h, grid.p_w) == brute_force_cap(h, w, MAX_PATCHES)


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 4000), w=st.integers(1, 4000))
def test_view_count_range(h, w):
    plan = plan_split(ImageDims(h, w))
    assert 2 <= plan.n_views <= MAX_PATCHES + 1
    assert plan.grid.n_tiles <= MAX_PATCHES
    assert plan.resize_to.h_px == plan.grid.p_h * TILE_PX
    assert plan.resize_to.w_px == plan.grid.p_w * TILE_PX


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 2000), w=st.integers(1, 2000))
def test_grid_never_capped_when_budget_allows(h, w):
    raw = uncapped_grid(ImageDims(h, w))
    if raw.n_tiles <= MAX_PATCHES:
        assert compute_grid(ImageDims(h, w)) == raw


def test_tiles_row_major():
    plan = plan_split(ImageDims(700, 1000))  # 3x3 grid
    boxes = [(b.top, b.left) for b in plan.tiles]
    assert boxes == [
        (r * TILE_PX, c * TILE_PX) for r in range(3) for c in range(3)
    ]
    assert all(b.h == TILE_PX and b.w == TILE_PX for b in plan.tiles)


def test_apply_split_reassembles_bit_exact():
    rng = np.random.default_rng(3)
    img = RasterImage(rng.random((700, 1000, 3)))
    plan = plan_split(img.dims)
    views = apply_split(img, plan)
    assert len(views) == plan.n_views
    assert all(v.dims == ImageDims(TILE_PX, TILE_PX) for v in views)

    # Global view is the plain resize of the full image.
    global_view = bilinear_resize(img, TILE_PX, TILE_PX)
    assert np.array_equal(views[0].pixels, global_view.pixels)

    # Stitching the locals back together reproduces the resized image exactly.
    resized = bilinear_resize(img, plan.resize_to.h_px, plan.resize_to.w_px)
    rows = []
    locals_ = views[1:]
    for r in range(plan.grid.p_h):
        rows.append(np.concatenate(
            [locals_[r * plan.grid.p_w + c].pixels for c in range(plan.grid.p_w)], axis=1))
    stitched = np.concatenate(rows, axis=0)
    assert np.array_equal(stitched, resized.pixels)


def test_apply_split_checks_source_dims():
    rng = np.random.default_rng(4)
    img = RasterImage(rng.random((100, 100, 3)))
    plan = plan_split(ImageDims(200, 100))
    with pytest.raises(ContractError):
        apply_split(img, plan)


def test_no_global_view_when_disabled():
    plan = plan_split(ImageDims(672, 672), include_global=False)
    assert plan.n_views == 4
    rng = np.random.default_rng(5)
    img = RasterImage(rng.random((672, 672, 3)))
    assert len(apply_split(img, plan)) == 4


def test_bad_args_rejected():
    with pytest.raises(ContractError):
        compute_grid(ImageDims(100, 100), max_patches=0)
    with pytest.raises(ContractError):
        uncapped_grid(ImageDims(100, 100), tile=0)
