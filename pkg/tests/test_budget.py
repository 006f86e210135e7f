import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilevlm.budget import image_budget, video_budget
from tilevlm.glhr import compute_grid
from tilevlm.image import ContractError, ImageDims
from tilevlm.merger import merged_token_count


def test_resize_strategy():
    rep = image_budget(ImageDims(336, 336), "resize", window=1)
    assert rep.views == 1
    assert rep.raw_tokens == 576
    assert rep.merged_tokens == 576
    assert rep.naive_position_ids == 576
    assert rep.shared_position_ids == 1


def test_uniform4_is_five_views():
    rep = image_budget(ImageDims(672, 672), "uniform4", window=2)
    assert rep.views == 5
    assert rep.merged_tokens == 5 * 144
    assert rep.shared_position_ids == 5


def test_dynamic_strategies_respect_caps():
    big = ImageDims(4000, 4000)
    ds4 = image_budget(big, "ds4")
    ds12 = image_budget(big, "ds12")
    assert ds4.views == compute_grid(big, max_patches=4).n_tiles + 1
    assert ds12.views == compute_grid(big, max_patches=12).n_tiles + 1
    assert ds4.views <= 5
    assert ds12.views <= 13


def test_video_thirty_frames():
    rep = video_budget(30, window=2)
    assert rep.views == 30
    assert rep.raw_tokens == 30 * 576
    assert rep.merged_tokens == 4320
    assert rep.naive_position_ids == 4320
    assert rep.shared_position_ids == 30


def test_bad_inputs():
    with pytest.raises(ContractError):
        image_budget(ImageDims(100, 100), "mosaic")
    with pytest.raises(ContractError):
        video_budget(0)


@settings(max_examples=80, deadline=None)
@given(
    h=st.integers(1, 4000),
    w=st.integers(1, 4000),
    window=st.integers(1, 8),
)
def test_budget_arithmetic_consistency(h, w, window):
    rep = image_budget(ImageDims(h, w), "ds12", window=window)
    per_view = merged_token_count(24, window)
    assert rep.merged_tokens == rep.views * per_view
    assert rep.raw_tokens == rep.views * 576
    assert rep.naive_position_ids == rep.merged_tokens
    assert rep.shared_position_ids == rep.views
    assert 2 <= rep.views <= 13
