"""Synthetic shape scenes with token captions.

Two sample kinds drive the training phases:

* ``image_caption``: a canvas with 1-3 colored shapes placed on a 3x3 cell
  grid; the caption lists (color, shape, cell) per shape in cell order.
  Colors and cells are drawn uniformly (cells without replacement), which
  the distribution test counts against.
* ``video_caption``: 2-8 frames of one shape translating at a fixed pixel
  step; the caption encodes start cell, direction, and frame count. The
  (cell, direction) pair is uniform over the choices whose whole path stays
  on the canvas.

Captions use a small synthetic integer vocabulary; everything is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import ContractError, RasterImage

VOCAB_SIZE = 512

PAD, BOS, EOS = 0, 1, 2
INSTRUCTION_PREFIX = (3, 4)  # fixed instruction tokens prepended in the SFT phase

COLOR_BASE, SHAPE_BASE, CELL_BASE, DIR_BASE, FRAMES_BASE = 10, 20, 30, 40, 50

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.85, 0.10),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.92, 0.90, 0.10),
    "magenta": (0.90, 0.10, 0.85),
    "cyan": (0.10, 0.85, 0.90),
}
COLOR_NAMES = tuple(COLORS)
SHAPE_NAMES = ("square", "disk", "triangle")
DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
DIR_NAMES = tuple(DIRECTIONS)

CELL_SIDE = 3  # captions address a 3x3 placement grid
FRAMES_MIN, FRAMES_MAX = 2, 8
MOTION_STEP_PX = 24  # per-frame translation on the default 336px canvas
BACKGROUND = 0.08


def _motion_step(image_px: int) -> int:
    """Per-frame step, scaled so smaller canvases keep feasible paths."""
    return max(1, round(image_px * MOTION_STEP_PX / 336))

KINDS = ("image_caption", "video_caption")


def color_token(name: str) -> int:
    return COLOR_BASE + COLOR_NAMES.index(name)


def shape_token(name: str) -> int:
    return SHAPE_BASE + SHAPE_NAMES.index(name)


def cell_token(cell: int) -> int:
    return CELL_BASE + cell


def direction_token(name: str) -> int:
    return DIR_BASE + DIR_NAMES.index(name)


def frames_token(n_frames: int) -> int:
    return FRAMES_BASE + (n_frames - FRAMES_MIN)


@dataclass
class SyntheticSample:
    media: RasterImage | list[RasterImage]
    caption: list[int]
    kind: str
    scene: dict = field(default_factory=dict)


def _draw_shape(canvas: np.ndarray, kind: str, color, cy: float, cx: float, r: int) -> None:
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif kind == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "triangle":
        # Upward triangle: width grows linearly from apex to base.
        rel = (yy - (cy - r)) / (2 * r)
        mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * r)
    else:
        raise ContractError(f"unknown shape kind {kind!r}")
    canvas[mask] = color


def _cell_center(cell: int, image_px: int) -> tuple[float, float]:
    step = image_px / CELL_SIDE
    row, col = divmod(cell, CELL_SIDE)
    return row * step + step / 2, col * step + step / 2


def _shape_radius(image_px: int) -> int:
    return max(4, int(image_px / CELL_SIDE * 0.32))


def _render_image_scene(shapes, image_px: int) -> RasterImage:
    canvas = np.full((image_px, image_px, 3), BACKGROUND, dtype=np.float64)
    r = _shape_radius(image_px)
    for color_name, shape_name, cell in shapes:
        cy, cx = _cell_center(cell, image_px)
        _draw_shape(canvas, shape_name, COLORS[color_name], cy, cx, r)
    return RasterImage(canvas)


def _generate_image_caption(rng: np.random.Generator, image_px: int) -> SyntheticSample:
    n_shapes = int(rng.integers(1, 4))
    cells = sorted(int(c) for c in rng.choice(CELL_SIDE**2, size=n_shapes, replace=False))
    shapes = [
        (COLOR_NAMES[rng.integers(len(COLOR_NAMES))], SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))], cell)
        for cell in cells
    ]
    caption = [BOS]
    for color_name, shape_name, cell in shapes:
        caption += [color_token(color_name), shape_token(shape_name), cell_token(cell)]
    caption.append(EOS)
    return SyntheticSample(
        media=_render_image_scene(shapes, image_px),
        caption=caption,
        kind="image_caption",
        scene={"shapes": shapes},
    )


def _video_choices(n_frames: int, image_px: int) -> list[tuple[int, str]]:
    """(cell, direction) pairs whose full path keeps the shape on canvas."""
    r = _shape_radius(image_px)
    travel = (n_frames - 1) * _motion_step(image_px)
    choices = []
    for cell in range(CELL_SIDE**2):
        cy, cx = _cell_center(cell, image_px)
        for name, (dy, dx) in DIRECTIONS.items():
            ey, ex = cy + dy * travel, cx + dx * travel
            if r <= ey <= image_px - r and r <= ex <= image_px - r:
                choices.append((cell, name))
    return choices


def _generate_video_caption(rng: np.random.Generator, image_px: int) -> SyntheticSample:
    n_frames = int(rng.integers(FRAMES_MIN, FRAMES_MAX + 1))
    color_name = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
    shape_name = SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))]
    choices = _video_choices(n_frames, image_px)
    while not choices and n_frames > FRAMES_MIN:  # tiny canvas: shorten the clip
        n_frames -= 1
        choices = _video_choices(n_frames, image_px)
    if not choices:
        raise ContractError(f"no feasible motion path on a {image_px}px canvas")
    cell, dir_name = choices[rng.integers(len(choices))]
    cy, cx = _cell_center(cell, image_px)
    dy, dx = DIRECTIONS[dir_name]
    r = _shape_radius(image_px)
    step = _motion_step(image_px)
    frames = []
    for t in range(n_frames):
        canvas = np.full((image_px, image_px, 3), BACKGROUND, dtype=np.float64)
        _draw_shape(canvas, shape_name, COLORS[color_name],
                    cy + dy * t * step, cx + dx * t * step, r)
        frames.append(RasterImage(canvas))
    caption = [BOS, cell_token(cell), direction_token(dir_name), frames_token(n_frames), EOS]
    return SyntheticSample(
        media=frames,
        caption=caption,
        kind="video_caption",
        scene={"color": color_name, "shape": shape_name, "cell": cell,
               "direction": dir_name, "n_frames": n_frames},
    )


def generate_sample(rng_seed: int, kind: str, image_px: int = 336) -> SyntheticSample:
    if kind not in KINDS:
        raise ContractError(f"unknown sample kind {kind!r}")
    rng = np.random.default_rng(rng_seed)
    if kind == "image_caption":
        return _generate_image_caption(rng, image_px)
    return _generate_video_caption(rng, image_px)


def decode_caption(caption: list[int]) -> dict:
    """Invert a caption back to its scene description (for tests and debugging)."""
    if caption[0] != BOS or caption[-1] != EOS:
        raise ContractError("caption missing BOS/EOS")
    body = caption[1:-1]
    if len(body) == 3 and body[1] >= DIR_BASE:
        cell, dir_tok, frames_tok = body
        return {
            "kind": "video_caption",
            "cell": cell - CELL_BASE,
            "direction": DIR_NAMES[dir_tok - DIR_BASE],
            "n_frames": frames_tok - FRAMES_BASE + FRAMES_MIN,
        }
    if len(body) % 3 != 0:
        raise ContractError("image caption body must be (color, shape, cell) triples")
    shapes = []
    for i in range(0, len(body), 3):
        color_tok, shape_tok, cell_tok = body[i : i + 3]
        shapes.append(
            (COLOR_NAMES[color_tok - COLOR_BASE], SHAPE_NAMES[shape_tok - SHAPE_BASE], cell_tok - CELL_BASE)
        )
    return {"kind": "image_caption", "shapes": shapes}
