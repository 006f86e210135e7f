"""Command-line entry points.

Subcommands::

    budget    token / position-ID accounting for an image or video input
    train     run the three-phase curriculum from a JSON config
    eval      held-out accuracy and forward timing for a checkpoint
    gradcheck finite-difference verification of analytic gradients
    report    render loss curves and budget sweeps to PNG + CSV

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
failure. All machine-readable output goes to stdout; diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import re
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data
from .budget import STRATEGIES, image_budget, video_budget
from .config import ConfigError, build_model, load_eval_config, load_train_config
from .data import INSTRUCTION_PREFIX, generate_sample
from .fpid import PositionMode
from .glhr import MAX_PATCHES, TILE_PX
from .image import ContractError, ImageDims, read_ppm
from .merger import merged_token_count
from .pipeline import (
    PHASE_ORDER,
    GradInstance,
    derive_seed,
    grad_check,
    load_checkpoint,
    prepare_views,
    run_training,
)
from .plots import budget_sweep, plot_budget_sweep, plot_loss_curves, write_budget_csv
from .schemas import validate
from .vlm import caption_accuracy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class CliUsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse parser that raises instead of calling sys.exit on bad args."""

    def error(self, message):
        raise CliUsageError(message)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _parse_dims(text: str) -> ImageDims:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise CliUsageError(f"--dims expects HxW (e.g. 672x1008), got {text!r}")
    return ImageDims(int(m.group(1)), int(m.group(2)))


# ---- budget -----------------------------------------------------------------


def cmd_budget(args) -> int:
    given = [name for name, val in
             (("--dims", args.dims), ("--image", args.image), ("--frames", args.frames))
             if val is not None]
    if len(given) != 1:
        raise CliUsageError("exactly one of --dims, --image, --frames is required")
    if args.tile % args.patch != 0:
        raise CliUsageError(f"--tile {args.tile} must be a multiple of --patch {args.patch}")
    grid_side = args.tile // args.patch

    if args.frames is not None:
        if args.strategy is not None:
            raise CliUsageError("--strategy applies to image inputs, not --frames")
        report = video_budget(args.frames, window=args.window, grid_side=grid_side)
    else:
        dims = _parse_dims(args.dims) if args.dims else read_ppm(args.image).dims
        strategy = args.strategy or "ds12"
        report = image_budget(dims, strategy, window=args.window, tile=args.tile,
                              max_patches=args.max_patches, grid_side=grid_side)
    doc = report.to_dict()
    validate(doc, "budget_report")
    _emit(doc)
    return EXIT_OK


# ---- train ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    out_dir = Path(args.out_dir)
    model = build_model(cfg.model, seed=cfg.seed)
    reports = run_training(model, cfg.phases, out_dir, resume=args.resume)
    _emit({
        "out_dir": str(out_dir),
        "checkpoint": str(out_dir / "checkpoint_final.mmda"),
        "phases": [
            {
                "phase": r.phase,
                "steps": len(r.losses),
                "final_loss": r.losses[-1],
                "final_smoothed_loss": r.smoothed_losses[-1],
                "holdout_accuracy": r.holdout_accuracy,
                "tokens_per_sec": r.tokens_per_sec,
                "wall_time_s": r.wall_time_s,
            }
            for r in reports
        ],
    })
    return EXIT_OK


# ---- eval -------------------------------------------------------------------


def _eval_samples(seed: int, n: int, kinds: tuple[str, ...], image_px: int):
    return [
        generate_sample(derive_seed(seed, 7919 + i), kinds[i % len(kinds)], image_px)
        for i in range(n)
    ]


def _timing_views(model, frames: int, seed: int) -> list[torch.Tensor]:
    rng = np.random.default_rng(derive_seed(seed, 104659))
    t = model.enc_cfg.tile_px
    return [torch.from_numpy(rng.random((t, t, 3))) for _ in range(frames)]


def cmd_eval(args) -> int:
    cfg = load_eval_config(args.config)
    if cfg.n_samples < 1 or not cfg.kinds:
        raise ContractError("eval set is empty: need n_samples >= 1 and at least one kind")
    model = build_model(cfg.model, seed=cfg.seed)
    load_checkpoint(args.checkpoint, model)
    if cfg.dtype == "float32":
        model = model.float()
    model.eval()

    samples = _eval_samples(cfg.seed, cfg.n_samples, cfg.kinds, cfg.image_px)
    timing_text = [data.BOS, data.CELL_BASE, data.DIR_BASE, data.FRAMES_BASE, data.EOS]
    windows = []
    with torch.no_grad():
        for window in cfg.merge_windows:
            correct = total = 0
            for sample in samples:
                views = prepare_views(sample, tile=model.enc_cfg.tile_px)
                logits, layout = model.forward_views(
                    views, sample.caption, cfg.position_mode, window, INSTRUCTION_PREFIX
                )
                c, t = caption_accuracy(logits, layout, sample.caption, INSTRUCTION_PREFIX)
                correct += c
                total += t

            n_frames = cfg.timing_frames or 4
            t_views = _timing_views(model, n_frames, cfg.seed)
            times = []
            for rep in range(cfg.timing_repeats + 1):  # first pass is warmup
                t0 = time.perf_counter()
                _, layout = model.forward_views(
                    t_views, timing_text, cfg.position_mode, window
                )
                if rep > 0:
                    times.append(time.perf_counter() - t0)
            median_s = statistics.median(times)
            windows.append({
                "merge_window": window,
                "visual_tokens_per_view": merged_token_count(model.enc_cfg.grid_side, window),
                "accuracy": correct / total,
                "n_targets": total,
                "median_forward_s": median_s,
                "tokens_per_sec": layout.total_tokens / median_s,
            })
    doc = {
        "checkpoint": str(args.checkpoint),
        "position_mode": cfg.position_mode.value,
        "n_samples": cfg.n_samples,
        "seed": cfg.seed,
        "dtype": cfg.dtype,
        "kinds": list(cfg.kinds),
        "windows": windows,
    }
    validate(doc, "eval_metrics")
    _emit(doc)
    return EXIT_OK


# ---- gradcheck --------------------------------------------------------------


def _two_view_instance(seed: int) -> GradInstance:
    """A 336px image (global + one tile) with an 8-token (two-shape) caption."""
    for k in range(1000):
        sample = generate_sample(derive_seed(seed, 31337 + k), "image_caption", 336)
        if len(sample.caption) == 8:
            return GradInstance(views=prepare_views(sample), text_ids=list(sample.caption))
    raise ContractError("no two-shape sample found in 1000 draws")  # pragma: no cover


def cmd_gradcheck(args) -> int:
    model = build_model(None, seed=args.seed)
    if args.text_only:
        instance = GradInstance(views=[], text_ids=[data.BOS, 30, 20, 10, 31, 21, 11, data.EOS])
    else:
        instance = _two_view_instance(args.seed)
    report = grad_check(
        model,
        [instance],
        window=args.window,
        mode=PositionMode(args.position_mode),
        epsilon=args.epsilon,
        coords_per_group=args.coords,
        rel_tolerance=args.tolerance,
        seed=args.seed,
    )
    doc = report.to_dict()
    passed = report.passed
    if args.text_only:
        model.zero_grad(set_to_none=False)
        from .pipeline import _instance_loss

        _instance_loss(model, [instance], args.window, PositionMode(args.position_mode)).backward()
        vis_max = max(
            float(p.grad.abs().max()) if p.grad is not None else 0.0
            for _, p in model.param_groups()["visual_experts"]
        )
        doc["text_only"] = True
        doc["visual_expert_grad_max_abs"] = vis_max
        passed = passed and vis_max == 0.0
        doc["passed"] = passed
    validate(doc, "gradcheck_report")
    _emit(doc)
    return EXIT_OK if passed else EXIT_VERIFY


# ---- report -----------------------------------------------------------------

REPORT_SIZES = [(336, 336), (672, 672), (672, 1008), (1008, 1008),
                (1344, 1008), (2000, 1500), (4000, 3000)]


def cmd_report(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []

    windows = [int(w) for w in args.windows.split(",")]
    rows = budget_sweep(REPORT_SIZES, windows, strategy=args.strategy or "ds12")
    artifacts.append(str(write_budget_csv(rows, out_dir / "budget_sweep.csv")))
    artifacts.append(str(plot_budget_sweep(rows, out_dir / "budget_sweep.png")))

    if args.train_dir is not None:
        def phase_rank(p: Path) -> int:
            name = p.stem.removeprefix("train_")
            return PHASE_ORDER.index(name) if name in PHASE_ORDER else len(PHASE_ORDER)

        jsonl = sorted(Path(args.train_dir).glob("train_*.jsonl"), key=phase_rank)
        if not jsonl:
            raise ContractError(f"no train_*.jsonl files under {args.train_dir}")
        artifacts.append(str(plot_loss_curves(jsonl, out_dir / "loss_curves.png")))

    _emit({"out_dir": str(out_dir), "artifacts": artifacts})
    return EXIT_OK


# ---- wiring -----------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="tilevlm", description=__doc__,
                    formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("budget", help="token/position budget for one input")
    p.add_argument("--dims", help="image size as HxW pixels")
    p.add_argument("--image", help="path to a binary PPM; its size is used")
    p.add_argument("--frames", type=int, help="video frame count")
    p.add_argument("--strategy", choices=STRATEGIES, help="image splitting strategy")
    p.add_argument("--window", type=int, default=2, help="merge window (default 2)")
    p.add_argument("--tile", type=int, default=TILE_PX)
    p.add_argument("--patch", type=int, default=14)
    p.add_argument("--max-patches", type=int, default=None,
                   help=f"tile cap override (default per strategy, ds12={MAX_PATCHES})")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("train", help="run training phases from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true",
                   help="skip phases whose checkpoint already exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and timing for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=24, help="coordinates sampled per group")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--position-mode", choices=[m.value for m in PositionMode],
                   default=PositionMode.SHARED_FPID.value)
    p.add_argument("--text-only", action="store_true",
                   help="use a text-only instance; also reports the visual-expert "
                        "gradient magnitude (must be exactly zero)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render budget sweep and loss-curve figures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-dir", help="directory holding train_<phase>.jsonl logs")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--windows", default="1,2,3", help="comma-separated merge windows")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliUsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
