"""Report rendering: loss curves and token-budget sweeps as PNG + CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .budget import image_budget  # noqa: E402
from .image import ImageDims  # noqa: E402


def read_train_records(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad record: {exc}")
    if not records:
        raise ValueError(f"{path}: no training records")
    return records


def plot_loss_curves(jsonl_paths: list[Path], out_png: Path) -> Path:
    fig, (ax_loss, ax_rate) = plt.subplots(1, 2, figsize=(10, 4))
    offset = 0
    for path in jsonl_paths:
        records = read_train_records(path)
        steps = [offset + r["step"] for r in records]
        ax_loss.plot(steps, [r["loss"] for r in records], alpha=0.35, lw=0.8)
        ax_loss.plot(
            steps,
            [r["smoothed_loss"] for r in records],
            label=records[0]["phase"],
        )
        ax_rate.plot(steps, [r["tokens_per_sec"] for r in records], label=records[0]["phase"])
        offset = steps[-1] + 1
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("caption loss")
    ax_loss.legend()
    ax_rate.set_xlabel("step")
    ax_rate.set_ylabel("tokens / s")
    ax_rate.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def budget_sweep(
    sizes: list[tuple[int, int]],
    windows: list[int],
    strategy: str = "ds12",
) -> list[dict]:
    rows = []
    for h, w in sizes:
        for window in windows:
            rep = image_budget(ImageDims(h, w), strategy, window=window)
            row = rep.to_dict()
            row["input"] = f"{h}x{w}"
            rows.append(row)
    return rows


def write_budget_csv(rows: list[dict], out_csv: Path) -> Path:
    fields = [
        "input", "strategy", "merge_window", "views", "raw_tokens",
        "merged_tokens", "naive_position_ids", "shared_position_ids",
    ]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows({k: row[k] for k in fields} for row in rows)
    return out_csv


def plot_budget_sweep(rows: list[dict], out_png: Path) -> Path:
    """Merged token count and shared-vs-naive position IDs across the sweep."""
    windows = sorted({r["merge_window"] for r in rows})
    labels = []
    seen = set()
    for r in rows:
        if r["input"] not in seen:
            seen.add(r["input"])
            labels.append(r["input"])
    fig, (ax_tok, ax_pos) = plt.subplots(1, 2, figsize=(11, 4))
    xs = range(len(labels))
    for window in windows:
        by_input = {r["input"]: r for r in rows if r["merge_window"] == window}
        ax_tok.plot(xs, [by_input[l]["merged_tokens"] for l in labels], marker="o",
                    label=f"window {window}")
    ref = [r for r in rows if r["merge_window"] == windows[0]]
    by_input = {r["input"]: r for r in ref}
    ax_pos.plot(xs, [by_input[l]["naive_position_ids"] for l in labels], marker="s",
                label="one id per token")
    ax_pos.plot(xs, [by_input[l]["shared_position_ids"] for l in labels], marker="o",
                label="one id per view")
    for ax in (ax_tok, ax_pos):
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.legend()
    ax_tok.set_ylabel("visual tokens after pooling")
    ax_pos.set_ylabel("position ids consumed")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
