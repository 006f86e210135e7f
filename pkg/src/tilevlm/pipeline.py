"""Three-phase training protocol, gradient checking, and checkpointing.

Phases freeze all parameter groups except the configured trainable set:
alignment trains only the projector, multi-task adds the visual experts,
and SFT opens everything with a layer-wise learning-rate decay on the
encoder. The optimizer is plain SGD (optional momentum): with momentum m,
``buf = m * buf + grad; param -= lr * buf``, which keeps the one-step
update oracle exact.

Checkpoints are a flat binary format: magic ``MMDA``, a version word, then
one record per parameter (name, shape, raw float64 little-endian values),
sorted by name so identical parameters give identical bytes everywhere.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .data import INSTRUCTION_PREFIX, SyntheticSample, generate_sample
from .fpid import PositionMode
from .glhr import apply_split, plan_split
from .image import ContractError, RasterImage, bilinear_resize
from .vlm import PARAM_GROUPS, VisionLanguageModel, caption_accuracy, caption_loss

PHASE_ORDER = ("alignment", "multitask", "sft")

PHASE_DATA_KINDS = {
    "alignment": ("image_caption",),
    "multitask": ("image_caption", "video_caption"),
    "sft": ("video_caption",),
}

_HOLDOUT_NAMESPACE = 104729  # seed-derivation namespace, distinct from train draws


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    steps: int
    batch_size: int
    base_lr: float
    seed: int
    trainable_groups: frozenset[str] = frozenset()
    encoder_layer_decay: float = 1.0
    merge_window: int = 2
    position_mode: PositionMode = PositionMode.SHARED_FPID
    momentum: float = 0.0
    image_px: int = 336
    prefetch: bool = True

    def __post_init__(self):
        if self.phase not in PHASE_ORDER:
            raise ContractError(f"unknown phase {self.phase!r}")
        if not self.trainable_groups:
            object.__setattr__(self, "trainable_groups", default_trainable_groups(self.phase))
        unknown = self.trainable_groups - set(PARAM_GROUPS)
        if unknown:
            raise ContractError(f"unknown parameter groups {sorted(unknown)}")
        if self.phase == "alignment" and self.trainable_groups != {"projector"}:
            raise ContractError("alignment phase trains exactly the projector")
        if self.phase == "multitask" and not {"projector", "visual_experts"} <= self.trainable_groups:
            raise ContractError("multitask phase must train projector and visual_experts")
        if self.phase == "sft" and self.trainable_groups != set(PARAM_GROUPS):
            raise ContractError("sft phase trains all parameter groups")
        if not 0.0 < self.encoder_layer_decay <= 1.0:
            raise ContractError(f"encoder_layer_decay must be in (0, 1], got {self.encoder_layer_decay}")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be >= 1")

    @property
    def data_kinds(self) -> tuple[str, ...]:
        return PHASE_DATA_KINDS[self.phase]

    @property
    def prefix_ids(self) -> tuple[int, ...]:
        return INSTRUCTION_PREFIX if self.phase == "sft" else ()


def default_trainable_groups(phase: str) -> frozenset[str]:
    if phase == "alignment":
        return frozenset({"projector"})
    if phase == "multitask":
        return frozenset({"projector", "visual_experts"})
    return frozenset(PARAM_GROUPS)


def default_phase_configs(seed: int = 1234) -> list[PhaseConfig]:
    """Desk-scale defaults: three phases, a few minutes total on one core."""
    return [
        PhaseConfig(phase="alignment", steps=60, batch_size=4, base_lr=0.05,
                    momentum=0.9, seed=seed),
        PhaseConfig(phase="multitask", steps=160, batch_size=2, base_lr=0.05,
                    momentum=0.9, seed=seed + 1),
        PhaseConfig(phase="sft", steps=120, batch_size=2, base_lr=0.02,
                    momentum=0.9, encoder_layer_decay=0.5, seed=seed + 2),
    ]


@dataclass
class TrainReport:
    phase: str
    losses: list[float] = field(default_factory=list)
    smoothed_losses: list[float] = field(default_factory=list)
    holdout_accuracy: float = 0.0
    tokens_per_sec: float = 0.0
    wall_time_s: float = 0.0


def layerwise_lr(base_lr: float, decay: float, layer_index: int, n_layers: int) -> float:
    """Geometric decay toward the input: the deepest layer keeps base_lr."""
    if not 0.0 < decay <= 1.0:
        raise ContractError(f"decay must be in (0, 1], got {decay}")
    if not 0 <= layer_index < n_layers:
        raise ContractError(f"layer_index {layer_index} out of range [0, {n_layers})")
    return base_lr * decay ** (n_layers - 1 - layer_index)


def encoder_layer_index(param_name: str, n_layers: int) -> int:
    """Depth slot of an encoder parameter for layer-wise decay.

    Patch/positional embeddings count as the input-nearest slot, the final
    norm as the output-nearest one.
    """
    if param_name.startswith("encoder.blocks."):
        return int(param_name.split(".")[2])
    if param_name.startswith("encoder.final_norm."):
        return n_layers - 1
    return 0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1, dtype=np.uint64)[0])


# ---- media preparation ----------------------------------------------------


def prepare_views(
    sample: SyntheticSample, tile: int = 336, max_patches: int = 12
) -> list[RasterImage]:
    """Views to encode: split plans for images, one resized view per frame."""
    if isinstance(sample.media, RasterImage):
        plan = plan_split(sample.media.dims, tile=tile, max_patches=max_patches)
        return apply_split(sample.media, plan)
    return [bilinear_resize(frame, tile, tile) for frame in sample.media]


# ---- data stream -----------------------------------------------------------


def batch_stream(cfg: PhaseConfig) -> Iterator[list[SyntheticSample]]:
    kinds = cfg.data_kinds
    for step in range(cfg.steps):
        batch = []
        for i in range(cfg.batch_size):
            kind = kinds[(step * cfg.batch_size + i) % len(kinds)]
            batch.append(generate_sample(derive_seed(cfg.seed, step, i), kind, cfg.image_px))
        yield batch


def prefetched(source: Iterable, depth: int = 2) -> Iterator:
    """Run the source on a producer thread behind a bounded FIFO queue.

    Consumption order equals production order, so training remains
    deterministic regardless of interleaving.
    """
    q: queue.Queue = queue.Queue(maxsize=depth)
    _done = object()

    def _produce():
        try:
            for item in source:
                q.put(item)
            q.put(_done)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)

    thread = threading.Thread(target=_produce, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is _done:
            thread.join()
            return
        if isinstance(item, BaseException):
            thread.join()
            raise item
        yield item


# ---- training --------------------------------------------------------------


def _build_optimizer(model: VisionLanguageModel, cfg: PhaseConfig) -> torch.optim.SGD:
    n_enc = model.enc_cfg.n_layers
    param_groups = []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        lr = cfg.base_lr
        if model.group_of(name) == "encoder" and cfg.encoder_layer_decay < 1.0:
            lr = layerwise_lr(cfg.base_lr, cfg.encoder_layer_decay,
                              encoder_layer_index(name, n_enc), n_enc)
        param_groups.append({"params": [param], "lr": lr})
    return torch.optim.SGD(param_groups, momentum=cfg.momentum)


def apply_freeze(model: VisionLanguageModel, trainable_groups: frozenset[str]) -> None:
    for name, param in model.named_parameters():
        param.requires_grad_(model.group_of(name) in trainable_groups)


def sample_forward(
    model: VisionLanguageModel,
    sample: SyntheticSample,
    window: int,
    mode: PositionMode,
    prefix: tuple[int, ...] = (),
):
    views = prepare_views(sample, tile=model.enc_cfg.tile_px)
    return model.forward_views(views, sample.caption, mode, window, prefix)


def _dump_divergence(model, cfg, step, loss_value, out_dir: Path | None) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {
        "phase": cfg.phase,
        "step": step,
        "loss": loss_value,
        "param_norms": {
            group: float(sum(p.detach().norm() ** 2 for _, p in params) ** 0.5) if params else 0.0
            for group, params in model.param_groups().items()
        },
    }
    path = out_dir / f"divergence_{cfg.phase}_step{step}.json"
    path.write_text(json.dumps(state, indent=2, sort_keys=True))
    return path


def run_phase(
    model: VisionLanguageModel,
    cfg: PhaseConfig,
    data: Iterable[list[SyntheticSample]] | None = None,
    sink: Callable[[dict], None] | None = None,
    out_dir: Path | None = None,
) -> tuple[VisionLanguageModel, TrainReport]:
    """Train one phase in place; frozen groups stay bitwise untouched."""
    apply_freeze(model, cfg.trainable_groups)
    optimizer = _build_optimizer(model, cfg)
    stream = data if data is not None else batch_stream(cfg)
    if data is None and cfg.prefetch:
        stream = prefetched(stream)

    report = TrainReport(phase=cfg.phase)
    smoothed = None
    total_tokens = 0
    t_start = time.perf_counter()
    for step, batch in enumerate(stream):
        step_t0 = time.perf_counter()
        optimizer.zero_grad()
        batch_loss = 0.0
        step_tokens = 0
        for sample in batch:  # per-sample backward keeps memory flat; fixed order
            logits, layout = sample_forward(model, sample, cfg.merge_window,
                                            cfg.position_mode, cfg.prefix_ids)
            loss, _ = caption_loss(logits, layout, sample.caption, cfg.prefix_ids)
            (loss / len(batch)).backward()
            batch_loss += float(loss.detach()) / len(batch)
            step_tokens += layout.total_tokens
        if not math.isfinite(batch_loss):
            dump = _dump_divergence(model, cfg, step, batch_loss, out_dir)
            raise TrainingDiverged(f"non-finite loss {batch_loss} at {cfg.phase} step {step}", dump)
        optimizer.step()
        smoothed = batch_loss if smoothed is None else 0.9 * smoothed + 0.1 * batch_loss
        total_tokens += step_tokens
        report.losses.append(batch_loss)
        report.smoothed_losses.append(smoothed)
        if sink is not None:
            sink({
                "phase": cfg.phase,
                "step": step,
                "loss": batch_loss,
                "smoothed_loss": smoothed,
                "lr": cfg.base_lr,
                "tokens": step_tokens,
                "tokens_per_sec": step_tokens / max(time.perf_counter() - step_t0, 1e-9),
                "wall_time_s": time.perf_counter() - step_t0,
            })
    report.wall_time_s = time.perf_counter() - t_start
    report.tokens_per_sec = total_tokens / max(report.wall_time_s, 1e-9)
    report.holdout_accuracy = holdout_accuracy(model, cfg)
    return model, report


def holdout_samples(cfg: PhaseConfig, n: int = 16) -> list[SyntheticSample]:
    kinds = cfg.data_kinds
    return [
        generate_sample(derive_seed(cfg.seed, _HOLDOUT_NAMESPACE + i), kinds[i % len(kinds)], cfg.image_px)
        for i in range(n)
    ]


def holdout_accuracy(model: VisionLanguageModel, cfg: PhaseConfig, n: int = 16) -> float:
    correct = total = 0
    with torch.no_grad():
        for sample in holdout_samples(cfg, n):
            logits, layout = sample_forward(model, sample, cfg.merge_window,
                                            cfg.position_mode, cfg.prefix_ids)
            c, t = caption_accuracy(logits, layout, sample.caption, cfg.prefix_ids)
            correct += c
            total += t
    return correct / max(total, 1)


# ---- gradient checking -----------------------------------------------------


@dataclass
class GradInstance:
    """One forward-able instance: raw views plus token IDs."""

    views: list
    text_ids: list[int]
    prefix_ids: tuple[int, ...] = ()


@dataclass
class GroupGradReport:
    n_coords: int
    max_rel_error: float
    failures: list[dict] = field(default_factory=list)


@dataclass
class GradCheckReport:
    epsilon: float
    rel_tolerance: float
    groups: dict[str, GroupGradReport] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(not g.failures for g in self.groups.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "epsilon": self.epsilon,
            "rel_tolerance": self.rel_tolerance,
            "groups": {
                name: {
                    "n_coords": g.n_coords,
                    "max_rel_error": g.max_rel_error,
                    "failures": g.failures,
                }
                for name, g in self.groups.items()
            },
        }


def _instance_loss(model, instances, window, mode) -> torch.Tensor:
    losses = []
    for inst in instances:
        logits, layout = model.forward_views(inst.views, inst.text_ids, mode,
                                             window, inst.prefix_ids)
        loss, _ = caption_loss(logits, layout, inst.text_ids, inst.prefix_ids)
        losses.append(loss)
    return sum(losses) / len(losses)


def grad_check(
    model: VisionLanguageModel,
    instances: list[GradInstance],
    window: int = 2,
    mode: PositionMode = PositionMode.SHARED_FPID,
    epsilon: float = 1e-5,
    coords_per_group: int = 24,
    rel_tolerance: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Central differences vs autograd on a random subsample per group.

    Relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-6); the
    1e-6 floor keeps genuinely-zero gradients from tripping on difference
    noise while still catching any real mismatch.
    """
    coords_per_group = max(coords_per_group, 20)
    was_trainable = {n: p.requires_grad for n, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(True)
    try:
        model.zero_grad(set_to_none=False)
        _instance_loss(model, instances, window, mode).backward()
        # Parameters autograd never touched (e.g. the encoder on a text-only
        # instance) keep grad=None; that is an exact zero.
        analytic = {
            n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()
        }

        rng = np.random.default_rng(seed)
        report = GradCheckReport(epsilon=epsilon, rel_tolerance=rel_tolerance)
        with torch.no_grad():
            for group, params in model.param_groups().items():
                sizes = [p.numel() for _, p in params]
                total = sum(sizes)
                n_pick = min(coords_per_group, total)
                picks = rng.choice(total, size=n_pick, replace=False)
                group_report = GroupGradReport(n_coords=n_pick, max_rel_error=0.0)
                for flat_idx in sorted(int(i) for i in picks):
                    # Locate the parameter owning this flat coordinate.
                    k, offset = 0, 0
                    while flat_idx >= offset + sizes[k]:
                        offset += sizes[k]
                        k += 1
                    name, param = params[k]
                    local = flat_idx - offset
                    flat = param.view(-1)
                    orig = flat[local].item()
                    flat[local] = orig + epsilon
                    loss_plus = float(_instance_loss(model, instances, window, mode))
                    flat[local] = orig - epsilon
                    loss_minus = float(_instance_loss(model, instances, window, mode))
                    flat[local] = orig
                    fd = (loss_plus - loss_minus) / (2.0 * epsilon)
                    a = analytic[name].view(-1)[local].item()
                    rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                    group_report.max_rel_error = max(group_report.max_rel_error, rel)
                    if rel > rel_tolerance:
                        group_report.failures.append(
                            {"param": name, "index": local, "analytic": a, "fd": fd, "rel": rel}
                        )
                report.groups[group] = group_report
        return report
    finally:
        for n, p in model.named_parameters():
            p.requires_grad_(was_trainable[n])


# ---- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"MMDA"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: torch.nn.Module) -> bytes:
    import struct

    records = sorted((name, tensor) for name, tensor in model.state_dict().items())
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, tensor in records:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        dims = tuple(tensor.shape)
        out.append(struct.pack("<B", len(dims)))
        out.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        out.append(tensor.detach().numpy().astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path: str | Path, model: torch.nn.Module) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    import struct

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, n_records = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        offset = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", data, offset) if ndim else ()
            offset += 4 * ndim
            count = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            tensors[name] = values.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}")
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors


def load_checkpoint(path: str | Path, model: torch.nn.Module) -> None:
    tensors = read_checkpoint(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, extra {extra})")
    with torch.no_grad():
        for name, tensor in state.items():
            if tuple(tensors[name].shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"{tensors[name].shape} vs {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(tensors[name].copy()))


# ---- whole runs ------------------------------------------------------------


def phase_checkpoint_path(out_dir: Path, phase: str) -> Path:
    return out_dir / f"checkpoint_{phase}.mmda"


def run_training(
    model: VisionLanguageModel,
    phase_cfgs: list[PhaseConfig],
    out_dir: Path,
    resume: bool = False,
) -> list[TrainReport]:
    """Run phases in order, writing a JSONL report and checkpoint per phase.

    With ``resume``, phases whose checkpoint already exists are skipped by
    loading the latest one; remaining phases run as usual (each phase seeds
    its own stream, so a resumed run matches an uninterrupted one).
    """
    order = [PHASE_ORDER.index(cfg.phase) for cfg in phase_cfgs]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ContractError("phases must appear at most once, in alignment < multitask < sft order")
    out_dir.mkdir(parents=True, exist_ok=True)

    start_at = 0
    if resume:
        for i, cfg in enumerate(phase_cfgs):
            if phase_checkpoint_path(out_dir, cfg.phase).exists():
                start_at = i + 1
        if start_at > 0:
            load_checkpoint(phase_checkpoint_path(out_dir, phase_cfgs[start_at - 1].phase), model)

    reports = []
    for cfg in phase_cfgs[start_at:]:
        log_path = out_dir / f"train_{cfg.phase}.jsonl"
        with open(log_path, "w") as fh:
            def sink(record: dict):
                fh.write(json.dumps(record, sort_keys=True) + "\n")

            _, report = run_phase(model, cfg, sink=sink, out_dir=out_dir)
        save_checkpoint(phase_checkpoint_path(out_dir, cfg.phase), model)
        reports.append(report)
    save_checkpoint(out_dir / "checkpoint_final.mmda", model)
    return reports
