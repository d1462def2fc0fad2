"""Pre-training loop: SGD with momentum, stepped LR decay, gradient
accumulation over micro-batches, checkpointing, and metrics logging.

The per-step loss is the mean over the effective batch
(``micro_batch * accum`` frames), so accumulating gradients over
micro-batches produces exactly the same update as one large batch.
Training is single-threaded over the graph and bitwise reproducible per
seed and thread count.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .masking import PatchGrid, sample_mask_plan
from .model import MaskedDepthModel, init_model, joint_loss, reconstruct_depth
from .vit import ViTConfig

CHECKPOINT_MAGIC = b"M3D1"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training hit a non-finite loss; aborted before corrupting state."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, truncated, or from a different format."""


@dataclass
class TrainConfig:
    lr0: float = 0.05
    decay: float = 0.99
    decay_every: int = 1000
    epochs: int = 50
    micro_batch: int = 8
    accum: int = 2
    p_c: float = 0.2
    p_d: float = 0.2
    lambda_rgb: float = 0.0
    seed: int = 0
    momentum: float = 0.9
    supervise_masked_only: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.micro_batch < 1 or self.accum < 1 or self.epochs < 0:
            raise ValueError("decay_every, micro_batch, accum must be >= 1 and epochs >= 0")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum


@dataclass
class RunMetrics:
    """Per-step records plus per-epoch validation summaries."""

    steps: list[tuple[int, float, float, float]] = field(default_factory=list)  # step, lr, loss, wall_ms
    val: list[tuple[int, float, float]] = field(default_factory=list)           # epoch, loss, rmse

    def log_step(self, step: int, lr: float, loss: float, wall_ms: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append((step, lr, loss, wall_ms))

    def log_val(self, epoch: int, loss: float, rmse: float) -> None:
        self.val.append((epoch, loss, rmse))

    def final_loss(self) -> float | None:
        return self.steps[-1][2] if self.steps else None

    def write_csv(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "metrics.csv", "w") as f:
            f.write("step,lr,loss,wall_ms\n")
            for step, lr, loss, ms in self.steps:
                f.write(f"{step},{lr:.10g},{loss:.10g},{ms:.3f}\n")
        with open(out_dir / "val_metrics.csv", "w") as f:
            f.write("val_epoch,val_loss,val_rmse\n")
            for epoch, loss, rmse in self.val:
                f.write(f"{epoch},{loss:.10g},{rmse:.10g}\n")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Stepped exponential schedule: lr0 * decay^(step // decay_every)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay ** (step // cfg.decay_every)


class SGD:
    """Momentum SGD: v = momentum*v + grad; p -= lr*v."""

    def __init__(self, params: Sequence[T.Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= np.asarray(lr, dtype=p.dtype) * v

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def _mask_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x3A5C]))


def _order_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x0DD3]))


def validate(frames, model: MaskedDepthModel, cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    """(mean loss, mean depth RMSE) over frames with epoch-seeded plans."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11D, epoch]))
    losses, rmses = [], []
    with T.no_grad():
        for frame in frames:
            plan = sample_mask_plan(rng, model.grid, cfg.p_c, cfg.p_d)
            losses.append(joint_loss(frame, plan, model, cfg.lambda_rgb,
                                     cfg.supervise_masked_only).item())
            pred = reconstruct_depth(frame, plan, model)
            err = (pred - frame.depth)[frame.valid]
            rmses.append(float(np.sqrt(np.mean(err**2))))
    return float(np.mean(losses)), float(np.mean(rmses))


def train(frames: Sequence, model: MaskedDepthModel, cfg: TrainConfig,
          val_frames: Sequence | None = None) -> tuple[MaskedDepthModel, RunMetrics]:
    """Pre-train in place; returns the model and its metrics log.

    Each optimizer step accumulates gradients over ``accum`` micro-batches
    with a freshly sampled mask plan per frame; a non-finite loss aborts
    with the step number and the config.
    """
    if cfg.epochs > 0 and not frames:
        raise ValueError("training corpus is empty")
    opt = SGD(model.parameters(), momentum=cfg.momentum)
    mask_rng = _mask_rng(cfg.seed)
    order_rng = _order_rng(cfg.seed)
    metrics = RunMetrics()

    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(frames))
        for start in range(0, len(order), cfg.effective_batch):
            batch_idx = order[start:start + cfg.effective_batch]
            t0 = time.perf_counter()
            opt.zero_grad()
            total = 0.0
            for mstart in range(0, len(batch_idx), cfg.micro_batch):
                micro = batch_idx[mstart:mstart + cfg.micro_batch]
                losses = []
                for i in micro:
                    plan = sample_mask_plan(mask_rng, model.grid, cfg.p_c, cfg.p_d)
                    losses.append(joint_loss(frames[i], plan, model, cfg.lambda_rgb,
                                             cfg.supervise_masked_only))
                micro_loss = losses[0]
                for extra in losses[1:]:
                    micro_loss = T.add(micro_loss, extra)
                micro_loss = T.scale(micro_loss, 1.0 / len(batch_idx))
                T.backward(micro_loss)
                total += micro_loss.item()
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss {total!r} at step {step}; config: {asdict(cfg)}")
            lr = lr_at(step, cfg)
            opt.step(lr)
            metrics.log_step(step, lr, total, (time.perf_counter() - t0) * 1e3)
            step += 1
        if val_frames:
            val_loss, val_rmse = validate(val_frames, model, cfg, epoch)
            metrics.log_val(epoch, val_loss, val_rmse)
    return model, metrics


# --- checkpoint format ---
# magic "M3D1" | version u32 LE | header-length u32 LE | header JSON (config)
# then per tensor: name-length u32, name utf8, rank u32, dims u32 each,
# float32 little-endian payload.


def _header_dict(model: MaskedDepthModel, metrics: RunMetrics | None) -> dict:
    head = {
        "grid": {"image_h": model.grid.image_h, "image_w": model.grid.image_w,
                 "patch": model.grid.patch},
        "vit": asdict(model.cfg),
    }
    if metrics is not None:
        head["metrics"] = {"n_steps": len(metrics.steps), "final_loss": metrics.final_loss()}
    return head


def save_checkpoint(model: MaskedDepthModel, metrics: RunMetrics | None, path: Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps(_header_dict(model, metrics), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name, t in model.named_tensors():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path) -> MaskedDepthModel:
    """Rebuild a model from a checkpoint; round-trips bitwise for f32."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    view = memoryview(data)
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(bytes(view[12:12 + hlen]))
        grid = PatchGrid(**header["grid"])
        cfg = ViTConfig(**header["vit"])
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")

    model = init_model(grid, cfg, np.random.default_rng(0))
    expected = dict(model.named_tensors())
    off = 12 + hlen
    loaded: dict[str, np.ndarray] = {}
    try:
        while off < len(data):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = bytes(view[off:off + nlen]).decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            off += 4 * count
            loaded[name] = payload.reshape(dims).copy()
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt tensor records: {e}")

    missing = set(expected) - set(loaded)
    unexpected = set(loaded) - set(expected)
    if missing or unexpected:
        raise CheckpointError(f"{path}: tensor names disagree with config "
                              f"(missing={sorted(missing)}, unexpected={sorted(unexpected)})")
    for name, t in expected.items():
        if loaded[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {loaded[name].shape}, "
                                  f"expected {t.data.shape}")
        t.data = loaded[name].astype(np.float32)
    return model
