"""Downstream evaluation: per-patch segmentation probe, depth RMSE,
keep-ratio ablation sweeps, and qualitative reconstruction dumps.

The probe freezes the color encoder, feeds it full (unmasked) color
input, and trains a single linear layer from patch tokens to class
logits; mIoU over held-out frames measures representation quality. A
full fine-tuning mode exists behind a flag and updates a copy of the
encoder, never the original.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import RgbdFrame, depth_to_millimeters, write_pgm16
from .masking import MaskPlan, patchify
from .model import MaskedDepthModel, _encode, init_model, reconstruct_depth
from .train import TrainConfig, train, validate
from .vit import ViTConfig

# Keep-ratio pairs of the full ablation, in table row order; (1.0, 0.0)
# is the pure-depth baseline (depth prediction from an unmasked image).
APPENDIX_GRID: list[tuple[float, float]] = [
    (0.2, 0.0), (0.2, 0.2), (0.2, 0.5), (0.2, 0.8), (0.2, 1.0),
    (0.5, 0.0), (0.5, 0.2), (0.5, 0.5), (0.5, 0.8), (0.5, 1.0),
    (0.8, 0.0), (0.8, 0.2), (0.8, 0.5), (0.8, 0.8), (0.8, 1.0),
    (1.0, 0.0), (1.0, 0.2), (1.0, 0.5), (1.0, 0.8), (1.0, 1.0),
]

PURE_DEPTH_BASELINE = (1.0, 0.0)


@dataclass
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 20
    batch: int = 256
    seed: int = 0
    momentum: float = 0.9
    normalize: bool = True
    train_fraction: float = 1.0
    finetune: bool = False


@dataclass
class ProbeResult:
    miou: float
    per_class_iou: dict[int, float]
    config: dict
    seed: int


@dataclass
class AblationRow:
    p_c: float
    p_d: float
    val_loss: float
    val_rmse: float
    probe_miou: float
    seed: int
    label: str = ""


def miou(pred: np.ndarray, truth: np.ndarray, n_classes: int,
         include: Sequence[int] | None = None) -> float:
    """Mean IoU over classes present in ``truth`` (optionally filtered)."""
    per_class = per_class_iou(pred, truth, n_classes, include)
    if not per_class:
        return 0.0
    return float(np.mean(list(per_class.values())))


def per_class_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int,
                  include: Sequence[int] | None = None) -> dict[int, float]:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} disagree")
    if pred.size and (max(pred.max(), truth.max()) >= n_classes or min(pred.min(), truth.min()) < 0):
        raise ValueError("class ids out of range")
    out: dict[int, float] = {}
    classes = np.unique(truth)
    if include is not None:
        allowed = set(int(c) for c in include)
        classes = [c for c in classes if int(c) in allowed]
    for c in classes:
        inter = int(np.sum((pred == c) & (truth == c)))
        union = int(np.sum((pred == c) | (truth == c)))
        out[int(c)] = inter / union if union else 0.0
    return out


def extract_features(model: MaskedDepthModel, frames: Sequence[RgbdFrame]) -> np.ndarray:
    """Frozen color-encoder tokens for full (unmasked) color input.

    Returns [n_frames, n_patches, token_dim]; this is the probe-time
    configuration p_c=1, p_d=0.
    """
    all_idx = np.arange(model.grid.n)
    out = np.empty((len(frames), model.grid.n, model.cfg.token_dim), dtype=np.float32)
    with T.no_grad():
        for f, frame in enumerate(frames):
            rows = patchify(frame.color, model.grid)
            tokens = _encode(rows, all_idx, model.color_proj, model.color_blocks, model)
            out[f] = tokens.data
    return out


def _train_head(feats: np.ndarray, labels: np.ndarray, n_classes: int,
                cfg: ProbeConfig) -> tuple[T.Tensor, T.Tensor]:
    """SGD-train a linear classifier on fixed features."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B0B]))
    d = feats.shape[1]
    w = T.Tensor(np.zeros((d, n_classes), dtype=np.float32), requires_grad=True)
    b = T.Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    vw, vb = np.zeros_like(w.data), np.zeros_like(b.data)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(feats))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            logits = T.add_bias(T.matmul(T.Tensor(feats[idx]), w), b)
            loss = T.cross_entropy_mean(logits, labels[idx])
            T.zero_grads([w, b])
            T.backward(loss)
            vw = cfg.momentum * vw + w.grad
            vb = cfg.momentum * vb + b.grad
            w.data -= np.float32(cfg.lr) * vw
            b.data -= np.float32(cfg.lr) * vb
    return w, b


def _finetune_encoder(model: MaskedDepthModel, frames: Sequence[RgbdFrame],
                      labels: np.ndarray, n_classes: int,
                      cfg: ProbeConfig) -> tuple[MaskedDepthModel, T.Tensor, T.Tensor]:
    """Fine-tune a copy of the color encoder with a fresh linear head.

    The decoder is not reused for classification; a fresh head on the
    encoder tokens is the whole segmentation model here.
    """
    tuned = copy.deepcopy(model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E]))
    d = tuned.cfg.token_dim
    w = T.Tensor(np.zeros((d, n_classes), dtype=np.float32), requires_grad=True)
    b = T.Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    params = [t for t in ([tuned.color_proj.w, tuned.color_proj.b]
                          + [p for blk in tuned.color_blocks for p in blk.tensors()])]
    params += [w, b]
    vel = [np.zeros_like(p.data) for p in params]
    all_idx = np.arange(tuned.grid.n)
    for _ in range(cfg.epochs):
        for f in rng.permutation(len(frames)):
            rows = patchify(frames[f].color, tuned.grid)
            tokens = _encode(rows, all_idx, tuned.color_proj, tuned.color_blocks, tuned)
            logits = T.add_bias(T.matmul(tokens, w), b)
            loss = T.cross_entropy_mean(logits, labels[f])
            T.zero_grads(params)
            T.backward(loss)
            for p, v in zip(params, vel):
                if p.grad is None:
                    continue
                v *= cfg.momentum
                v += p.grad
                p.data -= np.float32(cfg.lr) * v
    return tuned, w, b


@dataclass
class FittedProbe:
    """Trained probe head plus the statistics needed to apply it."""

    w: T.Tensor
    b: T.Tensor
    n_classes: int
    train_classes: np.ndarray
    feat_mu: np.ndarray
    feat_sd: np.ndarray
    normalize: bool
    model: MaskedDepthModel      # frozen or fine-tuned copy

    def predict(self, frames: Sequence[RgbdFrame]) -> np.ndarray:
        feats = extract_features(self.model, frames)
        flat = feats.reshape(-1, feats.shape[-1])
        if self.normalize:
            flat = (flat - self.feat_mu) / self.feat_sd
        logits = flat @ self.w.data + self.b.data
        return logits.argmax(axis=1).reshape(feats.shape[0], feats.shape[1])


def fit_probe(model: MaskedDepthModel, frames: Sequence[RgbdFrame],
              labels: np.ndarray, cfg: ProbeConfig) -> FittedProbe:
    """Train the segmentation probe; never mutates ``model``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(frames), model.grid.n):
        raise ValueError(f"labels shape {labels.shape} does not match "
                         f"({len(frames)}, {model.grid.n})")
    if not 0.0 < cfg.train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    if cfg.train_fraction < 1.0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF8AC]))
        keep = rng.permutation(len(frames))[:max(1, round(cfg.train_fraction * len(frames)))]
        frames = [frames[i] for i in keep]
        labels = labels[keep]

    n_classes = int(labels.max()) + 1
    train_classes = np.unique(labels)

    if cfg.finetune:
        probe_model, w, b = _finetune_encoder(model, frames, labels, n_classes, cfg)
        feats = extract_features(probe_model, frames)
    else:
        probe_model = model
        feats = extract_features(model, frames)

    flat = feats.reshape(-1, feats.shape[-1]).astype(np.float32)
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0) + np.float32(1e-6)
    if cfg.normalize:
        flat = (flat - mu) / sd

    if not cfg.finetune:
        w, b = _train_head(flat, labels.reshape(-1), n_classes, cfg)
    elif cfg.normalize:
        # Fine-tuned head was trained on raw tokens; retrain on the
        # normalized features for a consistent predict path.
        w, b = _train_head(flat, labels.reshape(-1), n_classes, cfg)

    return FittedProbe(w=w, b=b, n_classes=n_classes, train_classes=train_classes,
                       feat_mu=mu, feat_sd=sd, normalize=cfg.normalize, model=probe_model)


def linear_probe(model: MaskedDepthModel, train_frames: Sequence[RgbdFrame],
                 train_labels: np.ndarray, val_frames: Sequence[RgbdFrame],
                 val_labels: np.ndarray, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Probe + held-out mIoU. Classes never seen in training are dropped
    from the mean with a warning."""
    cfg = cfg or ProbeConfig()
    probe = fit_probe(model, train_frames, train_labels, cfg)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    pred = probe.predict(val_frames)

    present = np.unique(val_labels)
    missing = sorted(set(present.tolist()) - set(probe.train_classes.tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from probe training set; "
                      f"excluded from mIoU", stacklevel=2)
    per_class = per_class_iou(pred, val_labels, probe.n_classes,
                              include=probe.train_classes.tolist())
    score = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ProbeResult(miou=score, per_class_iou=per_class, config=asdict(cfg), seed=cfg.seed)


def run_ablation(pairs: Sequence[tuple[float, float]], grid, vit_cfg: ViTConfig,
                 train_frames: Sequence[RgbdFrame], train_labels: np.ndarray,
                 val_frames: Sequence[RgbdFrame], val_labels: np.ndarray,
                 base_cfg: TrainConfig, probe_cfg: ProbeConfig | None = None) -> list[AblationRow]:
    """Pre-train one model per keep-ratio pair (shared seed) and evaluate."""
    probe_cfg = probe_cfg or ProbeConfig(seed=base_cfg.seed)
    rows = []
    for p_c, p_d in pairs:
        cfg = replace(base_cfg, p_c=p_c, p_d=p_d)
        model = init_model(grid, vit_cfg, np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0x1217])))
        model, _ = train(train_frames, model, cfg, val_frames=None)
        val_loss, val_rmse = validate(val_frames, model, cfg, epoch=0)
        result = linear_probe(model, train_frames, train_labels, val_frames, val_labels,
                              probe_cfg)
        rows.append(AblationRow(
            p_c=p_c, p_d=p_d, val_loss=val_loss, val_rmse=val_rmse,
            probe_miou=result.miou, seed=cfg.seed,
            label="pure-depth-baseline" if (p_c, p_d) == PURE_DEPTH_BASELINE else "",
        ))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> None:
    with open(path, "w") as f:
        f.write("p_c,p_d,val_loss,val_rmse,probe_miou,seed,label\n")
        for r in rows:
            f.write(f"{r.p_c:g},{r.p_d:g},{r.val_loss:.10g},{r.val_rmse:.10g},"
                    f"{r.probe_miou:.10g},{r.seed},{r.label}\n")


def rmse_depth(pred: np.ndarray, frame: RgbdFrame) -> float:
    """Root mean squared depth error over valid pixels."""
    err = (pred - frame.depth)[frame.valid]
    return float(np.sqrt(np.mean(err**2)))


def dump_reconstruction(model: MaskedDepthModel, frame: RgbdFrame, plan: MaskPlan,
                        stem: Path) -> dict[str, Path]:
    """Write the masked-input view, the prediction, and the ground truth
    as a 16-bit PGM triple (``<stem>.input/.pred/.gt.pgm``).

    The input view composites what the network saw: color-kept patches as
    16-bit luminance, depth-kept patches in millimeters, everything else
    black.
    """
    grid = model.grid
    pred = reconstruct_depth(frame, plan, model)

    lum = (0.299 * frame.color[0] + 0.587 * frame.color[1] + 0.114 * frame.color[2])
    lum16 = np.clip(np.rint(lum * 65535.0), 0, 65535).astype(np.uint16)
    depth16 = depth_to_millimeters(frame.depth[0])
    canvas = np.zeros_like(depth16)
    p, cols = grid.patch, grid.cols
    for idx in plan.color_kept:
        r0, c0 = (idx // cols) * p, (idx % cols) * p
        canvas[r0:r0 + p, c0:c0 + p] = lum16[r0:r0 + p, c0:c0 + p]
    for idx in plan.depth_kept:
        r0, c0 = (idx // cols) * p, (idx % cols) * p
        canvas[r0:r0 + p, c0:c0 + p] = depth16[r0:r0 + p, c0:c0 + p]

    stem = Path(stem)
    paths = {
        "input": stem.parent / f"{stem.name}.input.pgm",
        "pred": stem.parent / f"{stem.name}.pred.pgm",
        "gt": stem.parent / f"{stem.name}.gt.pgm",
    }
    write_pgm16(paths["input"], canvas)
    write_pgm16(paths["pred"], depth_to_millimeters(pred[0]))
    write_pgm16(paths["gt"], depth16)
    return paths
