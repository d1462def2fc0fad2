"""Dual-encoder masked depth reconstruction network.

Kept color patches go through the color encoder, kept depth patches
through a separate (shallower) depth encoder; the two token sets are
fused into one full-grid sequence, with a constant mask token standing in
at every grid position that received neither input. A decoder maps the
fused sequence back to one depth patch per grid position, at the original
image resolution. Training minimizes an L2 loss between per-patch
standardized predictions and per-patch standardized targets.

Only the color encoder (plus, optionally, the decoder) is meant to
survive into downstream use; the depth encoder exists to guide
pre-training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .masking import MaskPlan, PatchGrid, patchify, positional_embedding, unpatchify
from .vit import BlockParams, Linear, ViTConfig, init_block, init_linear, transformer_block

PROV_COLOR = "color"
PROV_DEPTH = "depth"
PROV_MASKED = "masked"

TARGET_EPS = 1e-6            # variance floor in per-patch standardization
MIN_VALID_FRACTION = 0.25    # patches with fewer valid depth pixels drop from the loss


class EmptyTargetError(ValueError):
    """No patch survived the validity rules; the loss is undefined."""


@dataclass
class FusedSequence:
    """Full-grid token sequence entering the decoder.

    Exactly one token per grid position; ``provenance[i]`` records where
    position i's token came from. Depth wins a slot shared by both kept
    sets (only possible when the keep fractions exceed 1 combined).
    """

    tokens: Tensor                # [n, token_dim]
    provenance: np.ndarray        # [n] of {"color", "depth", "masked"}


@dataclass
class MaskedDepthModel:
    grid: PatchGrid
    cfg: ViTConfig
    color_proj: Linear
    depth_proj: Linear
    color_blocks: list[BlockParams]
    depth_blocks: list[BlockParams]
    decoder_blocks: list[BlockParams]
    dec_ln_g: Tensor
    dec_ln_b: Tensor
    depth_head: Linear            # token -> patch^2 depth values
    rgb_head: Linear              # token -> 3*patch^2 color values (joint loss only)
    mask_token: Tensor            # [token_dim], constant, never trained
    pos: np.ndarray               # [n, token_dim] fixed position code

    @property
    def dtype(self):
        return self.color_proj.w.dtype

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in a stable order (excludes the mask token)."""
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []

        def lin(name: str, l: Linear):
            out.append((f"{name}.w", l.w))
            out.append((f"{name}.b", l.b))

        def block(name: str, b: BlockParams):
            out.append((f"{name}.ln1.g", b.ln1_g))
            out.append((f"{name}.ln1.b", b.ln1_b))
            for sub, l in (("wq", b.wq), ("wk", b.wk), ("wv", b.wv), ("wo", b.wo)):
                lin(f"{name}.{sub}", l)
            out.append((f"{name}.ln2.g", b.ln2_g))
            out.append((f"{name}.ln2.b", b.ln2_b))
            lin(f"{name}.fc1", b.fc1)
            lin(f"{name}.fc2", b.fc2)

        lin("color_proj", self.color_proj)
        lin("depth_proj", self.depth_proj)
        for i, b in enumerate(self.color_blocks):
            block(f"color.{i}", b)
        for i, b in enumerate(self.depth_blocks):
            block(f"depth.{i}", b)
        for i, b in enumerate(self.decoder_blocks):
            block(f"decoder.{i}", b)
        out.append(("decoder.ln.g", self.dec_ln_g))
        out.append(("decoder.ln.b", self.dec_ln_b))
        lin("depth_head", self.depth_head)
        lin("rgb_head", self.rgb_head)
        out.append(("mask_token", self.mask_token))
        return out


def init_model(grid: PatchGrid, cfg: ViTConfig, rng: np.random.Generator,
               dtype=np.float32) -> MaskedDepthModel:
    """Random initialization: truncated-normal weights, zero biases, unit
    layer-norm gains; deterministic per generator state."""
    if cfg.patch != grid.patch:
        raise ValueError(f"config patch {cfg.patch} differs from grid patch {grid.patch}")
    d, p = cfg.token_dim, cfg.patch
    model = MaskedDepthModel(
        grid=grid,
        cfg=cfg,
        color_proj=init_linear(rng, 3 * p * p, d, dtype),
        depth_proj=init_linear(rng, p * p, d, dtype),
        color_blocks=[init_block(rng, cfg, dtype) for _ in range(cfg.n_layers_color)],
        depth_blocks=[init_block(rng, cfg, dtype) for _ in range(cfg.n_layers_depth)],
        decoder_blocks=[init_block(rng, cfg, dtype) for _ in range(cfg.n_layers_decoder)],
        dec_ln_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        dec_ln_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        depth_head=init_linear(rng, d, p * p, dtype),
        rgb_head=init_linear(rng, d, 3 * p * p, dtype),
        mask_token=Tensor(np.zeros(d, dtype=dtype), requires_grad=False),
        pos=positional_embedding(grid, d).astype(dtype),
    )
    return model


def parameter_count(cfg: ViTConfig) -> int:
    """Closed-form trainable parameter count for a config.

    Two patch projections, per-block cost times the three stack depths,
    the decoder's final norm, and the two output heads. The constant mask
    token is not trainable and not counted.
    """
    from .vit import block_param_count

    d, p = cfg.token_dim, cfg.patch
    linear = lambda i, o: i * o + o
    n_blocks = cfg.n_layers_color + cfg.n_layers_depth + cfg.n_layers_decoder
    return (
        linear(3 * p * p, d)              # color projection
        + linear(p * p, d)                # depth projection
        + n_blocks * block_param_count(cfg)
        + 2 * d                           # decoder final norm
        + linear(d, p * p)                # depth head
        + linear(d, 3 * p * p)            # rgb head
    )


def _encode(patch_rows: np.ndarray, kept: np.ndarray, proj: Linear,
            blocks: list[BlockParams], model: MaskedDepthModel) -> Tensor | None:
    """Project kept patch rows to tokens and run them through a stack."""
    if kept.size == 0:
        return None
    x = Tensor(patch_rows[kept].astype(model.dtype))
    pos = Tensor(model.pos[kept])
    tokens = T.add(proj(x), pos)
    for b in blocks:
        tokens = transformer_block(tokens, b, model.cfg.n_heads)
    return tokens


def _fuse(color_tokens: Tensor | None, depth_tokens: Tensor | None,
          plan: MaskPlan, model: MaskedDepthModel) -> FusedSequence:
    n = model.grid.n
    provenance = np.full(n, PROV_MASKED, dtype="<U6")
    # Depth owns any slot in both kept sets; the color token is dropped
    # from fusion so every location is represented exactly once.
    color_slots = np.setdiff1d(plan.color_kept, plan.depth_kept)
    provenance[color_slots] = PROV_COLOR
    provenance[plan.depth_kept] = PROV_DEPTH
    masked_slots = np.flatnonzero(provenance == PROV_MASKED)

    parts: list[Tensor] = []
    order = np.empty(n, dtype=np.intp)
    row = 0
    if color_slots.size:
        keep_rows = np.isin(plan.color_kept, color_slots)
        parts.append(T.gather_rows(color_tokens, np.flatnonzero(keep_rows)))
        order[color_slots] = row + np.arange(color_slots.size)
        row += color_slots.size
    if plan.depth_kept.size:
        parts.append(depth_tokens)
        order[plan.depth_kept] = row + np.arange(plan.depth_kept.size)
        row += plan.depth_kept.size
    if masked_slots.size:
        filler = np.tile(model.mask_token.data, (masked_slots.size, 1)) + model.pos[masked_slots]
        parts.append(Tensor(filler.astype(model.dtype)))
        order[masked_slots] = row + np.arange(masked_slots.size)

    tokens = T.gather_rows(T.concat_rows(parts), order)
    return FusedSequence(tokens=tokens, provenance=provenance)


def _forward_full(frame, plan: MaskPlan, model: MaskedDepthModel,
                  with_rgb: bool) -> tuple[Tensor, Tensor | None, FusedSequence]:
    grid = model.grid
    if frame.color.shape[1:] != (grid.image_h, grid.image_w):
        raise T.ShapeError(f"frame {frame.color.shape[1:]} does not match model grid "
                           f"{(grid.image_h, grid.image_w)}")
    if plan.grid != grid:
        raise ValueError("mask plan was sampled for a different grid")

    color_rows = patchify(frame.color, grid)
    depth_rows = patchify(frame.depth, grid)
    color_tokens = _encode(color_rows, plan.color_kept, model.color_proj,
                           model.color_blocks, model)
    depth_tokens = _encode(depth_rows, plan.depth_kept, model.depth_proj,
                           model.depth_blocks, model)
    fused = _fuse(color_tokens, depth_tokens, plan, model)

    h = fused.tokens
    for b in model.decoder_blocks:
        h = transformer_block(h, b, model.cfg.n_heads)
    h = T.layer_norm(h, model.dec_ln_g, model.dec_ln_b)
    pred = model.depth_head(h)
    rgb_pred = model.rgb_head(h) if with_rgb else None
    return pred, rgb_pred, fused


def forward(frame, plan: MaskPlan, model: MaskedDepthModel) -> tuple[Tensor, FusedSequence]:
    """Predict a depth patch row for every grid position.

    Returns the [n, patch^2] prediction and the fused sequence whose
    provenance tags partition the grid into color / depth / masked slots.
    """
    pred, _, fused = _forward_full(frame, plan, model, with_rgb=False)
    return pred, fused


def _standardize_target(target: np.ndarray, valid: np.ndarray,
                        eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row mean/std over valid pixels only. Returns (normalized, mu, sd)."""
    w = valid.astype(target.dtype)
    cnt = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    mu = (target * w).sum(axis=1, keepdims=True) / cnt
    var = (((target - mu) ** 2) * w).sum(axis=1, keepdims=True) / cnt
    sd = np.sqrt(var + eps)
    return (target - mu) / sd, mu, sd


def normalized_patch_l2(pred: Tensor, target: np.ndarray, valid: np.ndarray,
                        eps: float = TARGET_EPS,
                        row_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error between independently standardized patch rows.

    Both the prediction rows and the target rows are standardized
    (subtract mean, divide by sqrt(var + eps)) before the squared
    difference; target statistics and the error sum use valid pixels
    only, and rows with under 25% valid pixels (or excluded by
    ``row_mask``) drop out. Gradient flows through the prediction's
    standardization.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = np.asarray(target)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != target.shape or valid.shape != target.shape:
        raise T.ShapeError(f"loss operands disagree: pred {pred.shape}, target {target.shape}, "
                           f"valid {valid.shape}")

    counts = valid.sum(axis=1)
    rows = counts >= MIN_VALID_FRACTION * target.shape[1]
    if row_mask is not None:
        rows &= np.asarray(row_mask, dtype=bool)
    n_rows = int(rows.sum())
    if n_rows == 0:
        raise EmptyTargetError("no patch passed the validity rules; loss undefined")

    # Same dtype as the prediction path so identical inputs cancel exactly.
    t_norm, _, _ = _standardize_target(target.astype(pred.dtype), valid, eps)
    # Fold pixel validity, per-row averaging, and the row mean into one
    # constant weight matrix: loss = sum(weights * (p_hat - t_hat)^2).
    weights = np.where(valid & rows[:, None], 1.0, 0.0)
    weights /= np.maximum(counts, 1)[:, None]
    weights /= n_rows

    p_hat = T.standardize_rows(pred, eps)
    diff = T.sub(p_hat, Tensor(np.where(valid, t_norm, 0.0).astype(pred.dtype)))
    # Invalid pixels carry zero weight, so the placeholder target value
    # never contributes.
    sq = T.mul(diff, diff)
    return T.sum_all(T.mul_const(sq, weights.astype(pred.dtype)))


def depth_loss(frame, plan: MaskPlan, model: MaskedDepthModel,
               supervise_masked_only: bool = False) -> Tensor:
    """Standard pre-training objective for one frame."""
    pred, _, _ = _forward_full(frame, plan, model, with_rgb=False)
    return _depth_loss_from_pred(pred, frame, plan, model, supervise_masked_only)


def _depth_loss_from_pred(pred: Tensor, frame, plan: MaskPlan, model: MaskedDepthModel,
                          supervise_masked_only: bool) -> Tensor:
    grid = model.grid
    target = patchify(frame.depth, grid)
    valid = patchify(frame.valid.astype(np.float32), grid) > 0.5
    row_mask = None
    if supervise_masked_only:
        row_mask = np.ones(grid.n, dtype=bool)
        row_mask[plan.depth_kept] = False
    return normalized_patch_l2(pred, target, valid, row_mask=row_mask)


def joint_loss(frame, plan: MaskPlan, model: MaskedDepthModel, lambda_rgb: float = 0.0,
               supervise_masked_only: bool = False) -> Tensor:
    """Depth loss plus an optional color reconstruction term.

    ``lambda_rgb == 0`` takes the depth-only path and is exactly the
    default objective.
    """
    if lambda_rgb < 0:
        raise ValueError("lambda_rgb must be >= 0")
    if lambda_rgb == 0.0:
        return depth_loss(frame, plan, model, supervise_masked_only)

    pred, rgb_pred, _ = _forward_full(frame, plan, model, with_rgb=True)
    loss = _depth_loss_from_pred(pred, frame, plan, model, supervise_masked_only)
    rgb_target = patchify(frame.color, model.grid)
    rgb_valid = np.ones_like(rgb_target, dtype=bool)
    rgb_loss = normalized_patch_l2(rgb_pred, rgb_target, rgb_valid)
    return T.add(loss, T.scale(rgb_loss, lambda_rgb))


def reconstruct_depth(frame, plan: MaskPlan, model: MaskedDepthModel) -> np.ndarray:
    """Forward pass plus metric recovery, producing a [1, h, w] depth map.

    Predictions live in per-patch standardized space; each patch is
    rescaled with the statistics of the corresponding input depth patch
    when that patch was visible, and with the frame's visible-depth
    statistics otherwise. Evaluation convenience only; training never
    de-normalizes.
    """
    valid = frame.valid
    if not valid.any():
        raise EmptyTargetError("frame has no valid depth; nothing to rescale against")

    with T.no_grad():
        pred, _, _ = _forward_full(frame, plan, model, with_rgb=False)
    p_hat = _standardize_rows_np(pred.data.astype(np.float64))

    grid = model.grid
    target = patchify(frame.depth, grid).astype(np.float64)
    vrows = patchify(valid.astype(np.float32), grid) > 0.5
    _, mu, sd = _standardize_target(target, vrows, TARGET_EPS)

    visible = np.zeros(grid.n, dtype=bool)
    visible[plan.depth_kept] = True
    visible &= vrows.any(axis=1)
    if visible.any():
        vis_pixels = target[visible][vrows[visible]]
    else:
        vis_pixels = target[vrows]
    g_mu = vis_pixels.mean()
    g_sd = math.sqrt(vis_pixels.var() + TARGET_EPS)

    mu_col = np.where(visible[:, None], mu, g_mu)
    sd_col = np.where(visible[:, None], sd, g_sd)
    depth_rows = np.maximum(p_hat * sd_col + mu_col, 0.0)
    return unpatchify(depth_rows.astype(np.float32), grid)


def _standardize_rows_np(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = np.sqrt(x.var(axis=1, keepdims=True) + TARGET_EPS)
    return (x - mu) / sd
