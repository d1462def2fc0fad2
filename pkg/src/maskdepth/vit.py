"""Transformer building blocks for the dual-encoder/decoder stacks.

Pre-norm blocks (LN -> multi-head self-attention -> residual, then
LN -> gelu MLP -> residual), shared by the color encoder, the shallower
depth encoder, and the dense depth decoder. No class token: every token
is a patch token, since the objective is dense prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters for both encoders and the decoder.

    The default is the desk-scale configuration (48x64 images, 8px
    patches, 64-wide tokens) that trains on a CPU in minutes; the
    240x320/patch-16 grid with ViT-B-like widths is just a different set
    of values here.
    """

    token_dim: int = 64
    n_heads: int = 4
    n_layers_color: int = 4
    n_layers_depth: int = 2
    n_layers_decoder: int = 2
    mlp_ratio: int = 4
    patch: int = 8

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}")
        for name in ("n_layers_color", "n_layers_depth", "n_layers_decoder"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.token_dim % 4:
            raise ValueError("token_dim must be divisible by 4 (2-D position code)")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return self.token_dim * self.mlp_ratio


@dataclass
class Linear:
    w: Tensor  # [d_in, d_out]
    b: Tensor  # [d_out]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.w), self.b)

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    ln2_g: Tensor
    ln2_b: Tensor
    fc1: Linear
    fc2: Linear

    def tensors(self) -> list[Tensor]:
        out = [self.ln1_g, self.ln1_b]
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out.extend(lin.tensors())
        out.extend([self.ln2_g, self.ln2_b])
        out.extend(self.fc1.tensors())
        out.extend(self.fc2.tensors())
        return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (timm-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> Linear:
    return Linear(
        w=Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True),
        b=Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
    )


def init_block(rng: np.random.Generator, cfg: ViTConfig, dtype=np.float32) -> BlockParams:
    d = cfg.token_dim
    ones = lambda: Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return BlockParams(
        ln1_g=ones(), ln1_b=zeros(),
        wq=init_linear(rng, d, d, dtype), wk=init_linear(rng, d, d, dtype),
        wv=init_linear(rng, d, d, dtype), wo=init_linear(rng, d, d, dtype),
        ln2_g=ones(), ln2_b=zeros(),
        fc1=init_linear(rng, d, cfg.mlp_dim, dtype),
        fc2=init_linear(rng, cfg.mlp_dim, d, dtype),
    )


def project_tokens(patches: Tensor, proj: Linear, pos: Tensor) -> Tensor:
    """Lift patch rows to token width and add their position codes."""
    if patches.shape[0] != pos.shape[0]:
        raise T.ShapeError(f"project_tokens: {patches.shape[0]} patches vs {pos.shape[0]} position rows")
    return T.add(proj(patches), pos)


def transformer_block(tokens: Tensor, p: BlockParams, n_heads: int) -> Tensor:
    """Pre-norm self-attention + MLP with residuals; [k, d] -> [k, d]."""
    d = tokens.shape[1]
    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    h = T.layer_norm(tokens, p.ln1_g, p.ln1_b)
    q, k, v = p.wq(h), p.wk(h), p.wv(h)
    heads = []
    for i in range(n_heads):
        qi = T.slice_cols(q, i * dh, (i + 1) * dh)
        ki = T.slice_cols(k, i * dh, (i + 1) * dh)
        vi = T.slice_cols(v, i * dh, (i + 1) * dh)
        att = T.softmax(T.scale(T.matmul(qi, T.transpose(ki)), inv_sqrt))
        heads.append(T.matmul(att, vi))
    x = T.add(tokens, p.wo(T.concat_cols(heads)))

    h2 = T.layer_norm(x, p.ln2_g, p.ln2_b)
    return T.add(x, p.fc2(T.gelu(p.fc1(h2))))


def block_param_count(cfg: ViTConfig) -> int:
    """Trainable scalars in one block: 4 attention projections, 2 MLP
    layers, 2 layer norms."""
    d, m = cfg.token_dim, cfg.mlp_dim
    return 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d
