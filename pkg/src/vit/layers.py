"""
ViT building blocks: patch tokenisation, positional table, pre-norm
transformer block and the per-patch segmentation head.

All token tensors are batched [batch, tokens, width]; unbatched [tokens, width]
inputs are accepted by transformer_block and returned unbatched.
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from src.errors import DimensionError
from src.models.schemas import ViTConfig
from src.tensor import Tensor, ops
from src.vit.params import BlockWeights, ParamStore


@dataclass
class TokenSeq:
    tokens: Tensor
    grid: Optional[Tuple[int, int]] = None

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]


def patchify(image: Tensor, patch: int) -> TokenSeq:
    """[..., C, H, W] -> [..., (H/P)(W/P), C*P*P], channel-major within a patch"""
    if image.ndim < 3:
        raise DimensionError(f"patchify expects [..., C, H, W], got {image.shape}")
    *lead, C, H, W = image.shape
    if H % patch or W % patch:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {patch}")
    hp, wp = H // patch, W // patch
    lead = tuple(lead)
    k = len(lead)
    x = ops.reshape(image, lead + (C, hp, patch, wp, patch))
    x = ops.permute(x, tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
    x = ops.reshape(x, lead + (hp * wp, C * patch * patch))
    return TokenSeq(x, (hp, wp))


def unpatchify(tokens: Tensor, patch: int, height: int, width: int) -> Tensor:
    """inverse of patchify: [..., N, C*P*P] -> [..., C, H, W]"""
    *lead, N, F = tokens.shape
    hp, wp = height // patch, width // patch
    if hp * patch != height or wp * patch != width or hp * wp != N or F % (patch * patch):
        raise DimensionError(
            f"cannot fold {tokens.shape} into {height}x{width} with patch size {patch}"
        )
    C = F // (patch * patch)
    lead = tuple(lead)
    k = len(lead)
    x = ops.reshape(tokens, lead + (hp, wp, C, patch, patch))
    x = ops.permute(x, tuple(range(k)) + (k + 2, k, k + 3, k + 1, k + 4))
    return ops.reshape(x, lead + (C, height, width))


@lru_cache(maxsize=32)
def _sincos_table(rows: int, cols: int, width: int) -> np.ndarray:
    quarter = width // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    r = np.repeat(np.arange(rows, dtype=np.float64), cols)
    c = np.tile(np.arange(cols, dtype=np.float64), rows)
    ang_r = r[:, None] * omega[None, :]
    ang_c = c[:, None] * omega[None, :]
    table = np.concatenate([np.sin(ang_r), np.cos(ang_r), np.sin(ang_c), np.cos(ang_c)], axis=1)
    table.setflags(write=False)
    return table


def positional_table(grid: Tuple[int, int], width: int, dtype: str = "float32") -> Tensor:
    """fixed 2D sinusoidal embedding, row-major over the patch grid"""
    if width % 4:
        raise DimensionError(f"sinusoidal table needs width divisible by 4, got {width}")
    rows, cols = grid
    return Tensor(_sincos_table(int(rows), int(cols), int(width)), dtype=dtype)


def embed(raw: TokenSeq, params: ParamStore, scale: str) -> TokenSeq:
    """linear patch projection for `scale` plus the positional table"""
    cfg = params.cfg
    weight, bias = params.projector(scale)
    x = ops.linear(raw.tokens, weight, bias)
    pos = positional_table(raw.grid, cfg.width, cfg.dtype)
    return TokenSeq(x + pos, raw.grid)


def _heads_split(x: Tensor, heads: int) -> Tensor:
    Bt, N, D = x.shape
    return ops.permute(ops.reshape(x, (Bt, N, heads, D // heads)), (0, 2, 1, 3))


def attention(h: Tensor, w: BlockWeights, heads: int, record: Optional[List[np.ndarray]] = None) -> Tensor:
    Bt, N, D = h.shape
    dh = D // heads
    q = _heads_split(ops.linear(h, w.q_w, w.q_b), heads)
    k = _heads_split(ops.linear(h, w.k_w, w.k_b), heads)
    v = _heads_split(ops.linear(h, w.v_w, w.v_b), heads)
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ops.softmax(scores, axis=-1)
    if record is not None:
        record.append(probs.data.copy())
    ctx = ops.permute(ops.matmul(probs, v), (0, 2, 1, 3))
    return ops.linear(ops.reshape(ctx, (Bt, N, D)), w.o_w, w.o_b)


def transformer_block(
    x: Tensor, w: BlockWeights, cfg: ViTConfig, record: Optional[List[np.ndarray]] = None
) -> Tensor:
    """pre-norm MHSA + GELU MLP, both residual; token count is preserved"""
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.width:
        raise DimensionError(f"transformer_block expects [batch, tokens, {cfg.width}], got {x.shape}")
    h = ops.layer_norm(x, w.norm1_gain, w.norm1_bias, cfg.ln_eps)
    x = x + attention(h, w, cfg.heads, record)
    h = ops.layer_norm(x, w.norm2_gain, w.norm2_bias, cfg.ln_eps)
    x = x + ops.linear(ops.gelu(ops.linear(h, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b)
    if squeeze:
        x = ops.reshape(x, x.shape[1:])
    return x


def seg_head(x: Tensor, params: ParamStore, grid: Tuple[int, int]) -> Tensor:
    """per-patch logits folded back to [..., K, H, W]"""
    cfg = params.cfg
    if x.shape[-2] != grid[0] * grid[1]:
        raise DimensionError(f"seg_head got {x.shape[-2]} tokens for a {grid[0]}x{grid[1]} grid")
    out = ops.linear(x, params["head.weight"], params["head.bias"])
    P = cfg.patch_size
    return unpatchify(out, P, grid[0] * P, grid[1] * P)
