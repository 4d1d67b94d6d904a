"""
Full-scene prediction by sliding co-centered window pairs.

Tile logits are summed into a float64 buffer with a coverage count and
averaged; padded tile pixels never contribute.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.data.windowing import Scene, extract_pair
from src.errors import GeometryError
from src.models.schemas import RelayVariant
from src.relay.engine import forward_variant, local_resolution_logits
from src.tensor import Tensor, no_grad
from src.vit.params import ParamStore

logger = logging.getLogger(__name__)


def tile_positions(length: int, s: int, stride: int) -> List[int]:
    if length <= s:
        return [0]
    positions = list(range(0, length - s + 1, stride))
    if positions[-1] != length - s:
        positions.append(length - s)
    return positions


@dataclass
class StitchPlan:
    height: int
    width: int
    s: int
    overlap: float
    tiles: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def centers(self) -> List[Tuple[int, int]]:
        half = self.s // 2
        return [(top + half, left + half) for top, left in self.tiles]


def plan_tiles(height: int, width: int, s: int, overlap: float = 0.0) -> StitchPlan:
    if not 0.0 <= overlap < 1.0:
        raise GeometryError(f"overlap must lie in [0, 1), got {overlap}")
    stride = max(1, int(round(s * (1.0 - overlap))))
    tiles = [
        (top, left)
        for top in tile_positions(height, s, stride)
        for left in tile_positions(width, s, stride)
    ]
    return StitchPlan(height=height, width=width, s=s, overlap=overlap, tiles=tiles)


def stitch_logits(
    scene: Scene,
    params: ParamStore,
    variant: RelayVariant,
    overlap: float = 0.0,
    tile_batch: int = 8,
) -> np.ndarray:
    """coverage-averaged logits [K, H, W]"""
    cfg = params.cfg
    s, g = cfg.local_size, cfg.down_factor
    plan = plan_tiles(scene.height, scene.width, s, overlap)
    K = cfg.num_classes
    total = np.zeros((K, scene.height, scene.width), dtype=np.float64)
    count = np.zeros((scene.height, scene.width), dtype=np.int64)

    for start in range(0, len(plan.tiles), tile_batch):
        chunk = plan.centers[start:start + tile_batch]
        pairs = [extract_pair(scene, c, s, g) for c in chunk]
        x_loc = Tensor(np.stack([p.x_loc for p in pairs]), dtype=cfg.dtype)
        x_glob = Tensor(np.stack([p.x_glob for p in pairs]), dtype=cfg.dtype) if variant.uses_global else None
        with no_grad():
            out = forward_variant(variant, x_loc, x_glob, params)
            logits = local_resolution_logits(out, g).data
        for pair, tile_logits in zip(pairs, logits):
            _accumulate(total, count, tile_logits, pair.center, s, pair.pad_mask_loc)

    if (count == 0).any():
        raise GeometryError("stitch plan left pixels uncovered")
    logger.debug(f"{scene.name}: stitched {len(plan.tiles)} tiles (overlap {overlap})")
    return total / count


def _accumulate(total, count, tile_logits, center, s, pad_mask):
    H, W = count.shape
    top, left = center[0] - s // 2, center[1] - s // 2
    r0, c0 = max(0, top), max(0, left)
    r1, c1 = min(H, top + s), min(W, left + s)
    tr, tc = slice(r0 - top, r1 - top), slice(c0 - left, c1 - left)
    keep = ~pad_mask[tr, tc]
    total[:, r0:r1, c0:c1] += tile_logits[:, tr, tc] * keep
    count[r0:r1, c0:c1] += keep


def sliding_infer(
    scene: Scene,
    params: ParamStore,
    variant: RelayVariant,
    overlap: float = 0.0,
    tile_batch: int = 8,
) -> np.ndarray:
    """argmax label map [H, W] (uint8)"""
    logits = stitch_logits(scene, params, variant, overlap, tile_batch)
    return np.argmax(logits, axis=0).astype(np.uint8)
