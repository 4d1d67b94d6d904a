"""
Where relay tokens look: relay-query attention over patch keys, averaged
over heads, blocks and images, per scale.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from src.data.raster import write_pgm
from src.data.windowing import WindowPair
from src.errors import VariantError
from src.models.schemas import RelayVariant
from src.models.state import ForwardTrace
from src.relay.engine import forward_variant
from src.tensor import Tensor, no_grad
from src.vit.params import ParamStore

logger = logging.getLogger(__name__)


@dataclass
class AttnMap:
    relay: int
    local_map: np.ndarray  # attention of step (ii), [grid, grid], sums to 1
    global_map: np.ndarray  # attention of step (i)


def _relay_rows(records: List[np.ndarray], R: int, grid: int) -> np.ndarray:
    """[R, grid, grid] mean of relay-query rows over patch keys"""
    stacked = np.stack(records)  # [blocks, batch, heads, R+N, R+N]
    rows = stacked[:, :, :, :R, R:]
    mean = rows.mean(axis=(0, 1, 2), dtype=np.float64)
    mean = mean / mean.sum(axis=-1, keepdims=True)
    return mean.reshape(R, grid, grid)


def extract_attention(params: ParamStore, pairs: Sequence[WindowPair]) -> List[AttnMap]:
    variant: RelayVariant = params.variant
    cfg = params.cfg
    if not variant.uses_relays or cfg.relay_count == 0:
        raise VariantError(f"{variant} with R={cfg.relay_count} has no relay attention to extract")
    if not pairs:
        raise VariantError("attention extraction needs at least one window pair")

    trace = ForwardTrace()
    x_loc = Tensor(np.stack([p.x_loc for p in pairs]), dtype=cfg.dtype)
    x_glob = Tensor(np.stack([p.x_glob for p in pairs]), dtype=cfg.dtype)
    with no_grad():
        forward_variant(variant, x_loc, x_glob, params, trace=trace)

    R, grid = cfg.relay_count, cfg.grid
    local = _relay_rows(trace.attn_local, R, grid)
    glob = _relay_rows(trace.attn_global, R, grid)
    logger.info(f"Extracted relay attention over {len(pairs)} pairs and {len(trace.attn_local)} blocks")
    return [AttnMap(relay=r, local_map=local[r], global_map=glob[r]) for r in range(R)]


def heat_raster(attn: np.ndarray, patch: int) -> np.ndarray:
    peak = float(attn.max())
    scaled = np.zeros_like(attn) if peak <= 0 else attn / peak
    grey = np.rint(scaled * 255.0).astype(np.uint8)
    return np.kron(grey, np.ones((patch, patch), dtype=np.uint8))


def write_attention(maps: Sequence[AttnMap], out_dir: Path, patch: int) -> Path:
    """relay<r>_<scale>.pgm heat rasters and attention.csv with raw values"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in maps:
        for scale, step, attn in (("global", "i", m.global_map), ("local", "ii", m.local_map)):
            write_pgm(out_dir / f"relay{m.relay}_{scale}.pgm", heat_raster(attn, patch))
            for (r, c), value in np.ndenumerate(attn):
                rows.append([m.relay, scale, r, c, f"{value:.8e}", step])
    path = out_dir / "attention.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["relay", "scale", "row", "col", "value", "step"])
        writer.writerows(rows)
    logger.info(f"Wrote {2 * len(maps)} attention rasters to {out_dir}")
    return path
