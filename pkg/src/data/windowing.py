"""
Scene storage and paired local/global window sampling.

A pair shares one center pixel (r, c): the local window covers rows
r - s/2 .. r + s/2 - 1, the global window rows r - g*s/2 .. r + g*s/2 - 1
before being box-downsampled by g. Scaling and rotation move the sampling
grid about the continuous pivot (r - 0.5, c - 0.5) so both windows stay
co-centered. Out-of-scene samples take the channel mean (images) or IGNORE
(labels).
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import DimensionError, GeometryError
from src.models.schemas import IGNORE, SamplerConfig

logger = logging.getLogger(__name__)

# sub-stream tags under (seed, index)
_CENTER, _PICK, _AUG = 0, 1, 2

_reads_lock = threading.Lock()
_global_reads = 0


def global_access_count() -> int:
    """number of global-window reads since the last reset"""
    return _global_reads


def reset_global_access_count():
    global _global_reads
    with _reads_lock:
        _global_reads = 0


def _note_global_read():
    global _global_reads
    with _reads_lock:
        _global_reads += 1


def stream(seed: int, index: int, tag: int, attempt: int = 0) -> np.random.Generator:
    """independent generator for one (seed, index) draw"""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index, tag, attempt])


@dataclass(eq=False)
class Scene:
    image: np.ndarray
    labels: np.ndarray
    name: str = "scene"
    channel_means: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.image = np.array(self.image, dtype=np.float32, copy=True)
        self.labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if self.image.ndim != 3 or self.image.shape[1:] != self.labels.shape:
            raise DimensionError(f"scene image {self.image.shape} does not match labels {self.labels.shape}")
        self.channel_means = self.image.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
        for array in (self.image, self.labels, self.channel_means):
            array.setflags(write=False)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(eq=False)
class WindowPair:
    """
    Co-centered local/global windows. The global window is materialised on
    first access to x_glob and every access is counted.
    """

    center: Tuple[int, int]
    x_loc: np.ndarray
    y_loc: np.ndarray
    pad_mask_loc: np.ndarray
    global_loader: Callable[[], Tuple[np.ndarray, np.ndarray]] = field(repr=False)
    index: int = -1
    scale: float = 1.0
    angle_deg: float = 0.0
    scene: Optional[Scene] = field(default=None, repr=False)
    _glob: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, init=False, repr=False)

    def _global(self) -> Tuple[np.ndarray, np.ndarray]:
        _note_global_read()
        if self._glob is None:
            self._glob = self.global_loader()
        return self._glob

    @property
    def x_glob(self) -> np.ndarray:
        return self._global()[0]

    @property
    def pad_mask_glob(self) -> np.ndarray:
        return self._global()[1]


@dataclass
class Rejected:
    center: Tuple[int, int]
    oob_fraction: float
    index: int = -1


def source_coords(center: Tuple[int, int], extent: int, scale: float = 1.0, angle_deg: float = 0.0):
    """scene row/col index of every output pixel of an extent x extent window"""
    r, c = center
    d = np.arange(extent, dtype=np.float64) - extent / 2.0 + 0.5
    dy, dx = np.meshgrid(d, d, indexing="ij")
    if angle_deg:
        theta = np.deg2rad(angle_deg)
        cos, sin = np.cos(theta), np.sin(theta)
        dy, dx = cos * dy - sin * dx, sin * dy + cos * dx
    if scale != 1.0:
        dy, dx = dy / scale, dx / scale
    return (r - 0.5) + dy, (c - 0.5) + dx


def _bilinear(scene: Scene, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    image, means = scene.image, scene.channel_means
    _, H, W = image.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy, wx = sy - y0, sx - x0
    out = np.zeros((image.shape[0],) + sy.shape, dtype=np.float64)
    for oy, ox, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        values = image[:, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        values = np.where(inside, values, means[:, None, None])
        out += weight * values
    return out.astype(np.float32)


def _nearest(scene: Scene, sy: np.ndarray, sx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    H, W = scene.labels.shape
    yi = np.floor(sy + 0.5).astype(np.int64)
    xi = np.floor(sx + 0.5).astype(np.int64)
    inside = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
    labels = scene.labels[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
    return np.where(inside, labels, IGNORE).astype(np.uint8), ~inside


def extract_window(scene: Scene, center, extent: int, scale: float = 1.0, angle_deg: float = 0.0):
    """(image [C, n, n], labels [n, n], pad_mask [n, n]) for an n = extent window"""
    sy, sx = source_coords(center, extent, scale, angle_deg)
    labels, pad = _nearest(scene, sy, sx)
    return _bilinear(scene, sy, sx), labels, pad


def downsample_box(image: np.ndarray, g: int) -> np.ndarray:
    """g x g box average over the last two axes"""
    image = np.asarray(image)
    H, W = image.shape[-2:]
    if H % g or W % g:
        raise GeometryError(f"cannot box-downsample {H}x{W} by {g}")
    if g == 1:
        return image.copy()
    lead = image.shape[:-2]
    blocks = image.reshape(lead + (H // g, g, W // g, g)).astype(np.float64)
    return blocks.mean(axis=(-3, -1)).astype(image.dtype)


def extract_pair(
    scene: Scene,
    center: Tuple[int, int],
    s: int,
    g: int,
    scale: float = 1.0,
    angle_deg: float = 0.0,
    index: int = -1,
) -> WindowPair:
    """deterministic pair at `center`, no validity test"""
    if s % 2:
        raise GeometryError(f"window size {s} must be even")
    center = (int(center[0]), int(center[1]))
    x_loc, y_loc, pad_loc = extract_window(scene, center, s, scale, angle_deg)

    def load_global():
        x_big, _, pad_big = extract_window(scene, center, g * s, scale, angle_deg)
        pad = downsample_box(pad_big.astype(np.float32), g) > 0
        return downsample_box(x_big, g), pad

    return WindowPair(
        center=center, x_loc=x_loc, y_loc=y_loc, pad_mask_loc=pad_loc,
        global_loader=load_global, index=index, scale=scale, angle_deg=angle_deg, scene=scene,
    )


def oob_fraction(scene: Scene, center: Tuple[int, int], s: int) -> float:
    """share of the un-augmented local window lying outside the scene"""
    r, c = center
    half = s // 2
    rows = max(0, min(scene.height, r + half) - max(0, r - half))
    cols = max(0, min(scene.width, c + half) - max(0, c - half))
    return 1.0 - (rows * cols) / float(s * s)


def sample_pair(scene: Scene, cfg: SamplerConfig, index: int, attempt: int = 0) -> Union[WindowPair, Rejected]:
    """uniform center; rejected when more than oob_reject_fraction of the local window is off-scene"""
    rng = stream(cfg.seed, index, _CENTER, attempt)
    center = (int(rng.integers(0, scene.height)), int(rng.integers(0, scene.width)))
    frac = oob_fraction(scene, center, cfg.s)
    if frac > cfg.oob_reject_fraction:
        return Rejected(center=center, oob_fraction=frac, index=index)
    return extract_pair(scene, center, cfg.s, cfg.g, index=index)


def augment(pair: WindowPair, cfg: SamplerConfig, rng: np.random.Generator) -> WindowPair:
    """scale then rotate the sampling grid about the shared center"""
    if pair.scene is None:
        raise GeometryError("augment needs the source scene of the pair")
    # always four draws so the stream layout never depends on the outcome
    do_scale, scale_u, do_rot, rot_u = rng.random(4)
    lo, hi = cfg.scale_range
    scale = lo + (hi - lo) * scale_u if do_scale < cfg.aug_prob else 1.0
    lo, hi = cfg.rotation_range_deg
    angle = lo + (hi - lo) * rot_u if do_rot < cfg.aug_prob else 0.0
    if scale == 1.0 and angle == 0.0:
        return pair
    return extract_pair(pair.scene, pair.center, cfg.s, cfg.g, scale, angle, index=pair.index)


def draw_pair(scene: Scene, cfg: SamplerConfig, index: int) -> WindowPair:
    """training entry point: resample rejected centers, then augment"""
    for attempt in range(cfg.max_attempts):
        result = sample_pair(scene, cfg, index, attempt)
        if isinstance(result, Rejected):
            continue
        if attempt:
            logger.debug(f"pair {index} accepted after {attempt} rejections")
        if cfg.augment:
            result = augment(result, cfg, stream(cfg.seed, index, _AUG, attempt))
        return result
    logger.warning(f"pair {index}: {cfg.max_attempts} centers rejected in scene {scene.name}")
    raise GeometryError(f"no valid window center in {scene.name} after {cfg.max_attempts} attempts")


def sample_batch(
    scenes: Sequence[Scene], cfg: SamplerConfig, step: int, batch: int, threads: int = 1
) -> List[WindowPair]:
    """pairs step*batch .. step*batch + batch - 1, in index order for any thread count"""
    if not scenes:
        raise GeometryError("no scenes to sample from")

    def one(j: int) -> WindowPair:
        index = step * batch + j
        pick = int(stream(cfg.seed, index, _PICK).integers(len(scenes)))
        return draw_pair(scenes[pick], cfg, index)

    if threads <= 1:
        return [one(j) for j in range(batch)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(batch)))


def stack_pairs(pairs: Sequence[WindowPair], with_global: bool):
    """(x_loc [B,C,s,s], x_glob [B,C,s,s] or None, y_loc [B,s,s])"""
    x_loc = np.stack([p.x_loc for p in pairs])
    y_loc = np.stack([p.y_loc for p in pairs])
    x_glob = np.stack([p.x_glob for p in pairs]) if with_global else None
    return x_loc, x_glob, y_loc
