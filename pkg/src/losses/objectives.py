"""
Training objective: local cross-entropy, cropped global supervision against
pooled label distributions, and cross-scale consistency.

Cross-entropy is the usual negative log-likelihood of softmax(logits); the
class axis is -3 on every logits tensor ([..., K, H, W]).
"""
import logging
import math
import threading
from typing import Optional, Tuple, Union

import numpy as np

from src.errors import ConfigError, DimensionError, GeometryError
from src.models.schemas import IGNORE, LossWeights
from src.models.state import LossBreakdown
from src.tensor import Tensor, ops

logger = logging.getLogger(__name__)

LOG_FLOOR = math.log(1e-12)

_empty_lock = threading.Lock()
_empty_masks = 0


def xe_empty_mask_count() -> int:
    return _empty_masks


def reset_xe_empty_mask_count():
    global _empty_masks
    with _empty_lock:
        _empty_masks = 0


def _note_empty_mask():
    global _empty_masks
    with _empty_lock:
        _empty_masks += 1
    logger.warning("cross-entropy mask is empty; term contributes 0")


def xe_map(pred: Tensor, target: Union[Tensor, np.ndarray], mask: np.ndarray) -> Tensor:
    """mean over masked-in cells of -sum_k target_k * log softmax(pred)_k"""
    if not isinstance(target, Tensor):
        target = Tensor(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"xe_map: prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    cells = pred.shape[:-3] + pred.shape[-2:]
    if mask.shape != cells:
        raise DimensionError(f"xe_map: mask {mask.shape} does not cover cells {cells}")

    logp = ops.log_softmax(pred, axis=-3, floor=LOG_FLOOR)
    per_cell = ops.neg(ops.sum(logp * target, axis=-3))
    n = int(mask.sum())
    if n == 0:
        _note_empty_mask()
        return ops.sum(per_cell * Tensor(np.zeros(cells), dtype=pred.dtype))
    weights = Tensor(mask / n, dtype=pred.dtype)
    return ops.sum(per_cell * weights)


def crop_global(z_glob: Tensor, g: int) -> Tensor:
    """central (H/g) x (W/g) block of global-scale logits"""
    H, W = z_glob.shape[-2:]
    if H % g or W % g:
        raise GeometryError(f"global grid {H}x{W} not divisible by g={g}")
    h, w = H // g, W // g
    if (H - h) % 2 or (W - w) % 2:
        raise GeometryError(f"central {h}x{w} crop of {H}x{W} does not start on a whole cell")
    top, left = (H - h) // 2, (W - w) // 2
    if g == 1:
        return z_glob
    return ops.getitem(z_glob, (Ellipsis, slice(top, top + h), slice(left, left + w)))


def valid_mask(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ConfigError(
            f"label value {int(labels[bad].flat[0])} outside 0..{num_classes - 1} and not IGNORE"
        )
    return valid


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[..., H, W] -> [..., K, H, W]; IGNORE pixels are all-zero"""
    labels = np.asarray(labels)
    classes = np.arange(num_classes).reshape((num_classes, 1, 1))
    return (labels[..., None, :, :] == classes).astype(dtype)


def histo(labels: np.ndarray, k: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class distribution of each k x k block over its non-IGNORE pixels.

    Returns (probs [..., K, H/k, W/k], valid [..., H/k, W/k]); blocks with no
    valid pixel are zero and masked out.
    """
    labels = np.asarray(labels)
    H, W = labels.shape[-2:]
    if H % k or W % k:
        raise GeometryError(f"label map {H}x{W} not divisible by pooling factor {k}")
    valid_mask(labels, num_classes)
    hot = one_hot(labels, num_classes, np.float64)
    lead = hot.shape[:-2]
    counts = hot.reshape(lead + (H // k, k, W // k, k)).sum(axis=(-3, -1))
    total = counts.sum(axis=-3)
    valid = total > 0
    probs = np.divide(counts, total[..., None, :, :], out=np.zeros_like(counts), where=valid[..., None, :, :])
    return probs, valid


def loss_local(z_loc: Tensor, y_loc: np.ndarray) -> Tensor:
    K = z_loc.shape[-3]
    y_loc = np.asarray(y_loc)
    if y_loc.shape != z_loc.shape[:-3] + z_loc.shape[-2:]:
        raise DimensionError(f"local labels {y_loc.shape} do not match logits {z_loc.shape}")
    mask = valid_mask(y_loc, K)
    return xe_map(z_loc, one_hot(y_loc, K, z_loc.dtype), mask)


def loss_global(z_glob: Tensor, y_loc: np.ndarray, g: int, k: Optional[int] = None) -> Tensor:
    """cropped global logits against pooled local label distributions"""
    K = z_glob.shape[-3]
    cropped = crop_global(z_glob, g)
    probs, valid = histo(y_loc, k or g, K)
    if probs.shape[-2:] != cropped.shape[-2:]:
        raise GeometryError(f"cropped global grid {cropped.shape[-2:]} != pooled label grid {probs.shape[-2:]}")
    return xe_map(cropped, probs.astype(z_glob.dtype), valid)


def loss_consistency(
    z_glob: Tensor, z_loc: Tensor, g: int, k: Optional[int] = None, stop_gradient: bool = True
) -> Tensor:
    """cropped global logits against average-pooled local probabilities"""
    cropped = crop_global(z_glob, g)
    pooled = ops.avg_pool2d(ops.softmax(z_loc, axis=-3), k or g)
    if pooled.shape != cropped.shape:
        raise GeometryError(f"cropped global {cropped.shape} != pooled local {pooled.shape}")
    if stop_gradient:
        pooled = ops.stop_gradient(pooled)
    mask = np.ones(cropped.shape[:-3] + cropped.shape[-2:], dtype=bool)
    return xe_map(cropped, pooled, mask)


def combined(
    z_loc: Optional[Tensor],
    z_glob: Optional[Tensor],
    y_loc: np.ndarray,
    weights: LossWeights,
    g: int,
    k: Optional[int] = None,
) -> LossBreakdown:
    """
    w_loc L_loc + w_glo L_glo + w_con L_con; absent branches contribute 0.

    Without a local prediction (global-only model) L_glo is the whole
    objective and carries unit weight.
    """
    if z_loc is None and z_glob is None:
        raise ConfigError("combined loss needs at least one prediction")
    if z_loc is None:
        glo = loss_global(z_glob, y_loc, g, k)
        return LossBreakdown(total=glo, global_=glo.item())

    terms = []
    out = LossBreakdown(total=None)
    loc = loss_local(z_loc, y_loc)
    out.local = loc.item()
    terms.append((weights.w_loc, loc))
    if z_glob is not None:
        if weights.w_glo:
            glo = loss_global(z_glob, y_loc, g, k)
            out.global_ = glo.item()
            terms.append((weights.w_glo, glo))
        if weights.w_con:
            con = loss_consistency(z_glob, z_loc, g, k, weights.stop_gradient_consistency)
            out.consistency = con.item()
            terms.append((weights.w_con, con))

    total = None
    for w, term in terms:
        if not w:
            continue
        part = term if w == 1.0 else ops.scale(term, w)
        total = part if total is None else total + part
    out.total = total if total is not None else ops.scale(loc, 0.0)
    return out
