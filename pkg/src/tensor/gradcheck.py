"""
Central finite-difference oracle for autodiff gradients
"""
import logging
from typing import Callable, Dict, Sequence

import numpy as np

from src.tensor.autograd import Tensor, backward, no_grad, zero_grad

logger = logging.getLogger(__name__)


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Perturb `tensor` in place, one element at a time"""
    if tensor.dtype != np.float64:
        raise TypeError(f"finite differences need float64 inputs, got {tensor.dtype}")
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)"""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def gradcheck_report(
    fn: Callable[[], Tensor],
    inputs: Dict[str, Tensor],
    h: float = 1e-5,
) -> Dict[str, float]:
    """Relative error per named input"""
    zero_grad(inputs.values())
    backward(fn())
    report = {}
    for name, tensor in inputs.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        report[name] = relative_error(analytic, numerical_grad(fn, tensor, h))
    zero_grad(inputs.values())
    worst = max(report, key=report.get) if report else None
    if worst is not None:
        logger.debug(f"gradcheck worst input {worst}: {report[worst]:.3e}")
    return report


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over all inputs"""
    named = {str(i): t for i, t in enumerate(inputs)}
    report = gradcheck_report(fn, named, h)
    return max(report.values()) if report else 0.0
