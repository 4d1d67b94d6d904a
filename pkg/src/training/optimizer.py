"""
AdamW with decoupled weight decay, linear warmup and plateau reduction.

The update at optimizer step t (1-based) uses lr = lr_schedule(t - 1):
    p <- p * (1 - lr * wd)
    m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
"""
import logging

import numpy as np

from src.errors import GradientStateError
from src.models.schemas import OptimConfig
from src.models.state import TrainState
from src.vit.params import ParamStore

logger = logging.getLogger(__name__)


def lr_schedule(step: int, state: TrainState, cfg: OptimConfig) -> float:
    """linear 0 -> lr0 over the warmup steps, then lr0 * factor^reductions"""
    warmup = cfg.warmup_steps
    if warmup and step < warmup:
        return cfg.lr0 * step / warmup
    return cfg.lr0 * cfg.plateau_factor ** state.reductions


def record_validation(state: TrainState, miou: float, cfg: OptimConfig) -> bool:
    """
    Feed one validation mIoU to the plateau rule; True when it is a new best.
    Non-improving evaluations inside warmup are not counted.
    """
    state.evaluations += 1
    if miou > state.best_miou:
        state.best_miou = miou
        state.evals_since_improvement = 0
        return True
    if state.step < cfg.warmup_steps:
        return False
    state.evals_since_improvement += 1
    if state.evals_since_improvement > cfg.plateau_patience:
        state.reductions += 1
        state.evals_since_improvement = 0
        logger.info(
            f"Validation plateau: lr reduced to {cfg.lr0 * cfg.plateau_factor ** state.reductions:.3e} "
            f"(reduction {state.reductions})"
        )
    return False


def optimizer_step(params: ParamStore, state: TrainState, cfg: OptimConfig) -> float:
    """
    apply one update from the populated .grad buffers; returns the lr used

    A parameter the loss never reached (a projector under a zero loss
    weight, say) takes a zero gradient. No gradient at all means backward()
    never ran.
    """
    if not any(p.grad is not None for p in params.values() if p.size):
        raise GradientStateError("no parameter holds a gradient; run backward() first")
    lr = lr_schedule(state.step, state, cfg)
    t = state.step + 1
    b1, b2 = cfg.betas
    unreached = []
    for name, p in params.items():
        if p.size == 0:
            continue
        if p.grad is None:
            unreached.append(name)
            grad = np.zeros_like(p.data)
        else:
            grad = p.grad.astype(p.dtype, copy=False)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        data = p.data
        if cfg.weight_decay:
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = np.ascontiguousarray(data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps), dtype=p.dtype)
        state.first_moment[name] = m
        state.second_moment[name] = v
    if unreached and t == 1:
        logger.info("%d parameters not reached by the loss: %s", len(unreached), ", ".join(unreached))
    state.step = t
    state.lr = lr
    return lr
