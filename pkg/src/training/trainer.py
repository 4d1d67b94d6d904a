"""
Optimisation loop: seeded batch sampling, forward, combined loss, AdamW,
periodic sliding-window validation and checkpoints.
"""
import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.cli.checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from src.cli.config import config_hash, flatten_config
from src.data.synth import load_scene_set
from src.data.windowing import Scene, WindowPair, sample_batch, stack_pairs
from src.inference.metrics import SegMetrics, accumulate_metrics, compute_miou
from src.inference.sliding import sliding_infer
from src.losses.objectives import combined
from src.models.schemas import RelayVariant, RunConfig
from src.models.state import LossBreakdown, TrainState
from src.relay.engine import forward_variant
from src.tensor import Tensor, backward, zero_grad
from src.training.optimizer import optimizer_step, record_validation
from src.vit.params import ParamStore, build_params

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "L_loc", "L_glo", "L_con", "val_miou"]
MOMENT_PREFIXES = ("optim.m.", "optim.v.")


@dataclass
class TrainResult:
    params: ParamStore
    state: TrainState
    run_dir: Path
    history: List[Dict[str, str]] = field(default_factory=list)


def batch_inputs(
    pairs: Sequence[WindowPair], variant: RelayVariant, dtype: str
) -> Tuple[Tensor, Optional[Tensor], np.ndarray]:
    x_loc, x_glob, y_loc = stack_pairs(pairs, variant.uses_global)
    glob = Tensor(x_glob, dtype=dtype) if x_glob is not None else None
    return Tensor(x_loc, dtype=dtype), glob, y_loc


def train_step(
    params: ParamStore, pairs: Sequence[WindowPair], cfg: RunConfig, state: TrainState
) -> Tuple[LossBreakdown, float]:
    x_loc, x_glob, y_loc = batch_inputs(pairs, cfg.variant, cfg.vit.dtype)
    zero_grad(params.values())
    out = forward_variant(cfg.variant, x_loc, x_glob, params)
    loss = combined(out.z_loc, out.z_glob, y_loc, cfg.loss, cfg.vit.down_factor)
    backward(loss.total)
    lr = optimizer_step(params, state, cfg.optim)
    return loss, lr


def evaluate(params: ParamStore, scenes: Sequence[Scene], variant: RelayVariant, overlap: float = 0.0) -> SegMetrics:
    K = params.cfg.num_classes
    return accumulate_metrics(
        compute_miou(sliding_infer(scene, params, variant, overlap), scene.labels, K) for scene in scenes
    )


def make_checkpoint(params: ParamStore, state: TrainState, cfg: RunConfig) -> Checkpoint:
    meta = OrderedDict()
    meta["config_hash"] = config_hash(cfg)
    meta["variant"] = str(cfg.variant)
    meta.update(state.scalars())
    for key, value in flatten_config(cfg).items():
        meta[f"config.{key}"] = value
    tensors = OrderedDict((name, t.data) for name, t in params.items())
    for name in params.names():
        if name in state.first_moment:
            tensors[f"optim.m.{name}"] = state.first_moment[name]
            tensors[f"optim.v.{name}"] = state.second_moment[name]
    return Checkpoint(meta=meta, tensors=tensors)


def restore(ckpt: Checkpoint, cfg: RunConfig) -> Tuple[ParamStore, TrainState]:
    check_compatible(ckpt, config_hash(cfg))
    params = build_params(cfg.vit, cfg.variant, cfg.seed)
    weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith(MOMENT_PREFIXES)}
    params.load_arrays(weights)
    state = TrainState.from_scalars(ckpt.meta) if "state.step" in ckpt.meta else TrainState()
    for name, array in ckpt.tensors.items():
        if name.startswith("optim.m."):
            state.first_moment[name[len("optim.m."):]] = array.copy()
        elif name.startswith("optim.v."):
            state.second_moment[name[len("optim.v."):]] = array.copy()
    return params, state


def load_params(path: Path, cfg: RunConfig) -> ParamStore:
    params, _ = restore(load_checkpoint(path), cfg)
    return params


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def train(
    cfg: RunConfig,
    run_dir: Path,
    stop_at: Optional[int] = None,
    resume: Optional[Path] = None,
    threads: int = 1,
    train_scenes: Optional[Sequence[Scene]] = None,
    val_scenes: Optional[Sequence[Scene]] = None,
) -> TrainResult:
    """
    Run optimizer steps state.step .. min(stop_at, steps_total) - 1.

    Batch j of step t holds pairs t*batch .. t*batch + batch - 1, so a run
    resumed from a checkpoint continues the uninterrupted stream exactly.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    optim = cfg.optim
    if train_scenes is None:
        train_scenes = load_scene_set(Path(cfg.paths.data), "train")
    if val_scenes is None:
        val_scenes = load_scene_set(Path(cfg.paths.data), "val")

    if resume is not None:
        params, state = restore(load_checkpoint(resume), cfg)
        logger.info(f"Resuming {cfg.variant} at step {state.step}")
    else:
        params, state = build_params(cfg.vit, cfg.variant, cfg.seed), TrainState()

    end = optim.steps_total if stop_at is None else min(stop_at, optim.steps_total)
    metrics_path = run_dir / "metrics.csv"
    fresh = resume is None or not metrics_path.exists()
    result = TrainResult(params=params, state=state, run_dir=run_dir)

    with open(metrics_path, "w" if fresh else "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        if fresh:
            writer.writeheader()
        while state.step < end:
            step = state.step
            pairs = sample_batch(train_scenes, cfg.sampler, step, optim.batch, threads)
            loss, lr = train_step(params, pairs, cfg, state)

            val_miou = None
            if val_scenes and (state.step % optim.eval_every == 0 or state.step == optim.steps_total):
                val_miou = evaluate(params, val_scenes, cfg.variant, cfg.overlap).miou
                if record_validation(state, val_miou, optim):
                    save_checkpoint(ckpt_dir / "best.rlyt", make_checkpoint(params, state, cfg))
                logger.info(f"step {state.step}: val mIoU {val_miou:.4f} (best {state.best_miou:.4f})")
                save_checkpoint(ckpt_dir / "last.rlyt", make_checkpoint(params, state, cfg))

            row = {"step": str(state.step), "lr": _fmt(lr), "val_miou": _fmt(val_miou)}
            row.update({k: _fmt(v) for k, v in loss.as_row().items()})
            writer.writerow(row)
            f.flush()
            result.history.append(row)
            if state.step % optim.log_every == 0 or state.step == end:
                logger.info(
                    f"step {state.step}/{optim.steps_total} lr={lr:.3e} "
                    f"L_loc={loss.local:.4f} L_glo={loss.global_:.4f} L_con={loss.consistency:.4f}"
                )

    save_checkpoint(ckpt_dir / "last.rlyt", make_checkpoint(params, state, cfg))
    return result
