"""
Subcommand implementations: synth, train, eval, attn, cost.

Run directory layout:
    config.resolved.cfg, metrics.csv, checkpoints/{last,best}.rlyt,
    eval/{report.txt, per_class.csv, <scene>.pgm}, attn/..., cost/cost.csv
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional

from src.analysis.attention import extract_attention, write_attention
from src.analysis.cost import CostReport, count_flops, estimate_memory, flops_by_relay_count, write_cost_csv
from src.cli.checkpoint import check_compatible, load_checkpoint
from src.cli.config import config_hash, write_resolved
from src.data.raster import write_pgm
from src.data.synth import beacon_isolated, generate_scene_set, load_scene_set, local_only_bayes_cap
from src.data.windowing import sample_batch
from src.errors import ConfigError
from src.inference.metrics import SegMetrics, accumulate_metrics, compute_miou, write_report
from src.inference.sliding import sliding_infer
from src.models.schemas import RelayVariant, RunConfig, VariantTag
from src.training.trainer import TrainResult, restore, train

logger = logging.getLogger(__name__)

RELAY_SWEEP = (0, 1, 2, 4, 8, 16, 32)
ATTN_PAIRS = 16


def _banner(command: str, detail: str):
    logger.info("=" * 50)
    logger.info(f"COMMAND: {command} - {detail}")
    logger.info("=" * 50)


def _run_dir(cfg: RunConfig, out: Optional[Path]) -> Path:
    path = Path(out) if out is not None else Path(cfg.paths.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_params(cfg: RunConfig, checkpoint: Optional[Path], run_dir: Path):
    path = Path(checkpoint) if checkpoint is not None else run_dir / "checkpoints" / "best.rlyt"
    if not path.exists() and checkpoint is None:
        path = run_dir / "checkpoints" / "last.rlyt"
    ckpt = load_checkpoint(path)
    check_compatible(ckpt, config_hash(cfg), str(path))
    params, _ = restore(ckpt, cfg)
    return params, path


def cmd_synth(cfg: RunConfig, out: Optional[Path] = None):
    root = Path(out) if out is not None else Path(cfg.paths.data)
    _banner("SYNTH", f"context-cue scenes into {root}")
    spec = cfg.synth
    if not beacon_isolated(spec, cfg.sampler.s):
        logger.warning(
            f"beacon ring lies within one {cfg.sampler.s}px window of the texture; "
            "local windows can see the context cue"
        )
    logger.info(f"Local-only accuracy cap on beacon-dependent pixels: {local_only_bayes_cap(spec):.3f}")
    return generate_scene_set(spec, root, cfg.seed)


def cmd_train(
    cfg: RunConfig,
    out: Optional[Path] = None,
    checkpoint: Optional[Path] = None,
    steps: Optional[int] = None,
    threads: int = 1,
) -> TrainResult:
    run_dir = _run_dir(cfg, out)
    _banner("TRAIN", f"{cfg.variant} for {steps or cfg.optim.steps_total} steps into {run_dir}")
    write_resolved(cfg, run_dir / "config.resolved.cfg")
    result = train(cfg, run_dir, stop_at=steps, resume=checkpoint, threads=threads)
    logger.info(f"Training stopped at step {result.state.step}; best val mIoU {result.state.best_miou:.4f}")
    return result


def cmd_eval(
    cfg: RunConfig,
    checkpoint: Optional[Path] = None,
    out: Optional[Path] = None,
    split: str = "test",
) -> SegMetrics:
    run_dir = _run_dir(cfg, out)
    _banner("EVAL", f"{cfg.variant} on the {split} split")
    params, path = _checkpoint_params(cfg, checkpoint, run_dir)
    scenes = load_scene_set(Path(cfg.paths.data), split)
    if not scenes:
        raise ConfigError(f"no {split} scenes under {cfg.paths.data}")

    eval_dir = run_dir / "eval"
    parts: List[SegMetrics] = []
    for scene in scenes:
        pred = sliding_infer(scene, params, cfg.variant, cfg.overlap)
        write_pgm(eval_dir / f"{scene.name}.pgm", pred)
        parts.append(compute_miou(pred, scene.labels, cfg.vit.num_classes))
        logger.info(f"{scene.name}: mIoU {parts[-1].miou:.4f}")
    metrics = accumulate_metrics(parts)
    write_report(metrics, eval_dir, {
        "variant": str(cfg.variant),
        "checkpoint": str(path),
        "config_hash": config_hash(cfg),
        "split": split,
        "scenes": str(len(scenes)),
        "overlap": repr(cfg.overlap),
    })
    logger.info(f"{split} mIoU: {metrics.miou:.4f}")
    return metrics


def cmd_attn(cfg: RunConfig, checkpoint: Optional[Path] = None, out: Optional[Path] = None):
    run_dir = _run_dir(cfg, out)
    _banner("ATTN", f"relay attention maps for {cfg.variant}")
    params, _ = _checkpoint_params(cfg, checkpoint, run_dir)
    scenes = load_scene_set(Path(cfg.paths.data), "val")
    sampler = cfg.sampler.model_copy(update={"augment": False})
    pairs = sample_batch(scenes, sampler, 0, ATTN_PAIRS)
    maps = extract_attention(params, pairs)
    return write_attention(maps, run_dir / "attn", cfg.vit.patch_size)


def cmd_cost(cfg: RunConfig, out: Optional[Path] = None) -> Dict[str, CostReport]:
    run_dir = _run_dir(cfg, out)
    _banner("COST", f"analytic cost of every variant at D={cfg.vit.width}, B={cfg.vit.depth}")
    variants = [RelayVariant(tag=tag) for tag in VariantTag if tag != VariantTag.FEWER_BLOCKS]
    variants.append(RelayVariant(tag=VariantTag.FEWER_BLOCKS, keep=max(1, cfg.vit.depth // 2)))
    reports = {str(v): estimate_memory(cfg.vit, v, cfg.optim.batch) for v in variants}
    write_cost_csv(list(reports.values()), run_dir / "cost" / "cost.csv")

    sweep = flops_by_relay_count(cfg.vit, RELAY_SWEEP)
    sweep_path = run_dir / "cost" / "relay_sweep.csv"
    sweep_path.write_text("relay_count,flops_forward\n" + "".join(f"{r},{f}\n" for r, f in sweep))

    base = count_flops(cfg.vit, RelayVariant(tag=VariantTag.LOCAL_ONLY)).flops_forward
    for name, report in reports.items():
        logger.info(
            f"{name:>16}: params={report.params_total:,} flops={report.flops_forward / 1e9:.2f}G "
            f"(x{report.flops_forward / base:.2f}) activations={report.peak_activation_bytes / 2**20:.1f}MiB"
        )
    return reports
