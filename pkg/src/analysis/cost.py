"""
Closed-form parameter, FLOP and activation-memory accounting.

FLOPs are 2 * multiply-accumulates; bias additions, norms, softmax and
GELU are not counted.
"""
import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from src.models.schemas import RelayVariant, VariantTag, ViTConfig
from src.vit.params import block_count, projector_prefixes

logger = logging.getLogger(__name__)

CONVENTION = "flops = 2*MACs, biases ignored"

_DUAL_RELAY = (VariantTag.SEQUENTIAL_RELAY, VariantTag.PARALLEL_RELAY, VariantTag.FEWER_BLOCKS)


@dataclass
class CostReport:
    variant: str
    params_total: int = 0
    params_relay: int = 0
    params_projectors: int = 0
    flops_forward: int = 0
    peak_activation_bytes: int = 0
    attention_activation_bytes: int = 0
    tokens_local: int = 0
    tokens_global: int = 0
    convention: str = CONVENTION


def dense_macs(tokens: int, fan_in: int, fan_out: int) -> int:
    return tokens * fan_in * fan_out


def block_macs(cfg: ViTConfig, n: int) -> int:
    D, hid = cfg.width, cfg.hidden
    linears = 4 * dense_macs(n, D, D) + dense_macs(n, D, hid) + dense_macs(n, hid, D)
    attention = 2 * n * n * D  # QK^T and AV
    return linears + attention


def _passes(cfg: ViTConfig, variant: RelayVariant) -> List[Tuple[str, int, int]]:
    """(scale, tokens through the blocks, patch tokens) for each network pass"""
    N, R = cfg.tokens, cfg.relay_count
    tag = variant.tag
    if tag in _DUAL_RELAY:
        return [("global", N + R, N), ("local", N + R, N)]
    if tag == VariantTag.DECISION_FUSION:
        return [("global", N, N), ("local", N, N)]
    if tag == VariantTag.TOKEN_CONCAT:
        return [("both", 2 * N, 2 * N)]
    if tag == VariantTag.REGISTERS_ONLY:
        return [("local", N + R, N)]
    if tag == VariantTag.GLOBAL_ONLY:
        return [("global", N, N)]
    return [("local", N, N)]


def count_params(cfg: ViTConfig, variant: RelayVariant) -> CostReport:
    variant = RelayVariant.parse(variant)
    D, hid = cfg.width, cfg.hidden
    out_dim = cfg.patch_size * cfg.patch_size * cfg.num_classes
    projectors = len(projector_prefixes(cfg, variant)) * (cfg.patch_dim * D + D)
    block = 4 * (D * D + D) + 2 * 2 * D + (D * hid + hid) + (hid * D + D)
    blocks = block_count(cfg, variant) * block
    head = D * out_dim + out_dim
    relay = cfg.relay_count * D if variant.uses_relays else 0
    registers = cfg.relay_count * D if variant.tag == VariantTag.REGISTERS_ONLY else 0
    return CostReport(
        variant=str(variant),
        params_total=projectors + blocks + head + relay + registers,
        params_relay=relay,
        params_projectors=projectors,
    )


def count_flops(cfg: ViTConfig, variant: RelayVariant) -> CostReport:
    variant = RelayVariant.parse(variant)
    depth = block_count(cfg, variant)
    out_dim = cfg.patch_size * cfg.patch_size * cfg.num_classes
    macs = 0
    for _, tokens, patches in _passes(cfg, variant):
        macs += dense_macs(patches, cfg.patch_dim, cfg.width)  # projector
        macs += depth * block_macs(cfg, tokens)
        macs += dense_macs(patches, cfg.width, out_dim)  # head
    report = count_params(cfg, variant)
    report.flops_forward = 2 * macs
    report.tokens_local = cfg.tokens if variant.uses_local else 0
    report.tokens_global = cfg.tokens if variant.uses_global else 0
    return report


def estimate_memory(cfg: ViTConfig, variant: RelayVariant, batch: int = 1) -> CostReport:
    """
    Activations retained for backward, per block and pass of n tokens:
    8 n D (norm inputs/outputs, q, k, v, context, projections)
    + 2 n hidden (MLP pre/post activation) + 2 H n^2 (scores, probabilities),
    plus the patch inputs and head outputs; times batch and dtype width.
    """
    variant = RelayVariant.parse(variant)
    width = 8 if cfg.dtype == "float64" else 4
    depth = block_count(cfg, variant)
    D, hid = cfg.width, cfg.hidden
    out_dim = cfg.patch_size * cfg.patch_size * cfg.num_classes
    dense, attention = 0, 0
    for _, n, patches in _passes(cfg, variant):
        dense += patches * cfg.patch_dim + patches * out_dim
        dense += depth * (8 * n * D + 2 * n * hid)
        attention += depth * 2 * cfg.heads * n * n
    report = count_flops(cfg, variant)
    report.peak_activation_bytes = batch * width * (dense + attention)
    report.attention_activation_bytes = batch * width * attention
    return report


def flops_by_relay_count(
    cfg: ViTConfig, counts: Iterable[int], variant: RelayVariant = None
) -> List[Tuple[int, int]]:
    variant = RelayVariant.parse(variant or "SequentialRelay")
    return [
        (R, count_flops(cfg.model_copy(update={"relay_count": R}), variant).flops_forward)
        for R in counts
    ]


def write_cost_csv(reports: Sequence[CostReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(asdict(reports[0]).keys()) if reports else list(CostReport.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        f.write(f"# {CONVENTION}\n")
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for report in reports:
            writer.writerow(asdict(report))
    logger.info(f"Wrote {len(reports)} cost rows to {path}")
    return path
