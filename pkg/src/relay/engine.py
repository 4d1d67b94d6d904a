"""
Cross-scale forward strategies behind one dispatch surface.

Token layout inside every relay block call is [relay; patches]: the first
R slots are relay tokens. Images are [batch, C, s, s] (or unbatched
[C, s, s]); the global image is already downsampled to the local size.
"""
import logging
from typing import Callable, Dict, Optional, Tuple

from src.errors import DimensionError, VariantError
from src.losses.objectives import crop_global
from src.models.schemas import RelayVariant, VariantTag
from src.models.state import DualOutput, ForwardTrace
from src.tensor import Tensor, ops
from src.vit.layers import TokenSeq, embed, patchify, seg_head, transformer_block
from src.vit.params import ParamStore

logger = logging.getLogger(__name__)


def _batched(image: Optional[Tensor]) -> Tuple[Optional[Tensor], bool]:
    if image is None or image.ndim == 4:
        return image, False
    if image.ndim == 3:
        return ops.reshape(image, (1,) + image.shape), True
    raise DimensionError(f"expected [batch, C, H, W] or [C, H, W] image, got {image.shape}")


def _unbatched(out: DualOutput, squeeze: bool) -> DualOutput:
    if not squeeze:
        return out
    if out.z_loc is not None:
        out.z_loc = ops.reshape(out.z_loc, out.z_loc.shape[1:])
    if out.z_glob is not None:
        out.z_glob = ops.reshape(out.z_glob, out.z_glob.shape[1:])
    return out


def _tokens(image: Tensor, params: ParamStore, scale: str) -> TokenSeq:
    cfg = params.cfg
    if image.shape[-3] != cfg.in_channels:
        raise DimensionError(f"{scale} image has {image.shape[-3]} channels, model expects {cfg.in_channels}")
    return embed(patchify(image, cfg.patch_size), params, scale)


def _scale_tokens(local: Tensor, global_: Tensor, params: ParamStore) -> Tuple[TokenSeq, TokenSeq]:
    if global_ is None:
        raise VariantError(f"{params.variant} needs a global window")
    loc = _tokens(local, params, "local")
    glob = _tokens(global_, params, "global")
    if loc.count != glob.count or loc.tokens.shape[0] != glob.tokens.shape[0]:
        raise DimensionError(
            f"local and global token grids disagree: {loc.tokens.shape} vs {glob.tokens.shape}"
        )
    return loc, glob


def _relay_batch(tokens: Tensor, batch: int) -> Optional[Tensor]:
    if tokens.shape[0] == 0:
        return None
    return ops.expand_batch(tokens, batch)


def _with_relays(relay: Optional[Tensor], x: Tensor) -> Tensor:
    return x if relay is None else ops.concat([relay, x], axis=1)


def _split_relays(relay: Optional[Tensor], x: Tensor) -> Tuple[Optional[Tensor], Tensor]:
    if relay is None:
        return None, x
    R = relay.shape[1]
    head, rest = ops.split(x, 1, [R, x.shape[1] - R])
    return head, rest


def _attn_record(trace: Optional[ForwardTrace], name: str):
    return None if trace is None else getattr(trace, name)


def baseline(image: Tensor, params: ParamStore, scale: str = "local", trace: Optional[ForwardTrace] = None) -> Tensor:
    """single-scale ViT: embed -> blocks -> head"""
    cfg = params.cfg
    seq = _tokens(image, params, scale)
    x = seq.tokens
    record = _attn_record(trace, f"attn_{scale}")
    for b in range(params.depth):
        x = transformer_block(x, params.block(b), cfg, record)
    return seg_head(x, params, seq.grid)


def forward_sequential(
    local: Tensor, global_: Tensor, params: ParamStore, trace: Optional[ForwardTrace] = None
) -> DualOutput:
    """
    Per block b, step (i) runs [relay, global] through block b, step (ii)
    runs [relay(i), local] through the same block; relays are dropped after
    the last block.
    """
    cfg = params.cfg
    local, squeeze = _batched(local)
    global_, _ = _batched(global_)
    loc, glob = _scale_tokens(local, global_, params)
    batch = loc.tokens.shape[0]
    relay = _relay_batch(params.relay_tokens(), batch) if "relay.tokens" in params else None
    xl, xg = loc.tokens, glob.tokens

    for b in range(params.depth):
        w = params.block(b)
        out = transformer_block(_with_relays(relay, xg), w, cfg, _attn_record(trace, "attn_global"))
        relay, xg = _split_relays(relay, out)
        if trace is not None and relay is not None:
            trace.relay_half.append(relay.data.copy())
        out = transformer_block(_with_relays(relay, xl), w, cfg, _attn_record(trace, "attn_local"))
        relay, xl = _split_relays(relay, out)
        if trace is not None and relay is not None:
            trace.relay_full.append(relay.data.copy())

    result = DualOutput(
        z_loc=seg_head(xl, params, loc.grid),
        z_glob=seg_head(xg, params, glob.grid),
        relay_trace=trace,
    )
    return _unbatched(result, squeeze)


def forward_parallel(
    local: Tensor, global_: Tensor, params: ParamStore, trace: Optional[ForwardTrace] = None
) -> DualOutput:
    """both branches read the same relay state; the new state is their mean"""
    cfg = params.cfg
    local, squeeze = _batched(local)
    global_, _ = _batched(global_)
    loc, glob = _scale_tokens(local, global_, params)
    batch = loc.tokens.shape[0]
    relay = _relay_batch(params.relay_tokens(), batch) if "relay.tokens" in params else None
    xl, xg = loc.tokens, glob.tokens

    for b in range(params.depth):
        w = params.block(b)
        out_g = transformer_block(_with_relays(relay, xg), w, cfg, _attn_record(trace, "attn_global"))
        out_l = transformer_block(_with_relays(relay, xl), w, cfg, _attn_record(trace, "attn_local"))
        relay_g, xg = _split_relays(relay, out_g)
        relay_l, xl = _split_relays(relay, out_l)
        if relay is not None:
            relay = ops.scale(relay_g + relay_l, 0.5)
            if trace is not None:
                trace.relay_branch_global.append(relay_g.data.copy())
                trace.relay_branch_local.append(relay_l.data.copy())
                trace.relay_full.append(relay.data.copy())

    result = DualOutput(
        z_loc=seg_head(xl, params, loc.grid),
        z_glob=seg_head(xg, params, glob.grid),
        relay_trace=trace,
    )
    return _unbatched(result, squeeze)


def _local_only(local, global_, params, trace):
    local, squeeze = _batched(local)
    return _unbatched(DualOutput(z_loc=baseline(local, params, "local", trace), relay_trace=trace), squeeze)


def _global_only(local, global_, params, trace):
    if global_ is None:
        raise VariantError("GlobalOnly needs a global window")
    global_, squeeze = _batched(global_)
    z_glob = baseline(global_, params, "global", trace)
    return _unbatched(DualOutput(z_loc=None, z_glob=z_glob, relay_trace=trace), squeeze)


def _registers_only(local, global_, params, trace):
    """sequential scheme without the global step: extra tokens on the local window"""
    cfg = params.cfg
    local, squeeze = _batched(local)
    loc = _tokens(local, params, "local")
    regs = _relay_batch(params.register_tokens(), loc.tokens.shape[0])
    x = loc.tokens
    for b in range(params.depth):
        out = transformer_block(_with_relays(regs, x), params.block(b), cfg, _attn_record(trace, "attn_local"))
        regs, x = _split_relays(regs, out)
    return _unbatched(DualOutput(z_loc=seg_head(x, params, loc.grid), relay_trace=trace), squeeze)


def fuse_decisions(z_loc: Tensor, z_glob: Tensor, g: int) -> Tensor:
    """mean of local logits and nearest-upsampled central crop of global logits"""
    if z_glob.shape != z_loc.shape:
        raise DimensionError(f"global logits {z_glob.shape} != local logits {z_loc.shape}")
    return ops.scale(z_loc + ops.upsample_nearest(crop_global(z_glob, g), g), 0.5)


def _decision_fusion(local, global_, params, trace):
    if global_ is None:
        raise VariantError("DecisionFusion needs a global window")
    local, squeeze = _batched(local)
    global_, _ = _batched(global_)
    z_loc = baseline(local, params, "local", trace)
    z_glob = baseline(global_, params, "global", trace)
    fused = fuse_decisions(z_loc, z_glob, params.cfg.down_factor)
    return _unbatched(DualOutput(z_loc=fused, z_glob=z_glob, relay_trace=trace), squeeze)


def _token_concat(local, global_, params, trace):
    """one network over the 2N-token concatenation [local; global], no relays"""
    cfg = params.cfg
    local, squeeze = _batched(local)
    global_, _ = _batched(global_)
    loc, glob = _scale_tokens(local, global_, params)
    N = loc.count
    x = ops.concat([loc.tokens, glob.tokens], axis=1)
    for b in range(params.depth):
        x = transformer_block(x, params.block(b), cfg, _attn_record(trace, "attn_local"))
    xl, xg = ops.split(x, 1, [N, N])
    result = DualOutput(
        z_loc=seg_head(xl, params, loc.grid),
        z_glob=seg_head(xg, params, glob.grid),
        relay_trace=trace,
    )
    return _unbatched(result, squeeze)


Handler = Callable[[Tensor, Optional[Tensor], ParamStore, Optional[ForwardTrace]], DualOutput]

HANDLERS: Dict[VariantTag, Handler] = {
    VariantTag.SEQUENTIAL_RELAY: forward_sequential,
    VariantTag.PARALLEL_RELAY: forward_parallel,
    # params for FewerBlocks only hold the first `keep` blocks
    VariantTag.FEWER_BLOCKS: forward_sequential,
    VariantTag.TOKEN_CONCAT: _token_concat,
    VariantTag.DECISION_FUSION: _decision_fusion,
    VariantTag.REGISTERS_ONLY: _registers_only,
    VariantTag.LOCAL_ONLY: _local_only,
    VariantTag.GLOBAL_ONLY: _global_only,
}


def forward_variant(
    variant: RelayVariant,
    local: Optional[Tensor],
    global_: Optional[Tensor],
    params: ParamStore,
    trace: Optional[ForwardTrace] = None,
) -> DualOutput:
    variant = RelayVariant.parse(variant)
    if params.variant != variant:
        raise VariantError(f"parameters were built for {params.variant}, not {variant}")
    if variant.uses_local and local is None:
        raise VariantError(f"{variant} needs a local window")
    handler = HANDLERS.get(variant.tag)
    if handler is None:
        raise VariantError(f"no forward registered for {variant}")
    return handler(local, global_ if variant.uses_global else None, params, trace)


def local_resolution_logits(out: DualOutput, g: int) -> Tensor:
    """z_loc, or for global-only models the nearest-upsampled central crop of z_glob"""
    if out.z_loc is not None:
        return out.z_loc
    if out.z_glob is None:
        raise VariantError("forward produced no logits")
    return ops.upsample_nearest(crop_global(out.z_glob, g), g)
