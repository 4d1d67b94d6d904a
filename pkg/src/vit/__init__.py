# ViT core: parameters and layers
from .params import BlockWeights, ParamStore, build_params, init_relays, block_count
from .layers import (
    TokenSeq, patchify, unpatchify, positional_table, embed, attention,
    transformer_block, seg_head,
)
