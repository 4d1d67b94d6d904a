# Relay engine package
from .engine import (
    HANDLERS, baseline, forward_sequential, forward_parallel, forward_variant,
    fuse_decisions, local_resolution_logits,
)
from src.vit.params import init_relays
