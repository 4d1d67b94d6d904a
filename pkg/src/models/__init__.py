# Models package
from .schemas import (
    IGNORE, DEFAULT_CLASS_TABLE, RelayVariant, VariantTag, ViTConfig, SamplerConfig, OptimConfig,
    LossWeights, SynthSpec, PathsConfig, RunConfig,
)
from .state import DualOutput, ForwardTrace, LossBreakdown, TrainState
