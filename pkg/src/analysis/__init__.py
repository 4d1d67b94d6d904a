# Attention maps and cost accounting
from .attention import AttnMap, extract_attention, write_attention, heat_raster
from .cost import (
    CONVENTION, CostReport, count_params, count_flops, estimate_memory,
    flops_by_relay_count, write_cost_csv,
)
