# Sliding-window inference and metrics
from .sliding import StitchPlan, plan_tiles, tile_positions, stitch_logits, sliding_infer
from .metrics import (
    SegMetrics, confusion_matrix, compute_miou, accumulate_metrics, relative_improvement,
    per_class_relative_improvement, write_report,
)
