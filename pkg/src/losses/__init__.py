# Loss package
from .objectives import (
    xe_map, crop_global, histo, one_hot, valid_mask, loss_local, loss_global,
    loss_consistency, combined, xe_empty_mask_count, reset_xe_empty_mask_count, LOG_FLOOR,
)
