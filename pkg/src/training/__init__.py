# Optimiser and training loop
from .optimizer import lr_schedule, optimizer_step, record_validation
from .trainer import (
    TrainResult, METRIC_FIELDS, batch_inputs, train_step, evaluate, make_checkpoint,
    restore, load_params, train,
)
