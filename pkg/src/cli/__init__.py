# Command-line plumbing: run config, checkpoint format, subcommands
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .config import load_run_config, flatten_config, config_hash
