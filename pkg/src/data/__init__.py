# Scenes, window sampling and the synthetic dataset
from .windowing import (
    Scene, WindowPair, Rejected, extract_pair, extract_window, sample_pair, augment,
    draw_pair, downsample_box, oob_fraction, sample_batch, stack_pairs,
    global_access_count, reset_global_access_count,
)
from .synth import (
    synth_generate, local_only_bayes_cap, beacon_isolated, generate_scene_set,
    load_scene_set, load_scene, save_scene, read_manifest,
)
from .raster import read_ppm, read_pgm, write_ppm, write_pgm
