"""
Synthetic context-cue scenes.

The scene is a grid of cells. Each cell holds a striped texture square at
its center and a square beacon ring around it; the texture pixels' class
depends on (texture orientation, beacon colour) through SynthSpec.class_table.
With the default layout the ring lies more than one local window away from
the texture, so only the global window can see both.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from src.data.raster import read_pgm, read_ppm, to_bytes, to_unit, write_pgm, write_ppm
from src.data.windowing import Scene
from src.errors import ConfigError
from src.models.schemas import SynthSpec

logger = logging.getLogger(__name__)

TEXTURES = ("stripes_h", "stripes_v")
BEACONS = ("warm", "cold")

BACKGROUND = np.array([0.5, 0.5, 0.5])
BEACON_COLORS = {
    "warm": np.array([0.9, 0.35, 0.1]),
    "cold": np.array([0.1, 0.4, 0.9]),
}
STRIPE_LEVELS = (0.15, 0.85)

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["scene_id", "image", "label", "seed", "split"]


def _cell_offsets(cell: int):
    d = np.arange(cell, dtype=np.float64) - (cell / 2.0 - 0.5)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return np.maximum(np.abs(dy), np.abs(dx))


def synth_generate(spec: SynthSpec, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    S, cell = spec.scene_size, spec.cell_size
    image = np.empty((3, S, S), dtype=np.float64)
    image[:] = BACKGROUND[:, None, None]
    labels = np.zeros((S, S), dtype=np.uint8)

    cheb = _cell_offsets(cell)
    texture_mask = cheb < spec.texture_size / 2.0
    ring_mask = (cheb >= spec.beacon_radius) & (cheb < spec.beacon_radius + spec.beacon_width)
    half = max(1, spec.stripe_period // 2)
    band = np.where((np.arange(cell) // half) % 2 == 0, *STRIPE_LEVELS)
    stripes = {
        "stripes_h": np.broadcast_to(band[:, None], (cell, cell)),
        "stripes_v": np.broadcast_to(band[None, :], (cell, cell)),
    }

    n = S // cell
    for i in range(n):
        for j in range(n):
            texture = TEXTURES[0] if rng.random() < spec.texture_prior else TEXTURES[1]
            beacon = BEACONS[0] if rng.random() < spec.beacon_prior else BEACONS[1]
            rows, cols = slice(i * cell, (i + 1) * cell), slice(j * cell, (j + 1) * cell)
            patch = image[:, rows, cols]
            patch[:, texture_mask] = stripes[texture][texture_mask]
            patch[:, ring_mask] = BEACON_COLORS[beacon][:, None]
            labels[rows, cols][texture_mask] = spec.class_table[f"{texture}:{beacon}"]

    if spec.noise:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    # quantise so a saved and reloaded scene is bit-identical
    image = to_unit(to_bytes(image))
    return Scene(image=image, labels=labels, name=f"synth-{seed}")


def local_only_bayes_cap(spec: SynthSpec) -> float:
    """
    Best accuracy any classifier blind to the beacon can reach on
    beacon-dependent texture pixels: it can only guess the likelier colour.
    """
    p_texture = {TEXTURES[0]: spec.texture_prior, TEXTURES[1]: 1.0 - spec.texture_prior}
    p_beacon = {BEACONS[0]: spec.beacon_prior, BEACONS[1]: 1.0 - spec.beacon_prior}
    mass, correct = 0.0, 0.0
    for texture in TEXTURES:
        classes = {b: spec.class_table[f"{texture}:{b}"] for b in BEACONS}
        if len(set(classes.values())) == 1:
            continue
        by_class: Dict[int, float] = {}
        for beacon, cls in classes.items():
            by_class[cls] = by_class.get(cls, 0.0) + p_beacon[beacon]
        mass += p_texture[texture]
        correct += p_texture[texture] * max(by_class.values())
    return correct / mass if mass else 1.0


def beacon_isolated(spec: SynthSpec, s: int) -> bool:
    """True when no s x s window can hold both a texture pixel and a ring pixel"""
    return spec.beacon_radius - spec.texture_size / 2.0 >= s


@dataclass
class ManifestEntry:
    scene_id: str
    image: str
    label: str
    seed: int
    split: str


def save_scene(scene: Scene, image_path: Path, label_path: Path):
    write_ppm(image_path, to_bytes(scene.image))
    write_pgm(label_path, scene.labels)


def load_scene(image_path: Path, label_path: Path, name: Optional[str] = None) -> Scene:
    image = to_unit(read_ppm(image_path))
    labels = read_pgm(label_path)
    return Scene(image=image, labels=labels, name=name or Path(image_path).stem)


def scene_seed(seed: int, split: str, i: int) -> int:
    state = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, SPLITS.index(split), i])
    return int(state.generate_state(1, np.uint32)[0])


def generate_scene_set(spec: SynthSpec, root: Path, seed: int) -> List[ManifestEntry]:
    """write every split under `root` and its manifest.csv"""
    root = Path(root)
    counts = {"train": spec.train_scenes, "val": spec.val_scenes, "test": spec.test_scenes}
    entries: List[ManifestEntry] = []
    for split in SPLITS:
        for i in range(counts[split]):
            s_seed = scene_seed(seed, split, i)
            scene_id = f"{split}_{i:04d}"
            scene = synth_generate(spec, s_seed)
            entry = ManifestEntry(
                scene_id=scene_id,
                image=f"{split}/{scene_id}.ppm",
                label=f"{split}/{scene_id}.pgm",
                seed=s_seed,
                split=split,
            )
            save_scene(scene, root / entry.image, root / entry.label)
            entries.append(entry)
        logger.info(f"Wrote {counts[split]} {split} scenes under {root / split}")

    with open(root / MANIFEST, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for entry in entries:
            writer.writerow(entry.__dict__)
    return entries


def read_manifest(root: Path) -> List[ManifestEntry]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise ConfigError(f"no scene manifest at {path}; run the synth command first")
    with open(path, newline="") as f:
        return [
            ManifestEntry(r["scene_id"], r["image"], r["label"], int(r["seed"]), r["split"])
            for r in csv.DictReader(f)
        ]


def load_scene_set(root: Path, split: str) -> List[Scene]:
    root = Path(root)
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split}; expected one of {SPLITS}")
    scenes = [
        load_scene(root / e.image, root / e.label, e.scene_id)
        for e in read_manifest(root)
        if e.split == split
    ]
    logger.info(f"Loaded {len(scenes)} {split} scenes from {root}")
    return scenes
