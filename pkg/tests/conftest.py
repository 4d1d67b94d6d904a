"""
Shared fixtures: tiny model configs, seeded generators and small scenes
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dotenv import load_dotenv
load_dotenv()

from src.data.windowing import Scene
from src.models.schemas import (
    LossWeights, OptimConfig, RelayVariant, RunConfig, SamplerConfig, SynthSpec, ViTConfig,
)
from src.vit.params import build_params

# class ids stay below the tiny model's K=3
TINY_CLASS_TABLE = {
    "stripes_h:warm": 1,
    "stripes_h:cold": 2,
    "stripes_v:warm": 1,
    "stripes_v:cold": 2,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long synthetic experiments (set RELAYGRID_SLOW=1)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> ViTConfig:
    return ViTConfig.tiny()


@pytest.fixture
def make_params(tiny_cfg):
    """build_params for a variant on the tiny config, with optional overrides"""

    def build(variant="SequentialRelay", seed=0, **overrides):
        cfg = tiny_cfg.model_copy(update=overrides) if overrides else tiny_cfg
        return build_params(cfg, RelayVariant.parse(variant), seed)

    return build


def random_scene(rng, height, width, num_classes=3, name="scene"):
    image = rng.random((3, height, width)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=(height, width)).astype(np.uint8)
    return Scene(image=image, labels=labels, name=name)


@pytest.fixture
def scene(rng):
    return random_scene(rng, 48, 48, name="fixture")


@pytest.fixture
def tiny_run_config():
    """RunConfig around the tiny ViT, small enough to train for a few steps"""

    def build(variant="SequentialRelay", **optim):
        settings = dict(steps_total=4, batch=2, eval_every=2, log_every=1, lr0=1e-3, warmup_fraction=0.25)
        settings.update(optim)
        return RunConfig(
            vit=ViTConfig.tiny(),
            sampler=SamplerConfig(s=8, g=4, seed=3),
            optim=OptimConfig(**settings),
            loss=LossWeights(),
            synth=SynthSpec(
                num_classes=3, scene_size=64, cell_size=32, texture_size=4,
                beacon_radius=10, beacon_width=2, class_table=dict(TINY_CLASS_TABLE),
            ),
            variant=variant,
            seed=3,
        )

    return build


@pytest.fixture
def make_scene(rng):
    def build(height, width, num_classes=3, name="scene"):
        return random_scene(rng, height, width, num_classes, name)

    return build
