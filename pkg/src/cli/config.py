"""
Flat key=value run configuration.

Keys are section-prefixed (`vit.depth=4`, `optim.lr0=1e-4`,
`synth.class_table.stripes_h:warm=1`); top-level keys are `variant`,
`overlap`, `seed` and `threads`. `vit.preset` picks a ViT preset that the
other vit keys then override. The sampler window and the synthetic class
count follow the ViT unless set, and the top-level seed seeds the sampler
and optimizer unless they carry their own.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values

from src.errors import ConfigError
from src.models.schemas import DEFAULT_CLASS_TABLE, RunConfig, ViTConfig

logger = logging.getLogger(__name__)

PRESETS = {"desk": ViTConfig.desk, "vit_s": ViTConfig.vit_s, "tiny": ViTConfig.tiny}


def _nest(flat: Mapping[str, str]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigError(f"config key {key} has no value")
        node = tree
        *parents, leaf = key.strip().split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key} collides with scalar {part}")
            node = child
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"config key {key} collides with section {leaf}")
        node[leaf] = value.strip()
    return tree


def build_run_config(flat: Mapping[str, str]) -> RunConfig:
    """validate a flat mapping into a RunConfig (pydantic errors propagate)"""
    tree = _nest(flat)
    vit_keys = dict(tree.pop("vit", {}))
    preset = vit_keys.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown vit.preset {preset}; expected one of {sorted(PRESETS)}")
    vit = PRESETS[preset](**vit_keys)

    sampler = dict(tree.pop("sampler", {}))
    sampler.setdefault("s", vit.local_size)
    sampler.setdefault("g", vit.down_factor)
    synth = dict(tree.pop("synth", {}))
    synth.setdefault("num_classes", vit.num_classes)
    if isinstance(synth.get("class_table"), dict):
        synth["class_table"] = {**DEFAULT_CLASS_TABLE, **synth["class_table"]}
    optim = dict(tree.pop("optim", {}))
    if "seed" in tree:
        sampler.setdefault("seed", tree["seed"])
        optim.setdefault("seed", tree["seed"])

    return RunConfig(vit=vit, sampler=sampler, synth=synth, optim=optim, **tree)


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        flat.update(dotenv_values(path))
    flat.update({k: str(v) for k, v in (overrides or {}).items()})
    cfg = build_run_config(flat)
    logger.debug(f"Loaded run config from {path or 'defaults'} with {len(flat)} keys")
    return cfg


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_config(cfg: RunConfig) -> Dict[str, str]:
    """sorted flat echo of every resolved key"""
    flat: Dict[str, str] = {}

    def walk(prefix: str, node: Any):
        if isinstance(node, dict):
            for key, value in node.items():
                walk(f"{prefix}.{key}" if prefix else key, value)
        else:
            flat[prefix] = _render(node)

    data = cfg.model_dump(mode="json", exclude={"variant"})
    walk("", data)
    flat["variant"] = str(cfg.variant)
    return dict(sorted(flat.items()))


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the keys that define the model (vit.* and variant)"""
    flat = flatten_config(cfg)
    model_keys = {k: v for k, v in flat.items() if k.startswith("vit.") or k == "variant"}
    payload = json.dumps(model_keys, sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def write_resolved(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in flatten_config(cfg).items()))
    return path
