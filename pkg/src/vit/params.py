"""
Named parameter registry and deterministic initialisation.

Names are part of the checkpoint format and must stay stable:
proj[.local|.global].{weight,bias}, block.<b>.attn.{q,k,v,o}.{weight,bias},
block.<b>.norm{1,2}.{gain,bias}, block.<b>.mlp.fc{1,2}.{weight,bias},
head.{weight,bias}, relay.tokens, registers.tokens.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from src.errors import ConfigError, VariantError
from src.models.schemas import RelayVariant, VariantTag, ViTConfig
from src.tensor import Tensor

logger = logging.getLogger(__name__)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """N(0, std^2) resampled outside +-2 std"""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_relays(R: int, D: int, seed: int, dtype: str = "float32") -> Tensor:
    """R x D standard-normal relay tokens, a learnable leaf"""
    rng = np.random.default_rng([seed, 0x5E1A])
    return Tensor(rng.standard_normal((R, D)), requires_grad=True, dtype=dtype)


class ParamStore:
    """Ordered name -> Tensor map; each tensor is registered exactly once"""

    def __init__(self, cfg: ViTConfig, variant: RelayVariant):
        self.cfg = cfg
        self.variant = variant
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name} registered twice")
        if any(t is tensor for t in self._params.values()):
            raise ConfigError(f"tensor for {name} is already registered under another name")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> List[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def projector(self, scale: str) -> Tuple[Tensor, Tensor]:
        if scale not in ("local", "global"):
            raise ValueError(f"unknown projector scale {scale}")
        for prefix in (f"proj.{scale}", "proj"):
            if f"{prefix}.weight" in self._params:
                return self._params[f"{prefix}.weight"], self._params[f"{prefix}.bias"]
        raise VariantError(f"{self.variant} has no {scale} projector")

    @property
    def depth(self) -> int:
        return sum(1 for n in self._params if n.startswith("block.") and n.endswith(".attn.q.weight"))

    def block(self, b: int) -> "BlockWeights":
        return BlockWeights.from_store(self, b)

    def relay_tokens(self) -> Tensor:
        if "relay.tokens" not in self._params:
            raise VariantError(f"{self.variant} carries no relay tokens")
        return self._params["relay.tokens"]

    def register_tokens(self) -> Tensor:
        if "registers.tokens" not in self._params:
            raise VariantError(f"{self.variant} carries no register tokens")
        return self._params["registers.tokens"]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={missing[:4]} unexpected={extra[:4]}")
        for name, tensor in self._params.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise ConfigError(f"{name}: stored shape {value.shape} != model shape {tensor.shape}")
            tensor.data = np.ascontiguousarray(value.astype(tensor.dtype, copy=True))


@dataclass
class BlockWeights:
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def from_store(cls, store: ParamStore, b: int) -> "BlockWeights":
        p = f"block.{b}"
        return cls(
            q_w=store[f"{p}.attn.q.weight"], q_b=store[f"{p}.attn.q.bias"],
            k_w=store[f"{p}.attn.k.weight"], k_b=store[f"{p}.attn.k.bias"],
            v_w=store[f"{p}.attn.v.weight"], v_b=store[f"{p}.attn.v.bias"],
            o_w=store[f"{p}.attn.o.weight"], o_b=store[f"{p}.attn.o.bias"],
            norm1_gain=store[f"{p}.norm1.gain"], norm1_bias=store[f"{p}.norm1.bias"],
            norm2_gain=store[f"{p}.norm2.gain"], norm2_bias=store[f"{p}.norm2.bias"],
            fc1_w=store[f"{p}.mlp.fc1.weight"], fc1_b=store[f"{p}.mlp.fc1.bias"],
            fc2_w=store[f"{p}.mlp.fc2.weight"], fc2_b=store[f"{p}.mlp.fc2.bias"],
        )


def projector_prefixes(cfg: ViTConfig, variant: RelayVariant) -> List[str]:
    scales = [s for s, used in (("local", variant.uses_local), ("global", variant.uses_global)) if used]
    if cfg.share_projector:
        return ["proj"]
    return [f"proj.{s}" for s in scales]


def block_count(cfg: ViTConfig, variant: RelayVariant) -> int:
    if variant.tag == VariantTag.FEWER_BLOCKS:
        if variant.keep > cfg.depth:
            raise VariantError(f"FewerBlocks keep={variant.keep} exceeds depth {cfg.depth}")
        return variant.keep
    return cfg.depth


def build_params(cfg: ViTConfig, variant: RelayVariant, seed: int = 0) -> ParamStore:
    """Register exactly the parameters `variant` uses, initialised from `seed`"""
    rng = np.random.default_rng(seed)
    store = ParamStore(cfg, variant)
    D, std, dt = cfg.width, cfg.init_std, cfg.dtype

    def weight(name, shape):
        store.register(name, Tensor(truncated_normal(rng, shape, std), dtype=dt))

    def const(name, shape, value):
        store.register(name, Tensor(np.full(shape, value), dtype=dt))

    for prefix in projector_prefixes(cfg, variant):
        weight(f"{prefix}.weight", (cfg.patch_dim, D))
        const(f"{prefix}.bias", (D,), 0.0)

    for b in range(block_count(cfg, variant)):
        p = f"block.{b}"
        const(f"{p}.norm1.gain", (D,), 1.0)
        const(f"{p}.norm1.bias", (D,), 0.0)
        for proj in ("q", "k", "v", "o"):
            weight(f"{p}.attn.{proj}.weight", (D, D))
            const(f"{p}.attn.{proj}.bias", (D,), 0.0)
        const(f"{p}.norm2.gain", (D,), 1.0)
        const(f"{p}.norm2.bias", (D,), 0.0)
        weight(f"{p}.mlp.fc1.weight", (D, cfg.hidden))
        const(f"{p}.mlp.fc1.bias", (cfg.hidden,), 0.0)
        weight(f"{p}.mlp.fc2.weight", (cfg.hidden, D))
        const(f"{p}.mlp.fc2.bias", (D,), 0.0)

    out_dim = cfg.patch_size * cfg.patch_size * cfg.num_classes
    weight("head.weight", (D, out_dim))
    const("head.bias", (out_dim,), 0.0)

    if variant.uses_relays:
        store.register("relay.tokens", init_relays(cfg.relay_count, D, seed, dt))
    elif variant.tag == VariantTag.REGISTERS_ONLY:
        # independent parameter of the relay shape
        store.register("registers.tokens", init_relays(cfg.relay_count, D, seed + 1, dt))

    logger.info(f"Built {len(store)} parameter tensors ({store.count():,} values) for {variant}")
    return store
