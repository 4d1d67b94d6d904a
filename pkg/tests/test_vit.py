"""
ViT core: tokenisation, positional table, blocks, parameter registry
"""
import numpy as np
import pytest

from src.analysis.cost import count_params
from src.errors import ConfigError, DimensionError, VariantError
from src.models.schemas import RelayVariant, ViTConfig
from src.tensor import Tensor, no_grad, ops
from src.vit import (
    block_count, build_params, init_relays, patchify, positional_table, seg_head,
    transformer_block, unpatchify,
)
from src.vit.params import ParamStore, truncated_normal


# ============================================================================
# TOKENISATION
# ============================================================================

def test_patchify_channel_major_order():
    """1x4x4 with P=2 -> 4 patches, first patch is the top-left 2x2 block"""
    image = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
    seq = patchify(image, 2)
    assert seq.tokens.shape == (4, 4)
    assert seq.grid == (2, 2)
    np.testing.assert_array_equal(seq.tokens.data[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(seq.tokens.data[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(seq.tokens.data[2], [8, 9, 12, 13])


def test_patchify_index_oracle(rng):
    image = rng.standard_normal((2, 3, 6, 4))
    seq = patchify(Tensor(image, dtype="float64"), 2)
    assert seq.tokens.shape == (2, 6, 12)
    for b in range(2):
        for i in range(3):
            for j in range(2):
                expected = image[b, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
                np.testing.assert_array_equal(seq.tokens.data[b, i * 2 + j], expected)
    back = unpatchify(seq.tokens, 2, 6, 4)
    np.testing.assert_array_equal(back.data, image)


def test_patchify_rejects_ragged_image():
    with pytest.raises(DimensionError):
        patchify(Tensor(np.zeros((3, 5, 4))), 2)


def test_positional_table_properties():
    table = positional_table((8, 8), 16, "float64").data
    assert table.shape == (64, 16)
    # sin^2 + cos^2 per frequency: every row has the same norm
    np.testing.assert_allclose(np.linalg.norm(table, axis=1), np.sqrt(8.0))
    d = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=-1)
    assert (d + np.eye(64) > 1e-6).all()
    with pytest.raises(DimensionError):
        positional_table((2, 2), 6)


# ============================================================================
# TRANSFORMER BLOCK AND HEAD
# ============================================================================

def test_block_preserves_shape_and_accepts_unbatched(make_params, rng):
    params = make_params("LocalOnly")
    w = params.block(0)
    x = Tensor(rng.standard_normal((2, 5, 8)), dtype="float64")
    assert transformer_block(x, w, params.cfg).shape == (2, 5, 8)
    single = transformer_block(ops.getitem(x, (0,)), w, params.cfg)
    np.testing.assert_allclose(single.data, transformer_block(x, w, params.cfg).data[0], atol=1e-12)
    with pytest.raises(DimensionError):
        transformer_block(Tensor(np.zeros((2, 5, 6))), w, params.cfg)


def test_block_is_permutation_equivariant(make_params, rng):
    """no positional information inside the block: permuting tokens permutes outputs"""
    params = make_params("LocalOnly")
    x = rng.standard_normal((1, 5, 8))
    perm = rng.permutation(5)
    with no_grad():
        out = transformer_block(Tensor(x, dtype="float64"), params.block(0), params.cfg).data
        out_p = transformer_block(Tensor(x[:, perm], dtype="float64"), params.block(0), params.cfg).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_attention_record(make_params, rng):
    params = make_params("LocalOnly")
    record = []
    transformer_block(Tensor(rng.standard_normal((3, 5, 8)), dtype="float64"), params.block(0), params.cfg, record)
    (probs,) = record
    assert probs.shape == (3, params.cfg.heads, 5, 5)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)


def test_seg_head_shape(make_params, rng):
    params = make_params("LocalOnly")
    cfg = params.cfg
    x = Tensor(rng.standard_normal((2, cfg.tokens, cfg.width)), dtype="float64")
    z = seg_head(x, params, (cfg.grid, cfg.grid))
    assert z.shape == (2, cfg.num_classes, cfg.local_size, cfg.local_size)
    with pytest.raises(DimensionError):
        seg_head(x, params, (cfg.grid, cfg.grid + 1))


# ============================================================================
# PARAMETER REGISTRY
# ============================================================================

def test_relay_variant_names(make_params, tiny_cfg):
    params = make_params("SequentialRelay")
    names = params.names()
    assert names[:2] == ["proj.local.weight", "proj.local.bias"]
    assert "proj.global.weight" in params and "proj.weight" not in params
    assert "block.1.attn.q.weight" in params
    assert "block.1.mlp.fc2.bias" in params
    assert params["relay.tokens"].shape == (tiny_cfg.relay_count, tiny_cfg.width)
    assert params.depth == tiny_cfg.depth
    assert params["head.weight"].shape == (tiny_cfg.width, tiny_cfg.patch_size ** 2 * tiny_cfg.num_classes)


def test_two_projectors_counted(make_params, tiny_cfg):
    """share_projector=false -> two projectors of P^2 C D + D values each"""
    separate = make_params("SequentialRelay")
    shared = make_params("SequentialRelay", share_projector=True)
    per_projector = tiny_cfg.patch_dim * tiny_cfg.width + tiny_cfg.width
    assert separate.count() - shared.count() == per_projector
    assert "proj.weight" in shared and "proj.local.weight" not in shared
    assert shared.projector("local")[0] is shared.projector("global")[0]


@pytest.mark.parametrize("variant", [
    "SequentialRelay", "ParallelRelay", "FewerBlocks:1", "TokenConcat",
    "DecisionFusion", "RegistersOnly", "LocalOnly", "GlobalOnly",
])
def test_build_params_matches_analytic_count(make_params, tiny_cfg, variant):
    params = make_params(variant)
    assert params.count() == count_params(tiny_cfg, RelayVariant.parse(variant)).params_total


def test_variant_specific_tokens(make_params):
    assert "relay.tokens" not in make_params("LocalOnly")
    regs = make_params("RegistersOnly")
    assert "registers.tokens" in regs and "relay.tokens" not in regs
    with pytest.raises(VariantError):
        regs.relay_tokens()
    assert make_params("FewerBlocks:1").depth == 1
    glob = make_params("GlobalOnly")
    assert "proj.global.weight" in glob and "proj.local.weight" not in glob
    with pytest.raises(VariantError):
        glob.projector("local")


def test_fewer_blocks_cannot_exceed_depth(tiny_cfg):
    with pytest.raises(VariantError):
        block_count(tiny_cfg, RelayVariant.parse("FewerBlocks:5"))


def test_initialisation(make_params, tiny_cfg):
    a, b = make_params(seed=7), make_params(seed=7)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(make_params(seed=8)["head.weight"].data, a["head.weight"].data)
    np.testing.assert_array_equal(a["block.0.norm1.gain"].data, 1.0)
    np.testing.assert_array_equal(a["block.0.attn.q.bias"].data, 0.0)
    assert np.abs(a["head.weight"].data).max() <= 2 * tiny_cfg.init_std
    assert all(t.requires_grad for t in a.values())


def test_truncated_normal_bounds(rng):
    draws = truncated_normal(rng, (10000,), 0.02)
    assert np.abs(draws).max() <= 0.04
    assert 0.014 < draws.std() < 0.02


def test_relay_init_statistics():
    """10^4 draws of standard-normal relays have unit variance"""
    tokens = init_relays(100, 100, seed=0, dtype="float64")
    assert tokens.shape == (100, 100) and tokens.requires_grad
    assert 0.9 <= tokens.data.var() <= 1.1
    assert init_relays(0, 8, seed=0).shape == (0, 8)


def test_register_once(tiny_cfg):
    store = ParamStore(tiny_cfg, RelayVariant.parse("LocalOnly"))
    t = Tensor(np.zeros(3))
    store.register("a", t)
    with pytest.raises(ConfigError):
        store.register("a", Tensor(np.zeros(3)))
    with pytest.raises(ConfigError):
        store.register("b", t)


def test_load_arrays_checks_names_and_shapes(make_params):
    params = make_params("LocalOnly")
    arrays = {k: v.copy() for k, v in params.state_arrays().items()}
    arrays["head.bias"] = arrays["head.bias"] + 1.0
    params.load_arrays(arrays)
    np.testing.assert_array_equal(params["head.bias"].data, 1.0)
    arrays.pop("head.bias")
    with pytest.raises(ConfigError):
        params.load_arrays(arrays)


def test_vit_s_preset_geometry():
    cfg = ViTConfig.vit_s()
    assert (cfg.depth, cfg.width, cfg.heads, cfg.patch_size) == (12, 384, 6, 16)
    assert cfg.tokens == 256
    with pytest.raises(ValueError):
        ViTConfig.vit_s(heads=5)
