"""
Relay engine: forward strategies, dispatch, and the end-to-end gradient check
"""
import numpy as np
import pytest

from src.errors import DimensionError, VariantError
from src.losses.objectives import combined, crop_global
from src.models.schemas import LossWeights, RelayVariant
from src.models.state import ForwardTrace
from src.relay import (
    HANDLERS, baseline, forward_parallel, forward_sequential, forward_variant, fuse_decisions,
    local_resolution_logits,
)
from src.tensor import Tensor, backward, no_grad, ops, zero_grad
from src.tensor.gradcheck import numerical_grad, relative_error
from src.models.schemas import VariantTag


def images(rng, cfg, batch=2):
    shape = (batch, cfg.in_channels, cfg.local_size, cfg.local_size)
    return Tensor(rng.random(shape), dtype=cfg.dtype), Tensor(rng.random(shape), dtype=cfg.dtype)


# ============================================================================
# RELAY FORWARDS
# ============================================================================

def test_zero_relays_equal_two_baselines(make_params, rng):
    """R=0 with a shared projector degenerates to two independent ViT forwards"""
    params = make_params("SequentialRelay", relay_count=0, share_projector=True)
    x_loc, x_glob = images(rng, params.cfg)
    with no_grad():
        out = forward_sequential(x_loc, x_glob, params)
        z_loc = baseline(x_loc, params, "local")
        z_glob = baseline(x_glob, params, "global")
    np.testing.assert_allclose(out.z_loc.data, z_loc.data, atol=1e-6)
    np.testing.assert_allclose(out.z_glob.data, z_glob.data, atol=1e-6)


def test_sequential_shapes_and_trace(make_params, rng):
    params = make_params("SequentialRelay")
    cfg = params.cfg
    x_loc, x_glob = images(rng, cfg, batch=3)
    trace = ForwardTrace()
    out = forward_sequential(x_loc, x_glob, params, trace)
    assert out.z_loc.shape == (3, cfg.num_classes, cfg.local_size, cfg.local_size)
    assert out.z_glob.shape == out.z_loc.shape
    assert len(trace.relay_half) == len(trace.relay_full) == cfg.depth
    assert trace.relay_full[0].shape == (3, cfg.relay_count, cfg.width)
    assert len(trace.attn_global) == len(trace.attn_local) == cfg.depth
    n = cfg.relay_count + cfg.tokens
    assert trace.attn_global[0].shape == (3, cfg.heads, n, n)


def test_sequential_hand_unrolled(make_params, rng):
    """one block: relays pass the global step, then carry into the local step"""
    params = make_params("SequentialRelay", depth=1)
    cfg = params.cfg
    x_loc, x_glob = images(rng, cfg, batch=1)
    from src.vit.layers import embed, patchify, seg_head, transformer_block

    with no_grad():
        out = forward_sequential(x_loc, x_glob, params)
        loc = embed(patchify(x_loc, cfg.patch_size), params, "local")
        glob = embed(patchify(x_glob, cfg.patch_size), params, "global")
        relay = ops.expand_batch(params["relay.tokens"], 1)
        R = cfg.relay_count
        step_i = transformer_block(ops.concat([relay, glob.tokens], axis=1), params.block(0), cfg)
        relay_half = ops.getitem(step_i, (slice(None), slice(0, R)))
        step_ii = transformer_block(ops.concat([relay_half, loc.tokens], axis=1), params.block(0), cfg)
        z_loc = seg_head(ops.getitem(step_ii, (slice(None), slice(R, None))), params, loc.grid)
        z_glob = seg_head(ops.getitem(step_i, (slice(None), slice(R, None))), params, glob.grid)
    np.testing.assert_allclose(out.z_loc.data, z_loc.data, atol=1e-12)
    np.testing.assert_allclose(out.z_glob.data, z_glob.data, atol=1e-12)


def test_global_pixel_reaches_local_logits_only_through_relays(make_params, rng):
    """at init the relay path is weak, so compare against exact zero in float64"""
    for R, should_change in ((2, True), (0, False)):
        params = make_params("SequentialRelay", relay_count=R, share_projector=True)
        x_loc, x_glob = images(rng, params.cfg, batch=1)
        bumped = x_glob.data.copy()
        bumped[0, 0, 0, 0] += 1.0
        with no_grad():
            a = forward_sequential(x_loc, x_glob, params).z_loc.data
            b = forward_sequential(x_loc, Tensor(bumped), params).z_loc.data
        assert a.dtype == np.float64
        assert (np.abs(a - b).max() > 0) == should_change


def test_local_logits_have_a_gradient_wrt_global_pixels(make_params, rng):
    for R in (2, 0):
        params = make_params("SequentialRelay", relay_count=R, share_projector=True)
        x_loc, x_glob = images(rng, params.cfg, batch=1)
        x_glob = Tensor(x_glob.data, requires_grad=True)
        out = forward_sequential(x_loc, x_glob, params)
        backward(ops.sum(out.z_loc))
        if R:
            assert x_glob.grad is not None and np.abs(x_glob.grad).max() > 0
        else:
            assert x_glob.grad is None


def test_parallel_relay_is_branch_mean(make_params, rng):
    params = make_params("ParallelRelay")
    x_loc, x_glob = images(rng, params.cfg)
    trace = ForwardTrace()
    with no_grad():
        forward_parallel(x_loc, x_glob, params, trace)
    for g, l, full in zip(trace.relay_branch_global, trace.relay_branch_local, trace.relay_full):
        np.testing.assert_allclose(full, 0.5 * (g + l), atol=1e-12)


def test_parallel_and_sequential_diverge(make_params, rng):
    seq = make_params("SequentialRelay", share_projector=True)
    par = make_params("ParallelRelay", share_projector=True)
    x_loc, x_glob = images(rng, seq.cfg, batch=1)
    with no_grad():
        a = forward_sequential(x_loc, x_glob, seq).z_loc.data
        b = forward_parallel(x_loc, x_glob, par).z_loc.data
    assert np.abs(a - b).max() > 1e-9


def test_unbatched_input(make_params, rng):
    params = make_params("SequentialRelay")
    x_loc, x_glob = images(rng, params.cfg, batch=1)
    with no_grad():
        single = forward_sequential(ops.getitem(x_loc, (0,)), ops.getitem(x_glob, (0,)), params)
        batched = forward_sequential(x_loc, x_glob, params)
    assert single.z_loc.ndim == 3
    np.testing.assert_allclose(single.z_loc.data, batched.z_loc.data[0], atol=1e-12)


def test_token_grid_mismatch(make_params, rng):
    params = make_params("SequentialRelay")
    x_loc, _ = images(rng, params.cfg)
    small = Tensor(rng.random((2, 3, 4, 4)), dtype="float64")
    with pytest.raises(DimensionError):
        forward_sequential(x_loc, small, params)


# ============================================================================
# VARIANT DISPATCH
# ============================================================================

def test_every_tag_has_a_handler():
    assert set(HANDLERS) == set(VariantTag)


def test_forward_variant_guards(make_params, rng):
    params = make_params("SequentialRelay")
    x_loc, x_glob = images(rng, params.cfg)
    with pytest.raises(VariantError):
        forward_variant(RelayVariant.parse("LocalOnly"), x_loc, None, params)
    with pytest.raises(VariantError):
        forward_variant(params.variant, x_loc, None, params)
    with pytest.raises(VariantError):
        forward_variant(params.variant, None, x_glob, params)


def test_local_only_never_needs_global(make_params, rng):
    params = make_params("LocalOnly")
    x_loc, x_glob = images(rng, params.cfg)
    with no_grad():
        a = forward_variant("LocalOnly", x_loc, None, params)
        b = forward_variant("LocalOnly", x_loc, x_glob, params)
    assert a.z_glob is None
    np.testing.assert_array_equal(a.z_loc.data, b.z_loc.data)


def test_registers_only(make_params, rng):
    params = make_params("RegistersOnly")
    x_loc, _ = images(rng, params.cfg)
    trace = ForwardTrace()
    with no_grad():
        out = forward_variant("RegistersOnly", x_loc, None, params, trace)
    assert out.z_glob is None
    assert out.z_loc.shape[-2:] == (params.cfg.local_size, params.cfg.local_size)
    assert trace.attn_local[0].shape[-1] == params.cfg.relay_count + params.cfg.tokens


def test_decision_fusion_averages_logits(make_params, rng):
    params = make_params("DecisionFusion")
    g = params.cfg.down_factor
    x_loc, x_glob = images(rng, params.cfg)
    with no_grad():
        out = forward_variant("DecisionFusion", x_loc, x_glob, params)
        z_loc = baseline(x_loc, params, "local").data
        z_glob = baseline(x_glob, params, "global")
        up = ops.upsample_nearest(crop_global(z_glob, g), g).data
    np.testing.assert_allclose(out.z_loc.data, 0.5 * (z_loc + up), atol=1e-12)
    np.testing.assert_allclose(out.z_glob.data, z_glob.data, atol=1e-12)
    with pytest.raises(DimensionError):
        fuse_decisions(out.z_loc, ops.getitem(z_glob, (Ellipsis, slice(0, 4), slice(0, 4))), g)


def test_token_concat_shapes(make_params, rng):
    params = make_params("TokenConcat")
    cfg = params.cfg
    x_loc, x_glob = images(rng, cfg)
    trace = ForwardTrace()
    with no_grad():
        out = forward_variant("TokenConcat", x_loc, x_glob, params, trace)
    assert out.z_loc.shape == out.z_glob.shape == (2, cfg.num_classes, cfg.local_size, cfg.local_size)
    assert trace.attn_local[0].shape[-1] == 2 * cfg.tokens


def test_global_only_upsamples_crop(make_params, rng):
    params = make_params("GlobalOnly")
    g = params.cfg.down_factor
    x_loc, x_glob = images(rng, params.cfg)
    with no_grad():
        out = forward_variant("GlobalOnly", None, x_glob, params)
        logits = local_resolution_logits(out, g)
    assert out.z_loc is None
    assert logits.shape == (2, params.cfg.num_classes, params.cfg.local_size, params.cfg.local_size)
    crop = crop_global(out.z_glob, g).data
    np.testing.assert_array_equal(logits.data[..., ::g, ::g], crop)


def test_fewer_blocks_runs_sequential_over_kept_blocks(make_params, rng):
    fewer = make_params("FewerBlocks:1")
    full = make_params("SequentialRelay", depth=1)
    x_loc, x_glob = images(rng, fewer.cfg)
    trace = ForwardTrace()
    with no_grad():
        a = forward_variant("FewerBlocks:1", x_loc, x_glob, fewer, trace)
        b = forward_variant("SequentialRelay", x_loc, x_glob, full)
    assert len(trace.relay_full) == 1
    np.testing.assert_allclose(a.z_loc.data, b.z_loc.data, atol=1e-12)


# ============================================================================
# END-TO-END GRADIENT
# ============================================================================

@pytest.mark.parametrize("variant", ["SequentialRelay", "ParallelRelay"])
def test_combined_loss_gradient_every_parameter(make_params, rng, variant):
    """tiny config, weights 1/0.1/0.1: autodiff vs float64 central differences"""
    params = make_params(variant, seed=11)
    cfg = params.cfg
    x_loc, x_glob = images(rng, cfg, batch=2)
    y = rng.integers(0, cfg.num_classes, size=(2, cfg.local_size, cfg.local_size)).astype(np.uint8)
    y[0, :2, :3] = 255
    # the consistency target must stay differentiable for finite differences to agree
    weights = LossWeights(w_loc=1.0, w_glo=0.1, w_con=0.1, stop_gradient_consistency=False)

    def loss():
        out = forward_variant(variant, x_loc, x_glob, params)
        return combined(out.z_loc, out.z_glob, y, weights, cfg.down_factor).total

    zero_grad(params.values())
    loss().backward()
    worst = {}
    for name, tensor in params.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        # exactly-zero gradients (e.g. key biases under softmax) sit at the noise floor
        worst[name] = relative_error(analytic, numerical_grad(loss, tensor, 1e-5), floor=1e-6)
    zero_grad(params.values())
    assert max(worst.values()) < 1e-3, max(worst, key=worst.get)
