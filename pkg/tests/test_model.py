import numpy as np
import pytest

from rednet import ops
from rednet.model import (
    DenseBlockConfig,
    REDNetConfig,
    build_model,
    crop_to,
    decoder_forward,
    default_config,
    dense_block_forward,
    edge_iteration,
    encoder_forward,
    pad_to_grid,
    parameter_count,
    rednet_forward,
)
from rednet.tensor import Tape, Tensor


def desk_model(seed=0, dtype=np.float64, recursion=2):
    return build_model(default_config(0.125, recursion), seed, dtype=dtype)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_default_plan_channels_and_layers():
    cfg = default_config(1.0)
    assert [b.channels for b in cfg.encoder] == [64, 64, 128, 256, 512]
    assert [b.num_layers for b in cfg.encoder] == [2, 2, 3, 3, 4]
    assert [b.kernel_size for b in cfg.encoder] == [5, 5, 3, 3, 3]
    assert [b.channels for b in cfg.decoder] == [512, 256, 128, 64, 64]


def test_width_multiplier_scales_channels_only():
    full = default_config(1.0)
    eighth = default_config(0.125)
    assert [b.channels for b in eighth.encoder] == [c // 8 for c in (64, 64, 128, 256, 512)]
    assert [b.num_layers for b in eighth.encoder] == [b.num_layers for b in full.encoder]
    assert [b.kernel_size for b in eighth.encoder] == [b.kernel_size for b in full.encoder]


def test_zero_layer_block_rejected():
    with pytest.raises(ValueError, match="at least one layer"):
        DenseBlockConfig(num_layers=0, kernel_size=3, channels=8)


def test_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        DenseBlockConfig(num_layers=1, kernel_size=4, channels=8)


def test_broken_mirror_rejected():
    cfg = default_config(0.125)
    bad_decoder = (cfg.decoder[1],) + cfg.decoder[1:]
    with pytest.raises(ValueError, match="mirror"):
        REDNetConfig(encoder=cfg.encoder, decoder=bad_decoder)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _expected_param_count(cfg):
    """Closed-form channel arithmetic, kept separate from the builder."""

    def block(in_c, blk):
        total = 0
        for k in range(blk.num_layers):
            cin = in_c + k * blk.channels
            total += blk.channels * cin * blk.kernel_size**2 + blk.channels  # conv
            total += 2 * blk.channels  # batch-norm affine
        return total

    total = 0
    c = cfg.in_channels
    for blk in cfg.encoder:
        total += block(c, blk)
        c = blk.channels
    prev = cfg.encoder[-1].channels
    for j, blk in enumerate(cfg.decoder, start=1):
        if j == 1:
            cin = prev
        else:
            total += prev * blk.channels * 16  # 4x4 upsampling kernel, no bias
            cin = blk.channels + cfg.encoder[5 - j].channels
        total += block(cin, blk)
        prev = blk.channels
    return total + prev * 1 + 1  # 1x1 head


@pytest.mark.parametrize("width", [0.125, 0.25])
def test_parameter_count_matches_closed_form(width):
    cfg = default_config(width)
    params = build_model(cfg, seed=0)
    assert parameter_count(params) == _expected_param_count(cfg)


def test_recursion_depth_adds_no_parameters():
    counts = {
        L: parameter_count(build_model(default_config(0.125, recursion=L), seed=0))
        for L in (0, 1, 2, 4)
    }
    assert len(set(counts.values())) == 1


def test_same_seed_builds_are_bitwise_identical():
    a = build_model(default_config(0.125), seed=7)
    b = build_model(default_config(0.125), seed=7)
    for path, t in a.items():
        np.testing.assert_array_equal(t.data, b[path].data)


def test_different_seed_builds_differ():
    a = build_model(default_config(0.125), seed=1)
    b = build_model(default_config(0.125), seed=2)
    assert any(not np.array_equal(t.data, b[p].data) for p, t in a.items())


# ---------------------------------------------------------------------------
# dense block
# ---------------------------------------------------------------------------

def test_dense_block_channel_consumption():
    # 2-layer block, 64 per layer, 4 input channels: layer 0 consumes 4,
    # layer 1 consumes 4 + 64 = 68, and the block emits the last layer's 64.
    cfg = default_config(1.0)
    params = build_model(default_config(0.125), seed=0)  # desk build for real tensors
    assert params["enc1/l0/conv/w"].shape[1] == 4
    assert params["enc1/l1/conv/w"].shape[1] == 4 + params.config.encoder[0].channels
    full = __import__("rednet.model", fromlist=["ModelParameters"]).ModelParameters(cfg)
    assert full["enc1/l0/conv/w"].shape == (64, 4, 5, 5)
    assert full["enc1/l1/conv/w"].shape == (64, 68, 5, 5)


def test_single_layer_block_is_plain_conv_bn_act(rng):
    blk = DenseBlockConfig(num_layers=1, kernel_size=3, channels=4)
    cfg = REDNetConfig(encoder=(blk,) * 5, decoder=(blk,) * 5, in_channels=4)
    params = build_model(cfg, seed=0)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    out = dense_block_forward(x, blk, params, "enc1", "train")
    assert out.shape == (1, 4, 8, 8)
    assert "enc1/l1/conv/w" not in params


def test_dense_block_preserves_spatial_size(rng):
    params = desk_model()
    x = Tensor(rng.standard_normal((2, 4, 16, 16)))
    out = dense_block_forward(x, params.config.encoder[0], params, "enc1", "train")
    assert out.shape[2:] == (16, 16)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def test_encoder_resolutions_and_channels(rng):
    params = desk_model()
    x = Tensor(rng.standard_normal((1, 4, 64, 64)))
    bottleneck, skips = encoder_forward(x, params, "train")
    assert [s.shape[2] for s in skips] == [64, 32, 16, 8]
    assert bottleneck.shape[2:] == (4, 4)
    # full-scale plan: skips 64,64,128,256 and a 512-channel bottleneck
    assert [b.channels for b in default_config(1.0).encoder[:4]] == [64, 64, 128, 256]
    assert default_config(1.0).encoder[4].channels == 512
    assert [s.shape[1] for s in skips] == [8, 8, 16, 32]
    assert bottleneck.shape[1] == 64


def test_encoder_rejects_nondivisible_input(rng):
    params = desk_model()
    with pytest.raises(ValueError, match="pad_to_grid"):
        encoder_forward(Tensor(rng.standard_normal((1, 4, 60, 64))), params, "train")


def test_decoder_restores_resolution_and_range(rng):
    params = desk_model()
    x = Tensor(rng.standard_normal((2, 4, 32, 32)))
    bottleneck, skips = encoder_forward(x, params, "train")
    edge = decoder_forward(bottleneck, skips, params, "train")
    assert edge.shape == (2, 1, 32, 32)
    assert edge.data.min() > 0.0 and edge.data.max() < 1.0


def test_zeroing_a_skip_changes_the_output(rng):
    params = desk_model()
    x = Tensor(rng.standard_normal((1, 4, 32, 32)))
    bottleneck, skips = encoder_forward(x, params, "train")
    base = decoder_forward(bottleneck, skips, params, "train").data
    zeroed = list(skips)
    zeroed[0] = Tensor(np.zeros_like(skips[0].data))
    altered = decoder_forward(bottleneck, zeroed, params, "train").data
    assert np.abs(base - altered).max() > 1e-12


# ---------------------------------------------------------------------------
# recursion
# ---------------------------------------------------------------------------

def test_forward_map_count_and_range(rng):
    params = desk_model()
    x = rng.random((1, 3, 32, 32))
    assert len(rednet_forward(x, params, 0, "train").edge_maps) == 1
    result = rednet_forward(x, params, 2, "train")
    assert len(result.edge_maps) == 3
    for m in result.edge_maps:
        assert m.shape == (1, 1, 32, 32)
        assert m.data.min() > 0.0 and m.data.max() < 1.0


def test_manual_feedback_equals_deeper_recursion(rng):
    params = desk_model()
    x = rng.random((1, 3, 32, 32))
    rednet_forward(x, params, 0, "train")  # populate running stats
    deep = rednet_forward(x, params, 2, "infer")
    shallow = rednet_forward(x, params, 1, "infer")
    image = Tensor(np.asarray(x), dtype=params.dtype)
    manual = edge_iteration(image, shallow.edge_maps[-1], params, "infer")
    np.testing.assert_array_equal(manual.data, deep.edge_maps[-1].data)


def test_forward_deterministic(rng):
    x = rng.random((1, 3, 32, 32))
    a = rednet_forward(x, desk_model(seed=3), 1, "train").edge_maps[-1].data
    b = rednet_forward(x, desk_model(seed=3), 1, "train").edge_maps[-1].data
    np.testing.assert_array_equal(a, b)


def test_gradient_reaches_nearly_all_parameters(rng):
    from rednet.training import LossWeights, deep_supervised_loss

    params = desk_model()
    x = rng.random((2, 3, 32, 32))
    gt = (rng.random((2, 1, 32, 32)) < 0.1).astype(np.float64)
    with Tape() as tape:
        result = rednet_forward(x, params, 2, "train")
        loss = deep_supervised_loss(result.edge_maps, gt, LossWeights.for_depth(2))
    tape.backward(loss)
    zero = sum(
        1 for _, t in params.items() if t.grad is None or not np.any(t.grad)
    )
    assert zero / len(params.tensors) < 0.05


# ---------------------------------------------------------------------------
# pad / crop
# ---------------------------------------------------------------------------

def test_pad_to_grid_481x321():
    img = np.zeros((1, 3, 481, 321))
    padded, record = pad_to_grid(img)
    assert padded.shape == (1, 3, 496, 336)
    assert record == (481, 321)


def test_pad_to_grid_divisible_is_noop(rng):
    img = rng.random((1, 3, 64, 64))
    padded, record = pad_to_grid(img)
    assert padded.shape == img.shape and record == (64, 64)
    np.testing.assert_array_equal(padded, img)


def test_pad_then_crop_is_lossless(rng):
    img = rng.random((2, 3, 37, 51))
    padded, record = pad_to_grid(img)
    assert padded.shape[-2] % 16 == 0 and padded.shape[-1] % 16 == 0
    np.testing.assert_array_equal(crop_to(padded, record), img)


def test_pad_reflects_content(rng):
    img = rng.random((1, 1, 18, 16))
    padded, _ = pad_to_grid(img)
    # row 18 mirrors row 16 (reflection about the last row)
    np.testing.assert_array_equal(padded[0, 0, 18], img[0, 0, 16])
