import numpy as np
import pytest

from oracles import KinkRecorder, smooth_segment_gradient_check

from thermalgan import tensor as T
from thermalgan.models import (
    ConfigError,
    DiscriminatorSpec,
    GeneratorSpec,
    build_patchgan,
    build_resnet_generator,
    build_unet_generator,
    patch_extent,
)
from thermalgan.rng import RngSeed
from thermalgan.tensor import Tensor


def params_equal(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_unet_forward_shape_and_range():
    g = build_unet_generator(GeneratorSpec(in_channels=3, image_side=64, levels=4), RngSeed(0))
    with T.no_grad():
        out = g(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert out.shape == (1, 1, 64, 64)
    assert out.data.min() >= -1 and out.data.max() <= 1


def test_unet_range_on_extreme_inputs():
    g = build_unet_generator(GeneratorSpec(base_width=8, image_side=32, levels=3), RngSeed(1))
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32) * 100
    with T.no_grad():
        out = g(Tensor(x)).data
    assert np.all(np.abs(out) <= 1)


@pytest.mark.parametrize("base,levels", [(32, 4), (8, 5), (16, 2)])
def test_unet_skip_channel_arithmetic(base, levels):
    g = build_unet_generator(GeneratorSpec(base_width=base, levels=levels, image_side=64), RngSeed(0))
    enc = [base * min(2 ** (k - 1), 8) for k in range(1, levels + 1)]
    assert g.encoder_output_channels() == enc
    # innermost decoder sees only the bottleneck; every other level concatenates
    # its encoder skip with the upsampled output of the level below
    expected = []
    for k in range(1, levels + 1):
        if k == levels:
            expected.append(enc[k - 1])
        else:
            upsampled = enc[k - 1]  # decoder level k+1 emits the width of encoder level k
            expected.append(enc[k - 1] + upsampled)
    assert g.decoder_input_channels() == expected


def test_unet_same_seed_same_parameters():
    spec = GeneratorSpec(base_width=8, image_side=32)
    assert params_equal(build_unet_generator(spec, RngSeed(3)), build_unet_generator(spec, RngSeed(3)))
    assert not params_equal(build_unet_generator(spec, RngSeed(3)), build_unet_generator(spec, RngSeed(4)))


def test_unet_rejects_indivisible_side():
    with pytest.raises(ConfigError, match="divisible"):
        build_unet_generator(GeneratorSpec(image_side=40, levels=4), RngSeed(0))


def test_unet_rejects_wrong_channel_count():
    g = build_unet_generator(GeneratorSpec(base_width=4, image_side=16, levels=2), RngSeed(0))
    with pytest.raises(T.ContractError):
        g(Tensor(np.zeros((1, 1, 16, 16), np.float32)))


def test_patchgan_extent_on_64px():
    spec = DiscriminatorSpec(in_channels=4, n_layers=3, base_width=8, image_side=64)
    d = build_patchgan(spec, RngSeed(0))
    x = Tensor(np.zeros((2, 4, 64, 64), np.float32))
    with T.no_grad():
        feats = d.features(x)
        out = d(x)
    # three stride-2 halvings: 64 -> 32 -> 16 -> 8, then the 4x4 stride-1 head
    assert feats.shape[2:] == (8, 8)
    assert out.shape == (2, 1, 7, 7)
    assert patch_extent(spec) == 7


def test_patchgan_same_seed_same_parameters():
    spec = DiscriminatorSpec(n_layers=2, base_width=4, image_side=32)
    assert params_equal(build_patchgan(spec, RngSeed(5)), build_patchgan(spec, RngSeed(5)))


def test_patchgan_rejects_vanishing_patch_map():
    with pytest.raises(ConfigError, match="no patch map"):
        build_patchgan(DiscriminatorSpec(n_layers=6, image_side=64), RngSeed(0))


def test_resnet_generator_shapes():
    g = build_resnet_generator(GeneratorSpec(3, 1, base_width=4, n_blocks=2, image_side=32), RngSeed(0))
    back = build_resnet_generator(GeneratorSpec(1, 3, base_width=4, n_blocks=2, image_side=32), RngSeed(1))
    x = Tensor(np.zeros((2, 3, 32, 32), np.float32))
    with T.no_grad():
        y = g(x)
        z = back(y)
    assert y.shape == (2, 1, 32, 32) and z.shape == (2, 3, 32, 32)
    assert np.all(np.abs(z.data) <= 1)


def test_resnet_rejects_bad_side():
    with pytest.raises(ConfigError):
        build_resnet_generator(GeneratorSpec(image_side=30), RngSeed(0))


@pytest.mark.parametrize("pname", ["down1.weight", "down2_norm.gain", "down3.weight", "up2.weight"])
def test_unet_end_to_end_gradient_on_one_parameter(pname, monkeypatch):
    g = build_unet_generator(GeneratorSpec(base_width=4, levels=3, image_side=16), RngSeed(2))
    for name, q in g.named_parameters():
        if name.endswith("weight"):
            # larger weights put pre-activations well clear of the +-1e-3 step
            q.data *= np.float32(10.0)
    recorder = KinkRecorder(monkeypatch)

    # pick the input whose activations sit farthest from any kink
    def margin(seed):
        x = np.random.default_rng(seed).uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32)
        with T.no_grad():
            recorder.capture(lambda: g(Tensor(x)))
        return recorder.margin, x

    _, xv = max((margin(s) for s in range(20)), key=lambda m: m[0])
    rng = np.random.default_rng(1)
    x = Tensor(xv)
    y = Tensor(rng.uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32))
    p = dict(g.named_parameters())[pname]
    T.backward(T.mse_loss(g(x), y))

    def loss_value():
        with T.no_grad():
            out = g(x).data.astype(np.float64)
        return float(np.mean((out - y.data) ** 2))

    err, used = smooth_segment_gradient_check(loss_value, p, p.grad, recorder, rng, n_coords=12)
    assert used >= 6
    assert err < 1e-2
