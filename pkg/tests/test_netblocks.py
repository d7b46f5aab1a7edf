import numpy as np
import pytest

from cropseq import functional as F
from cropseq.blocks import (Bottleneck, ConvLayer, ConvLayerSpec, DenseBlock, DenseBlockSpec,
                            TransitionDown, TransitionUp)
from cropseq.network import (NetworkConfig, SequenceSample, build_network, forward_sequence,
                             receptive_field, stack_receptive_field)
from cropseq.tensor import Tensor, no_grad
from oracles import central_difference, rel_error, rf_by_impulse

TINY = dict(sequence_length=2, height=16, width=16, depth=1, stem_maps=4, block_layers=1,
            growth_rate=2, fusion_maps=3, merge_maps=3)


def module_gradcheck(module, x, call, seed=0, max_entries=6, tol=1e-4):
    """Compare analytic parameter and input gradients of ``sum(call(x) * probe)``.

    Dropout masks are reproduced by reseeding the generator on every call.
    """
    probe_rng = np.random.default_rng(seed + 100)
    params = [p for _, p in module.named_parameters()]
    jit = np.random.default_rng(seed + 1000)
    for p in params:  # off the zero-bias init, away from ReLU kinks
        p.data += jit.normal(scale=0.1, size=p.shape)
    xt = Tensor(x, requires_grad=True)
    out = call(xt, np.random.default_rng(seed))
    probe = probe_rng.normal(size=out.shape)
    F.sum(F.mul(out, probe)).backward()

    def f():
        with no_grad():
            return float((call(Tensor(x), np.random.default_rng(seed)).data * probe).sum())

    arrays = [x] + [p.data for p in params]
    grads = [xt.grad] + [p.grad for p in params]
    numeric = central_difference(f, arrays, max_entries=max_entries, rng=np.random.default_rng(seed))
    worst = max(rel_error(g, n) for g, n in zip(grads, numeric))
    assert worst < tol, worst
    return worst


def test_conv_layer_order_and_grads():
    rng = np.random.default_rng(0)
    layer = ConvLayer(2, ConvLayerSpec(3, 3, dropout=0.25), rng)
    x = rng.normal(size=(2, 2, 5, 5))
    module_gradcheck(layer, x, lambda t, r: layer(t, r))
    layer.eval()
    y = layer(Tensor(x)).data
    z = np.maximum(F.conv2d(Tensor(x), layer.weight, layer.bias).data, 0)
    ref = (z - layer.running_mean[:, None, None]) / np.sqrt(layer.running_var[:, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref * layer.gamma.data[:, None, None] + layer.beta.data[:, None, None])


def test_conv_layer_3d_grads():
    rng = np.random.default_rng(1)
    spec = ConvLayerSpec(3, 2, dilation=2, dims=3, temporal=3, temporal_padding="valid", dropout=0.2)
    layer = ConvLayer(2, spec, rng)
    x = rng.normal(size=(2, 2, 3, 5, 5))
    module_gradcheck(layer, x, lambda t, r: layer(t, r))
    assert layer(Tensor(x), rng).shape == (2, 2, 1, 5, 5)


def test_dense_block_emits_only_new_maps():
    rng = np.random.default_rng(2)
    blk = DenseBlock(3, DenseBlockSpec(3, 2), rng, dropout=0.1)
    assert blk.out_maps == 6
    x = rng.normal(size=(2, 3, 4, 4))
    assert blk(Tensor(x), rng).shape == (2, 6, 4, 4)
    # layer i sees input + i*G maps through its bottleneck (2G outputs)
    assert [b.in_maps for b in blk.bottlenecks] == [3, 5, 7]
    assert all(b.out_maps == 4 for b in blk.bottlenecks)
    module_gradcheck(blk, x, lambda t, r: blk(t, r))


def test_transitions():
    rng = np.random.default_rng(3)
    down = TransitionDown(6, rng)
    x = rng.normal(size=(2, 6, 8, 8))
    assert down(Tensor(x)).shape == (2, 3, 4, 4)
    module_gradcheck(down, x, lambda t, r: down(t, r))
    up = TransitionUp(3, 2, DenseBlockSpec(1, 2), rng)
    skip = Tensor(rng.normal(size=(2, 2, 8, 8)))
    y = rng.normal(size=(2, 3, 4, 4))
    assert up(Tensor(y), skip).shape == (2, 2, 8, 8)
    module_gradcheck(up, y, lambda t, r: up(t, skip, r))
    with pytest.raises(ValueError):
        up(Tensor(y), Tensor(np.zeros((2, 2, 6, 6))))
    with pytest.raises(ValueError):
        up(Tensor(y), None)


def test_bottleneck_is_pointwise():
    b = Bottleneck(5, 2, np.random.default_rng(0))
    assert b.weight.shape == (2, 5, 1, 1)


@pytest.mark.parametrize("sequential", [True, False])
def test_network_output_shapes(sequential):
    cfg = NetworkConfig(**{**TINY, "sequence_length": 3, "sequential_module": sequential})
    net = build_network(cfg, np.random.default_rng(0))
    x = net.prepare(np.random.default_rng(1).random((2, 3, 1, 16, 16)))
    assert net.forward(x, None, np.random.default_rng(2)).shape == (2, 3, 3, 16, 16)
    assert net.forward(x, [2], np.random.default_rng(2)).shape == (2, 1, 3, 16, 16)


def test_current_frame_output_matches_full_output():
    cfg = NetworkConfig(**TINY)
    net = build_network(cfg, np.random.default_rng(0)).eval()
    x = net.prepare(np.random.default_rng(1).random((2, 2, 1, 16, 16)))
    with no_grad():
        full = net.forward(x).data
        cur = net.forward(x, [1]).data
    np.testing.assert_allclose(full[:, 1:], cur, atol=1e-12)


def test_sequence_code_depends_on_past_frames():
    cfg = NetworkConfig(**TINY)
    net = build_network(cfg, np.random.default_rng(0)).eval()
    x = net.prepare(np.random.default_rng(1).random((1, 2, 1, 16, 16)))
    x2 = x.copy()
    x2[0, 0] = net.prepare(np.random.default_rng(9).random((1, 2, 1, 16, 16)))[0, 0]
    with no_grad():
        a = net.forward(x, [1]).data
        b = net.forward(x2, [1]).data
    assert not np.allclose(a, b)
    base = build_network(cfg.replace(sequential_module=False), np.random.default_rng(0)).eval()
    with no_grad():
        np.testing.assert_allclose(base.forward(x, [1]).data, base.forward(x2, [1]).data)


def test_forward_sequence_distributions():
    cfg = NetworkConfig(**TINY)
    net = build_network(cfg, np.random.default_rng(0))
    frames = np.random.default_rng(2).random((2, 1, 16, 16))
    sample = SequenceSample(frames, np.zeros((2, 16, 16), np.uint8), np.zeros((2, 3)))
    masks = forward_sequence(net, sample)
    assert len(masks) == 2
    for m in masks:
        assert m.shape == (3, 16, 16)
        np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(height=90, depth=2).validate()
    with pytest.raises(ValueError):
        NetworkConfig(block_layers=(1, 2)).validate()
    with pytest.raises(ValueError):
        NetworkConfig(fusion_kernels=(4, 7, 9)).validate()
    cfg = NetworkConfig(block_layers=(1, 2, 3))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_state_dict_roundtrip():
    cfg = NetworkConfig(**TINY)
    a = build_network(cfg, np.random.default_rng(0))
    b = build_network(cfg, np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)


def test_receptive_field_values():
    assert receptive_field(NetworkConfig())["fusion"] == (49, 49)
    assert receptive_field(NetworkConfig(spatial_context=False))["fusion"] == (13, 13)
    assert rf_by_impulse((5, 7, 9), (1, 2, 4)) == 49
    assert stack_receptive_field([(3, 2, 1), (3, 1, 1)]) == (7, 2)


def test_receptive_field_agrees_with_impulse_response():
    # the fusion stack alone, measured on an actual network by perturbing one code cell
    cfg = NetworkConfig(**{**TINY, "height": 64, "width": 64, "fusion_kernels": (3, 5, 3),
                           "fusion_dilations": (1, 2, 1)})
    net = build_network(cfg, np.random.default_rng(0)).eval()
    expected = receptive_field(cfg)["fusion"][0]
    assert expected == rf_by_impulse((3, 5, 3), (1, 2, 1))
    rng = np.random.default_rng(5)
    codes = rng.normal(size=(1, 2, net.code_maps, 32, 32))
    with no_grad():
        base = net.fuse(Tensor(codes)).data
        bumped = codes.copy()
        bumped[0, :, :, 16, 16] += 5.0
        diff = np.abs(net.fuse(Tensor(bumped)).data - base).sum(axis=(0, 1))
    rows = np.nonzero(diff.sum(axis=1) > 1e-12)[0]
    assert rows.max() - rows.min() + 1 == expected


def test_frame_order_changes_sequence_code():
    cfg = NetworkConfig(**{**TINY, "sequence_length": 3})
    net = build_network(cfg, np.random.default_rng(0)).eval()
    x = net.prepare(np.random.default_rng(3).random((1, 3, 1, 16, 16)))
    with no_grad():
        code, _ = net.encode(Tensor(x[0]))
        codes = code.data[None]
        a = net.fuse(Tensor(codes)).data
        b = net.fuse(Tensor(codes[:, [1, 0, 2]])).data
    assert not np.allclose(a, b)


def test_encoder_weights_shared_across_frames():
    cfg = NetworkConfig(**{**TINY, "sequence_length": 3})
    net = build_network(cfg, np.random.default_rng(0)).eval()
    frame = net.prepare(np.random.default_rng(4).random((1, 3, 1, 16, 16)))[0, :1]
    x = np.repeat(frame, 3, axis=0)  # identical frames
    net.stem.weight.data *= 1.1
    with no_grad():
        code, _ = net.encode(Tensor(x))
    np.testing.assert_array_equal(code.data[0], code.data[1])
    np.testing.assert_array_equal(code.data[0], code.data[2])
