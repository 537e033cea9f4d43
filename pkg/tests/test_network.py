import numpy as np
import pytest
import torch

from gliomapipe.errors import IncompatibleWeights, IoError, ShapeError
from gliomapipe.losses import soft_dice_loss
from gliomapipe.network import (
    NetworkSpec,
    build_network,
    forward,
    get_weights,
    load_weights,
    network_from_weights,
    predict,
    save_weights,
    set_weights,
)

TINY = NetworkSpec((8, 8, 4), (4, 8, 12), (8, 4), dense_block_depth=2)


def test_default_width_progression_and_output():
    spec = NetworkSpec((32, 32, 4))
    net = build_network(spec, seed=0)
    assert net.channel_progression() == [64, 128, 256, 128, 64]
    out = forward(net, np.random.default_rng(0).normal(size=(2, 32, 32, 4)))
    assert tuple(out.shape) == (2, 32, 32, 1)
    assert torch.all((out > 0) & (out < 1))


def test_dense_connectivity_metadata():
    net = build_network(NetworkSpec((16, 16, 4)), seed=0)
    rows = net.layer_metadata()
    for module in net.dense_modules():
        g = module.growth
        ins = [layer.in_channels for layer in module.layers]
        assert ins == [module.in_channels + k * g for k in range(len(module.layers))]
        assert module.transition.in_channels == module.in_channels + len(module.layers) * g
        assert module.transition.out_channels == module.out_channels
    names = [r["module"] for r in rows]
    assert names.index("enc1") < names.index("enc3") < names.index("dec2") < names.index("head")


def test_bad_input_shapes():
    with pytest.raises(ShapeError):
        NetworkSpec((30, 32, 4))
    with pytest.raises(ShapeError):
        NetworkSpec((32, 32, 3))
    with pytest.raises(ValueError):
        NetworkSpec((32, 32, 4), (64, 64, 128), (64, 64))
    net = build_network(TINY)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 8, 8, 3)))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 12, 8, 4)))


def test_fully_convolutional_predict_other_size():
    net = build_network(TINY)
    assert predict(net, np.zeros((3, 16, 24, 4), np.float32)).shape == (3, 16, 24)


def test_same_seed_same_weights():
    a = get_weights(build_network(TINY, seed=5))
    b = get_weights(build_network(TINY, seed=5))
    c = get_weights(build_network(TINY, seed=6))
    assert a.equals(b) and a.checksum() == b.checksum()
    assert not a.equals(c)


def test_weights_roundtrip_bit_exact(tmp_path):
    w = get_weights(build_network(TINY, seed=1)).with_metadata(region="WT")
    path = save_weights(w, tmp_path / "w.safetensors")
    back = load_weights(path)
    assert back.equals(w) and back.metadata["region"] == "WT"
    save_weights(back, tmp_path / "w2.safetensors")
    assert path.read_bytes() == (tmp_path / "w2.safetensors").read_bytes()
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(
        predict(build_network(TINY, seed=1), x), predict(network_from_weights(back, TINY), x)
    )


def test_weights_are_read_only():
    w = get_weights(build_network(TINY))
    with pytest.raises(ValueError):
        w.tensors[w.names[0]][...] = 0


def test_incompatible_weights():
    w = get_weights(build_network(TINY))
    other = build_network(NetworkSpec((8, 8, 4), (4, 8, 16), (8, 4), dense_block_depth=2))
    with pytest.raises(IncompatibleWeights):
        set_weights(other, w)
    # same architecture at another input size is fine
    set_weights(build_network(TINY.with_input(16, 16)), w)


def test_corrupt_weight_file(tmp_path):
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x10\x00\x00\x00\x00\x00\x00\x00garbage")
    with pytest.raises(IoError):
        load_weights(bad)
    with pytest.raises(IoError):
        load_weights(tmp_path / "missing.safetensors")


def test_parameter_gradient_matches_finite_difference():
    torch.manual_seed(0)
    net = build_network(TINY, seed=3).double()
    x = torch.tensor(np.random.default_rng(1).normal(size=(2, 8, 8, 4)))
    target = torch.tensor((np.random.default_rng(2).random((2, 8, 8, 1)) > 0.5).astype(float))

    def loss_value():
        return soft_dice_loss(net(x), target)

    net.zero_grad()
    loss_value().backward()
    rng = np.random.default_rng(4)
    checked = 0
    for name, param in net.named_parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = flat[i].item()
            h = 1e-6
            with torch.no_grad():
                flat[i] = old + h
                fp = loss_value().item()
                flat[i] = old - h
                fm = loss_value().item()
                flat[i] = old
            fd = (fp - fm) / (2 * h)
            analytic = grad[i].item()
            scale = max(abs(fd), abs(analytic), 1e-7)
            assert abs(fd - analytic) / scale < 1e-3, name
            checked += 1
    assert checked > 20
