import struct

import numpy as np
import pytest

from fractoseg.optim import Adam, cross_entropy_loss
from fractoseg.tensor_ops import ShapeError
from fractoseg.unet import (
    DimensionMismatchError,
    FormatError,
    MissingTensorError,
    TruncatedFileError,
    UNetConfig,
    UnknownTensorError,
    build,
    import_encoder,
    infer_config,
    load_weights,
    parameter_count,
    parameter_shapes,
    read_tensors,
    save_weights,
    write_tensors,
)

from oracles import numeric_grad, rel_error

TOY = UNetConfig(stages=2, encoder_channels=(3, 4), conv_repeats=(2, 2))


@pytest.fixture(scope="module")
def desk():
    return build(UNetConfig.desk(3), seed=0)


def test_desk_forward_shape(desk):
    x = np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32)
    assert desk.forward(x).shape == (2, 3, 64, 64)


def test_non_square_input(desk):
    assert desk.forward(np.zeros((1, 1, 96, 64), np.float32)).shape == (1, 3, 96, 64)


def test_indivisible_input_is_rejected_with_padding_hint(desk):
    with pytest.raises(ShapeError, match="pad"):
        desk.forward(np.zeros((1, 1, 60, 64), np.float32))
    full = build(UNetConfig(stages=5, encoder_channels=(2, 2, 2, 2, 2), conv_repeats=(1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError, match="divisible by 32"):
        full.forward(np.zeros((1, 1, 630, 630), np.float32))


def test_five_stage_bottleneck_is_20x20():
    cfg = UNetConfig(stages=5, encoder_channels=(2, 2, 2, 2, 2), conv_repeats=(1, 1, 1, 1, 1))
    model = build(cfg)
    logits = model.forward(np.zeros((1, 1, 640, 640), np.float32))
    assert logits.shape == (1, 3, 640, 640)
    pools = [e for e in model._tape if e[0] == "pool"]
    assert pools[-1][2].shape[2:] == (20, 20)


def test_full_scale_layout():
    cfg = UNetConfig.full_scale()
    shapes = parameter_shapes(cfg)
    encoder_convs = [n for n in shapes if n.startswith("enc") and n.endswith("kernel")]
    # the 13 convolutional layers of VGG16 (the 3 dense layers are dropped)
    assert len(encoder_convs) == 13
    assert shapes["dec5.up.kernel"] == (512, 512, 2, 2)
    assert shapes["dec5.conv1.kernel"] == (512, 1024, 3, 3)
    assert shapes["head.kernel"] == (3, 64, 1, 1)
    assert parameter_count(cfg) == 39_291_331
    assert parameter_count(UNetConfig.desk(3)) < 500_000


def test_same_seed_same_parameters():
    a, b = build(UNetConfig.desk(3), seed=7), build(UNetConfig.desk(3), seed=7)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build(UNetConfig.desk(3), seed=8)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith("kernel"))


def test_biases_zero_and_he_scale():
    m = build(UNetConfig.full_scale(), seed=1)
    assert not any(m.params[k].any() for k in m.params if k.endswith("bias"))
    k = m.params["enc3.conv2.kernel"]
    assert k.std() == pytest.approx(np.sqrt(2 / (256 * 9)), rel=0.02)


def test_forward_deterministic(desk):
    x = np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32)
    assert desk.forward(x).tobytes() == desk.forward(x).tobytes()


def end_to_end_fd(seed, n_params=50, eps=1e-5):
    r = np.random.default_rng(seed)
    model = build(TOY, seed=seed, dtype=np.float64)
    for name in model.params:
        if name.endswith("bias"):
            model.params[name][...] = r.normal(0, 0.1, model.params[name].shape)
    x = r.random((1, 1, 16, 16))
    t = r.integers(0, 3, (1, 16, 16))

    def loss():
        return cross_entropy_loss(model.forward(x), t)[0]

    _, g = cross_entropy_loss(model.forward(x), t)
    grads = model.backward(g)
    names = sorted(model.params)
    flat_sizes = [model.params[n].size for n in names]
    offsets = np.cumsum([0] + flat_sizes)
    picks = r.choice(offsets[-1], size=n_params, replace=False)
    worst = 0.0
    for p in picks:
        i = int(np.searchsorted(offsets, p, side="right") - 1)
        name, j = names[i], int(p - offsets[i])
        fd = numeric_grad(loss, model.params[name], eps, indices=[j]).reshape(-1)[j]
        worst = max(worst, rel_error(grads[name].reshape(-1)[j], fd, floor=1e-7))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_matches_finite_differences(seed):
    assert end_to_end_fd(seed) < 1e-3


def test_backward_requires_forward():
    m = build(TOY)
    with pytest.raises(RuntimeError, match="without"):
        m.backward(np.zeros((1, 3, 16, 16), np.float32))
    m.forward(np.zeros((1, 1, 16, 16), np.float32))
    m.backward(np.zeros((1, 3, 16, 16), np.float32))
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((1, 3, 16, 16), np.float32))


def test_zero_grad_logits_give_zero_gradients():
    m = build(TOY, seed=2)
    m.forward(np.random.default_rng(0).random((1, 1, 16, 16), dtype=np.float32))
    grads = m.backward(np.zeros((1, 3, 16, 16), np.float32))
    assert set(grads) == set(m.params)
    assert not any(g.any() for g in grads.values())


def test_freezing_encoder_masks_only_encoder():
    x = np.random.default_rng(1).random((1, 1, 16, 16), dtype=np.float32)
    t = np.random.default_rng(2).integers(0, 3, (1, 16, 16))
    m = build(TOY, seed=3)
    _, g = cross_entropy_loss(m.forward(x), t)
    free = m.backward(g)
    m.freeze_encoder()
    m.forward(x)
    frozen = m.backward(g)
    for name in m.params:
        if name.startswith("enc"):
            assert not frozen[name].any()
        else:
            assert frozen[name].tobytes() == free[name].tobytes()


def test_save_load_round_trip(tmp_path, desk):
    path = tmp_path / "w.fseg"
    save_weights(desk, path)
    loaded = load_weights(path)
    assert loaded.config == desk.config
    assert all(loaded.params[k].tobytes() == desk.params[k].tobytes() for k in desk.params)


def test_container_layout_is_exact(tmp_path):
    path = tmp_path / "t.fseg"
    write_tensors(path, {"ab": np.array([[1.0, 2.0]], np.float32)})
    raw = path.read_bytes()
    expected = (b"FSEG" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2)
                + struct.pack("<2Q", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert raw == expected


def test_corrupted_magic(tmp_path, desk):
    path = tmp_path / "w.fseg"
    save_weights(desk, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XSEG"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_weights(path)


def test_bad_version(tmp_path):
    path = tmp_path / "w.fseg"
    path.write_bytes(b"FSEG" + struct.pack("<II", 2, 0))
    with pytest.raises(FormatError, match="version"):
        read_tensors(path)


def test_truncated_file(tmp_path, desk):
    path = tmp_path / "w.fseg"
    save_weights(desk, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError):
        load_weights(path)


def test_unknown_tensor(tmp_path, desk):
    path = tmp_path / "w.fseg"
    write_tensors(path, {**desk.params, "extra.kernel": np.zeros(2, np.float32)})
    with pytest.raises(UnknownTensorError, match="extra.kernel"):
        load_weights(path)


def test_dimension_mismatch_names_tensor(tmp_path, desk):
    path = tmp_path / "w.fseg"
    save_weights(desk, path)
    wide = UNetConfig(stages=3, encoder_channels=(64, 128, 256), conv_repeats=(2, 2, 3))
    with pytest.raises(DimensionMismatchError, match="enc1.conv1.kernel"):
        load_weights(path, wide)


def test_infer_config(desk):
    assert infer_config(desk.params) == desk.config


def test_import_encoder(tmp_path):
    donor = build(UNetConfig.desk(3), seed=10)
    path = tmp_path / "donor.fseg"
    save_weights(donor, path)
    model = import_encoder(build(UNetConfig.desk(3), seed=11), path)
    for name in model.params:
        same = model.params[name].tobytes() == donor.params[name].tobytes()
        assert same == name.startswith("enc") or name.endswith("bias")


def test_import_encoder_freeze_blocks_updates(tmp_path):
    donor = build(UNetConfig.desk(3), seed=10)
    path = tmp_path / "donor.fseg"
    save_weights(donor, path)
    model = import_encoder(build(UNetConfig.desk(3), seed=11), path, freeze=True)
    before = {k: v.copy() for k, v in model.params.items()}
    x = np.random.default_rng(0).random((1, 1, 32, 32), dtype=np.float32)
    _, g = cross_entropy_loss(model.forward(x), np.ones((1, 32, 32), int))
    Adam(lr=1e-2).step(model.params, model.backward(g), model.frozen)
    for name in model.params:
        unchanged = model.params[name].tobytes() == before[name].tobytes()
        assert unchanged == name.startswith("enc"), name


def test_import_encoder_missing_tensor_named(tmp_path):
    donor = build(UNetConfig.desk(3), seed=10)
    tensors = dict(donor.params)
    del tensors["enc2.conv1.bias"]
    path = tmp_path / "partial.fseg"
    write_tensors(path, tensors)
    with pytest.raises(MissingTensorError, match="enc2.conv1.bias") as info:
        import_encoder(build(UNetConfig.desk(3)), path)
    assert info.value.missing == ["enc2.conv1.bias"]


def test_import_rgb_first_layer_sums_channels(tmp_path):
    donor = build(UNetConfig(stages=3, encoder_channels=(8, 16, 32), conv_repeats=(2, 2, 3), input_channels=3))
    path = tmp_path / "rgb.fseg"
    save_weights(donor, path)
    gray = import_encoder(build(UNetConfig.desk(3)), path)
    np.testing.assert_allclose(gray.params["enc1.conv1.kernel"],
                               donor.params["enc1.conv1.kernel"].sum(axis=1, keepdims=True))
