import numpy as np
import pytest

from kdmix import autodiff as ad
from kdmix.autodiff import ContractError, DimensionError, Tensor
from kdmix.nets import (
    CLASSIFIER_TAP,
    SEGMENTER_TAP,
    STUDENT,
    TEACHER,
    AdapterBlock,
    ConfigurationError,
    adapt,
    build_classifier,
    build_segmenter,
    forward_with_taps,
    load_checkpoint,
    save_checkpoint,
)


def conv_params(widths, c_in, k=3):
    total = 0
    for w in widths:
        total += w * c_in * k * k + w
        c_in = w
    return total, c_in


def test_classifier_zero_weights_give_zero_logits(rng):
    net = build_classifier(TEACHER, (1, 16, 16), 2)
    for p in net.parameters():
        p.data[...] = 0
    out, _ = forward_with_taps(net, Tensor(rng.normal(size=(3, 1, 16, 16))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_classifier_output_shape(rng):
    out, taps = forward_with_taps(build_classifier(STUDENT, (1, 16, 16), 2), Tensor(rng.normal(size=(8, 1, 16, 16))))
    assert out.shape == (8, 2)
    assert taps[CLASSIFIER_TAP].shape == (8, 16, 4, 4)


def test_parameter_counts_match_stated_widths():
    t_conv, t_last = conv_params((16, 32, 64, 64), 1)
    s_conv, s_last = conv_params((8, 16), 1)
    t_expected = t_conv + t_last * 2 + 2
    s_expected = s_conv + s_last * 2 + 2
    teacher = build_classifier(TEACHER, (1, 16, 16), 2)
    student = build_classifier(STUDENT, (1, 16, 16), 2)
    assert teacher.param_count() == t_expected
    assert student.param_count() == s_expected
    assert teacher.param_count() / student.param_count() >= 3


def test_segmenter_student_smaller():
    assert build_segmenter(STUDENT, (1, 32, 32)).param_count() < build_segmenter(TEACHER, (1, 32, 32)).param_count()


def test_classifier_rejects_one_class():
    with pytest.raises(ContractError):
        build_classifier(STUDENT, (1, 16, 16), 1)


def test_teacher_tap_shape():
    assert build_classifier(TEACHER, (1, 16, 16), 2).tap_shape(CLASSIFIER_TAP, batch=2) == (2, 64, 4, 4)


def test_segmenter_shapes_and_range(rng):
    net = build_segmenter(STUDENT, (1, 16, 16))
    out, taps = forward_with_taps(net, Tensor(rng.normal(size=(4, 1, 16, 16))))
    assert out.shape == (4, 1, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))
    assert taps[SEGMENTER_TAP].shape[2:] == (8, 8)  # H/2 x W/2


def test_segmenter_rejects_indivisible_resolution():
    with pytest.raises(ContractError):
        build_segmenter(STUDENT, (1, 18, 18))


def test_segmenter_gradient_reaches_first_encoder_conv(rng):
    net = build_segmenter(TEACHER, (1, 16, 16))
    out, _ = forward_with_taps(net, Tensor(rng.normal(size=(2, 1, 16, 16))))
    ad.backward(ad.mean(out))
    g = net.params["enc1.w"].grad
    assert g is not None and np.abs(g).sum() > 0


def test_taps_deterministic_and_do_not_perturb_output(rng):
    net = build_classifier(TEACHER, (1, 16, 16), 2, seed=3)
    x = Tensor(rng.normal(size=(2, 1, 16, 16)))
    a = net.forward(x)
    b = net.forward(x)
    assert a.taps[CLASSIFIER_TAP].data.tobytes() == b.taps[CLASSIFIER_TAP].data.tobytes()
    # output computed with taps equals a tap-free recomputation from the same layers
    with ad.no_grad():
        h = x
        for i, (_, pool) in enumerate(net.blocks):
            h = ad.relu(ad.add_bias(ad.conv2d(h, net.params[f"conv{i}.w"], 1, 1), net.params[f"conv{i}.b"]))
            if pool:
                h = ad.max_pool2d(h)
        logits = ad.add_bias(ad.matmul(ad.global_avg_pool(h), net.params["head.w"]), net.params["head.b"])
    assert logits.data.tobytes() == a.output.data.tobytes()


def test_unknown_tap_is_configuration_error():
    with pytest.raises(ConfigurationError):
        build_classifier(STUDENT, (1, 16, 16), 2).tap_shape("nope")


def test_same_seed_same_parameters():
    a = build_classifier(STUDENT, (1, 16, 16), 2, seed=7, name="S")
    b = build_classifier(STUDENT, (1, 16, 16), 2, seed=7, name="S")
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = build_classifier(STUDENT, (1, 16, 16), 2, seed=8, name="S")
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_he_uniform_bounds_and_zero_bias():
    net = build_classifier(TEACHER, (1, 16, 16), 2)
    w = net.params["conv1.w"].data
    assert np.abs(w).max() <= np.sqrt(6 / (16 * 9)) + 1e-7
    assert not net.params["conv1.b"].data.any()


def test_adapter_shape(rng):
    ad_block = AdapterBlock((64, 4, 4), (16, 4, 4))
    assert adapt(ad_block, Tensor(rng.normal(size=(2, 64, 4, 4)))).shape == (2, 16, 4, 4)


def test_adapter_spatial_resampling(rng):
    down = AdapterBlock((8, 8, 8), (4, 4, 4))
    up = AdapterBlock((8, 2, 2), (4, 4, 4))
    assert down(Tensor(rng.normal(size=(1, 8, 8, 8)))).shape == (1, 4, 4, 4)
    assert up(Tensor(rng.normal(size=(1, 8, 2, 2)))).shape == (1, 4, 4, 4)


def test_identity_adapter(rng):
    x = Tensor(rng.normal(size=(2, 16, 4, 4)))
    out = AdapterBlock((16, 4, 4), (16, 4, 4), identity=True)(x)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_adapter_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        AdapterBlock((64, 4, 4), (16, 4, 4))(Tensor(rng.normal(size=(2, 32, 4, 4))))


def test_adapter_gradcheck(f64, rng):
    block = AdapterBlock((6, 4, 4), (3, 2, 2), seed=1)
    x = Tensor(rng.normal(size=(2, 6, 4, 4)), requires_grad=True)
    target = Tensor(rng.normal(size=(2, 3, 2, 2)))
    f = lambda: ad.mean(ad.square(ad.sub(block(x), target)))  # noqa: E731
    assert ad.gradcheck(f, [x] + block.parameters(), rng=rng) < 1e-3


def test_student_network_gradcheck(f64, rng):
    net = build_segmenter(STUDENT, (1, 8, 8), seed=2)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)))
    f = lambda: ad.mean(ad.square(net.forward(x).output))  # noqa: E731
    assert ad.gradcheck(f, net.parameters(), n_points=5, rng=rng) < 1e-3


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_segmenter(TEACHER, (1, 16, 16), seed=5)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, net.state_dict())
    back = load_checkpoint(path)
    assert list(back) == list(net.params)
    for k, v in back.items():
        assert v.tobytes() == net.params[k].data.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    blob = (tmp_path / "x.ckpt").read_bytes()
    expected = (
        (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
        + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert blob == expected


def test_checkpoint_trailing_bytes(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"a": np.ones(2, dtype=np.float32)})
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_load_state_dict_restores(rng):
    a = build_classifier(STUDENT, (1, 16, 16), 2, seed=1)
    b = build_classifier(STUDENT, (1, 16, 16), 2, seed=2)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(1, 1, 16, 16)))
    assert a.forward(x).output.data.tobytes() == b.forward(x).output.data.tobytes()
