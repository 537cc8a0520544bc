import numpy as np
import pytest

from monoprobe import nn
from monoprobe import probe as PR
from monoprobe.encoder import EncoderConfig, build_encoder
from monoprobe.errors import ConfigError, StructureError, ValidationError

TINY = (4, 6, 8, 8)


def randomized_bn_net(cfg, seed=0):
    """Encoder whose BN layers carry non-trivial affine parameters and stats."""
    net = build_encoder(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for blk in net.blocks:
        c = blk.bn.weight.shape[0]
        blk.bn.weight.data[:] = rng.uniform(0.5, 2.0, c)
        blk.bn.bias.data[:] = rng.standard_normal(c)
        blk.bn.running_mean[:] = rng.standard_normal(c)
        blk.bn.running_var[:] = rng.uniform(0.3, 3.0, c)
        blk.conv.bias.data[:] = rng.standard_normal(c) * 0.1
    return net.eval()


def inputs(n, s, seed=1):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, s, s)).astype(np.float32)


# ------------------------------------------------------------------ absorption


def test_identity_bn_leaves_conv_unchanged_up_to_eps():
    net = build_encoder(EncoderConfig(widths=TINY), 0).eval()
    out = PR.absorb_batchnorm(net)
    w0, w1 = net.blocks[0].conv.weight.data, out.blocks[0].conv.weight.data
    np.testing.assert_allclose(w1, w0 / np.sqrt(1 + 1e-5), rtol=1e-6)
    assert all(b.bn is None for b in out.blocks)
    assert all(b.bn is not None for b in net.blocks)  # original untouched


def test_absorbed_outputs_match_on_taps():
    net = randomized_bn_net(EncoderConfig(widths=TINY), 3)
    folded = PR.absorb_batchnorm(net)
    x = inputs(10, 32)
    with nn.no_grad():
        ta, la = net.forward_with_taps(x)
        tb, lb = folded.forward_with_taps(x)
    for k in ta:
        assert np.abs(ta[k].data - tb[k].data).max() < 1e-4, k
    assert np.abs(la.data - lb.data).max() < 1e-4


def test_absorb_twice_is_structure_error():
    folded = PR.absorb_batchnorm(build_encoder(EncoderConfig(widths=TINY)))
    with pytest.raises(StructureError):
        PR.absorb_batchnorm(folded)


# ------------------------------------------------------------------- pooling


def test_pool_grid_alexnet_conv1():
    assert PR.pool_grid(96, 9600) == 10
    assert [PR.pool_grid(c, d) for c, d in zip((96, 256, 384, 384, 256), PR.ALEXNET_PROBE_DIMS.values())] == [
        10,
        6,
        5,
        5,
        6,
    ]


def test_pooled_global_max_and_constant():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7, 9))
    np.testing.assert_array_equal(PR.pooled_features(a, 5), a.max(axis=(1, 2)))
    const = np.full((4, 13, 13), 2.5)
    out = PR.pooled_features(const, 4 * 9)
    assert out.shape == (36,) and np.all(out == 2.5)


def test_pooled_none_keeps_raw():
    a = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    np.testing.assert_array_equal(PR.pooled_features(a), a.reshape(2, -1))


@pytest.mark.parametrize("c,target", [(96, 9601), (96, 96 * 3), (10, 5)])
def test_pooled_needs_integer_grid(c, target):
    with pytest.raises(ConfigError):
        PR.pooled_features(np.zeros((c, 13, 13)), target)


def test_pooled_bins_oracle():
    # direct loop with floor/ceil bin edges
    a = np.random.default_rng(2).standard_normal((3, 13, 13))
    g = 6
    ref = np.empty((3, g, g))
    for i in range(g):
        for j in range(g):
            y0, y1 = (i * 13) // g, -(-((i + 1) * 13) // g)
            x0, x1 = (j * 13) // g, -(-((j + 1) * 13) // g)
            ref[:, i, j] = a[:, y0:y1, x0:x1].max(axis=(1, 2))
    np.testing.assert_array_equal(PR.pooled_features(a, 3 * 36), ref.reshape(-1))


# ---------------------------------------------------------------- schedule


def test_probe_lr_schedule():
    got = [PR.probe_lr(e) for e in (0, 5, 15, 25, 35)]
    np.testing.assert_allclose(got, [0.01, 0.002, 0.0004, 0.00008, 0.00008], rtol=1e-12)
    assert PR.probe_lr(4) == 0.01 and PR.probe_lr(14) == pytest.approx(0.002)


def test_spec_validation():
    with pytest.raises(ValidationError, match="epochs"):
        PR.ProbeSpec(epochs=0)
    spec = PR.ProbeSpec(tap="conv2", target_dim=64)
    assert PR.ProbeSpec.from_dict(spec.to_dict()) == spec


# --------------------------------------------------------------- linear fit


def test_one_hot_features_fit_perfectly():
    labels = np.arange(200) % 10
    feats = np.eye(10, dtype=np.float32)[labels]
    w, b, mean, scale, hist = PR.fit_linear(feats, labels, 10, PR.ProbeSpec(epochs=10, learning_rate=0.1))
    probe = PR.LinearProbe("x", None, w, b, mean, scale, hist)
    assert (probe.predict(feats) == labels).mean() == 1.0


def test_random_labels_give_chance():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((2000, 20)).astype(np.float32)
    labels = rng.integers(0, 10, 2000)
    w, b, mean, scale, _ = PR.fit_linear(feats[:1000], labels[:1000], 10, PR.ProbeSpec(epochs=5))
    probe = PR.LinearProbe("x", None, w, b, mean, scale)
    acc = 100 * (probe.predict(feats[1000:]) == labels[1000:]).mean()
    assert abs(acc - 10) <= 3


def test_train_probe_leaves_encoder_untouched():
    net = randomized_bn_net(EncoderConfig(widths=TINY), 1)
    net.train()
    before = {k: v.copy() for k, v in net.state_arrays().items()}
    x = inputs(64, 32)
    y = np.arange(64) % 4
    probe = PR.train_probe(net, "conv2", x, y, PR.ProbeSpec(tap="conv2", epochs=2))
    for k, v in net.state_arrays().items():
        assert v.tobytes() == before[k].tobytes(), k
    assert net.training
    assert probe.weight.shape == (4, 6 * 5 * 5)
    acc = PR.evaluate_probe(probe, net, x, y)
    assert 0 <= acc <= 100


def test_train_probe_unknown_tap():
    net = build_encoder(EncoderConfig(widths=TINY))
    with pytest.raises(ConfigError):
        PR.train_probe(net, "conv9", inputs(4, 32), [0, 1, 0, 1], PR.ProbeSpec())


def test_train_probe_is_deterministic():
    net = build_encoder(EncoderConfig(widths=TINY), 2).eval()
    x, y = inputs(50, 32, 4), np.arange(50) % 3
    spec = PR.ProbeSpec(tap="conv3", epochs=3, target_dim=8 * 4)
    a = PR.train_probe(net, "conv3", x, y, spec)
    b = PR.train_probe(net, "conv3", x, y, spec)
    assert a.weight.tobytes() == b.weight.tobytes()


def test_large_format_probe_path():
    net = build_encoder(EncoderConfig(widths=TINY), 0).eval()
    rng = np.random.default_rng(0)
    images = [rng.uniform(-1, 1, (40 + i, 48, 3)) for i in range(12)]
    spec = PR.ProbeSpec(tap="conv1", epochs=2, large_format=True, resize=36, crop=32, batch_size=4)
    probe = PR.train_probe(net, "conv1", images, np.arange(12) % 2, spec)
    assert len(probe.history) == 2
    with pytest.raises(ValidationError, match="crop"):
        PR.ProbeSpec(large_format=True, resize=30, crop=32)


# ------------------------------------------------------------------ 10-crop


def test_ten_crops_structure():
    x = np.arange(2 * 1 * 6 * 6, dtype=float).reshape(2, 1, 6, 6)
    crops = PR.ten_crops(x, 4)
    assert crops.shape == (10, 2, 1, 4, 4)
    np.testing.assert_array_equal(crops[0], x[:, :, :4, :4])
    np.testing.assert_array_equal(crops[3], x[:, :, 2:, 2:])
    np.testing.assert_array_equal(crops[4], x[:, :, 1:5, 1:5])
    for j in range(5):
        np.testing.assert_array_equal(crops[5 + j], crops[j][..., ::-1])
    assert len({c.tobytes() for c in crops}) == 10


def _probe_for(net, tap="conv4", classes=3, seed=0):
    rng = np.random.default_rng(seed)
    dim = net.config.tap_shapes()[0][tap]
    dim = dim[0] * dim[1] * dim[2]
    return PR.LinearProbe(
        tap, None, rng.standard_normal((classes, dim)).astype(np.float32), np.zeros(classes, np.float32),
        np.zeros(dim, np.float32), np.ones(dim, np.float32),
    )


def test_ten_crop_on_constant_images_equals_single_crop():
    net = build_encoder(EncoderConfig(widths=TINY, input_size=28), 0).eval()
    probe = _probe_for(net)
    x = np.concatenate([np.full((1, 3, 36, 36), v, np.float32) for v in np.linspace(-1, 1, 9)])
    y = np.arange(9) % 3
    scores = PR.ten_crop_scores(probe, net, x, 28)
    single = probe.scores(PR.tap_features(net, x[:, :, 4:32, 4:32], "conv4"))
    np.testing.assert_allclose(scores, single, rtol=1e-6)
    assert PR.ten_crop_eval(probe, net, x, y, 28) == PR.single_crop_eval(probe, net, x, y, 28)


def test_ten_crop_order_invariant():
    net = build_encoder(EncoderConfig(widths=TINY, input_size=28), 1).eval()
    probe = _probe_for(net, seed=1)
    x = inputs(6, 34, seed=3)
    a = PR.ten_crop_scores(probe, net, x, 28)
    b = PR.ten_crop_scores(probe, net, x, 28, order=[7, 2, 9, 0, 4, 1, 8, 3, 6, 5])
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert (a.argmax(1) == b.argmax(1)).all()


# ----------------------------------------------------------------- finetune


def test_finetune_frozen_keeps_prefix_bitwise():
    net = randomized_bn_net(EncoderConfig(widths=TINY), 5)
    x, y = inputs(40, 32, 6), np.arange(40) % 3
    before = {k: v.copy() for k, v in net.state_arrays().items()}
    acc, model = PR.finetune_frozen(net, 2, x, y, x, y, PR.FinetuneHyper(epochs=2, batch_size=16))
    after = model.state_arrays()
    for k, v in before.items():
        if k.startswith(("conv1.", "conv2.", "bn1.", "bn2.")):
            assert v.tobytes() == after[k].tobytes(), k
        elif not k.startswith("head."):
            assert v.tobytes() != after[k].tobytes(), k
    assert 0 <= acc <= 100
    # the input network is not modified
    for k, v in net.state_arrays().items():
        assert v.tobytes() == before[k].tobytes()


def test_finetune_zero_frozen_trains_everything():
    net = build_encoder(EncoderConfig(widths=TINY), 5)
    x, y = inputs(32, 32, 7), np.arange(32) % 2
    _, model = PR.finetune_frozen(net, 0, x, y, x, y, PR.FinetuneHyper(epochs=1, batch_size=16))
    assert set(model.trainable_parameters()) == set(model.named_parameters())
    assert model.blocks[0].conv.weight.data.tobytes() != net.blocks[0].conv.weight.data.tobytes()


# ------------------------------------------------------------------- report


def test_report_round_trip(tmp_path):
    rep = PR.ProbeReport("rotnet", 1, {"conv1": 50.0, "conv2": 61.25}, seeds={"model_seed": 1}, config={"a": 1})
    rep.save_json(tmp_path / "r.json")
    back = PR.ProbeReport.load_json(tmp_path / "r.json")
    assert back == rep and len(rep.config_hash) == 64
    rep.save_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["method,N,conv1,conv2", "rotnet,1,50.0,61.2"]
    with pytest.raises(ValidationError):
        PR.ProbeReport("x", 1, {"conv1": 101.0})
