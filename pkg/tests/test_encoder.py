import numpy as np
import pytest

from gradcheck import check
from monoprobe import nn
from monoprobe.encoder import (
    EncoderConfig,
    build_encoder,
    cast_network,
    checkpoint_bytes,
    forward_with_taps,
    freeze_prefix,
    load_checkpoint,
    save_checkpoint,
)
from monoprobe.errors import ConfigError, FormatError, ValidationError
from monoprobe.kernels import conv_out_size

TINY = (4, 6, 8, 8)


def small(widths=TINY, **kw):
    return EncoderConfig("SmallAlexNet", widths=widths, **kw)


def batch(n=2, s=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, s, s)).astype(np.float32)


def closed_form_sizes(cfg):
    s, out = cfg.input_size, []
    for k, st, p, pool in zip(cfg.kernels, cfg.strides, cfg.paddings, cfg.pools):
        s = conv_out_size(s, k, st, p)
        out.append(s)
        if pool:
            s = (s - pool[0]) // pool[1] + 1
    return out


def test_small_alexnet_layout_and_tap_sizes():
    cfg = EncoderConfig("SmallAlexNet")
    assert cfg.kernels == (7, 5, 3, 3) and cfg.strides == (3, 2, 2, 1)
    taps, flat = cfg.tap_shapes()
    assert list(taps) == ["conv1", "conv2", "conv3", "conv4"]
    # (32 - 7) // 3 + 1 with no padding
    assert taps["conv1"] == (32, 9, 9)
    assert [t[1] for t in taps.values()] == closed_form_sizes(cfg) == [9, 5, 3, 3]
    assert flat == 128 * 3 * 3


def test_alexnet_bn_standard_dims_at_224():
    cfg = EncoderConfig("AlexNetBN", input_size=224)
    taps, flat = cfg.tap_shapes()
    assert taps == {
        "conv1": (96, 55, 55),
        "conv2": (256, 27, 27),
        "conv3": (384, 13, 13),
        "conv4": (384, 13, 13),
        "conv5": (256, 13, 13),
    }
    assert flat == 256 * 6 * 6


def test_forward_taps_match_closed_form():
    net = build_encoder(small()).eval()
    taps, logits = forward_with_taps(net, batch())
    assert len(taps) == 4
    for (name, act), size, width in zip(taps.items(), closed_form_sizes(net.config), TINY):
        assert act.shape == (2, width, size, size), name
    assert logits.shape == (2, 4)


def test_same_seed_bit_identical():
    a, b = build_encoder(small(), 3), build_encoder(small(), 3)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(build_encoder(small(), 4))


def test_zero_input_gives_zero_conv1():
    net = build_encoder(small()).eval()
    taps, _ = net.forward_with_taps(np.zeros((2, 3, 32, 32), np.float32))
    assert not taps["conv1"].data.any()


def test_taps_do_not_change_head_output():
    net = build_encoder(small(), 1).eval()
    x = batch(3)
    with nn.no_grad():
        _, via_taps = net.forward_with_taps(x)
        plain = net(x)
    assert via_taps.data.tobytes() == plain.data.tobytes()


def test_input_shape_mismatch():
    net = build_encoder(small())
    with pytest.raises(ConfigError):
        net.forward_with_taps(batch(s=31))
    with pytest.raises(ConfigError):
        EncoderConfig("VGG")
    with pytest.raises(ConfigError):
        EncoderConfig("SmallAlexNet", input_size=6).tap_shapes()


def test_eval_forward_is_deterministic():
    net = build_encoder(small(), 2).eval()
    x = batch(4, seed=5)
    assert net(x).data.tobytes() == net(x).data.tobytes()


# ------------------------------------------------------------------ freezing


def one_step(net, x, labels):
    params = net.trainable_parameters()
    nn.zero_grads(params)
    nn.softmax_cross_entropy(net(x), labels).backward()
    nn.sgd_step(params, nn.SgdState(0.1, momentum=0.9))


def snapshot(net):
    return {k: v.copy() for k, v in net.state_arrays().items()}


def test_freeze_zero_all_trainable():
    net = freeze_prefix(build_encoder(small()), 0)
    assert set(net.trainable_parameters()) == set(net.named_parameters())


def test_freeze_two_blocks_bitwise_unchanged():
    net = freeze_prefix(build_encoder(small(), 7).train(), 2)
    before = snapshot(net)
    x, y = batch(4, seed=1), np.array([0, 1, 2, 3])
    for _ in range(3):
        one_step(net, x, y)
    after = snapshot(net)
    for k in before:
        frozen = k.startswith(("conv1.", "conv2.", "bn1.", "bn2."))
        assert np.array_equal(before[k], after[k]) == frozen, k


def test_freeze_all_blocks_only_head_changes():
    net = freeze_prefix(build_encoder(small(), 7).train(), 4)
    assert set(net.trainable_parameters()) == {"head.weight", "head.bias"}
    before = snapshot(net)
    one_step(net, batch(4), np.array([0, 1, 2, 3]))
    after = snapshot(net)
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed == {"head.weight", "head.bias"}


def test_freeze_out_of_range():
    with pytest.raises(ValidationError):
        freeze_prefix(build_encoder(small()), 5)
    with pytest.raises(ValidationError):
        freeze_prefix(build_encoder(small()), -1)


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    net = build_encoder(small(), 11).train()
    one_step(net, batch(4), np.array([3, 2, 1, 0]))  # non-trivial running stats
    freeze_prefix(net, 1)
    net.meta = {"epoch": 1}
    path = tmp_path / "m.ckpt"
    digest = save_checkpoint(net, path)
    assert len(digest) == 64
    back = load_checkpoint(path)
    assert back.frozen_blocks == 1 and back.meta == {"epoch": 1} and back.init_seed == 11
    for k, v in snapshot(net).items():
        assert v.tobytes() == back.state_arrays()[k].tobytes(), k
    x = batch(2, seed=9)
    assert net.eval()(x).data.tobytes() == back.eval()(x).data.tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_wrong_variant(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_encoder(small()), path)
    with pytest.raises(FormatError, match="variant"):
        load_checkpoint(path, expect=EncoderConfig("AlexNetBN", input_size=224))
    with pytest.raises(FormatError, match="widths"):
        load_checkpoint(path, expect=small(widths=(4, 6, 8, 9)))


@pytest.mark.parametrize("cut", [1, 40, 500])
def test_checkpoint_truncated(tmp_path, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_encoder(small()), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-cut])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_flipped_bit(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"hello world" * 10)
    with pytest.raises(FormatError, match="not a monoprobe"):
        load_checkpoint(path)
    save_checkpoint(build_encoder(small()), path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 1
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(path)


# ----------------------------------------------------------------- gradients


def test_full_network_gradcheck_float64():
    net = cast_network(build_encoder(small(widths=(2, 3, 3, 4)), 5).train(), np.float64)
    rng = np.random.default_rng(0)
    x = nn.Tensor(rng.uniform(-1, 1, (3, 3, 32, 32)), requires_grad=True)
    labels = np.array([0, 3, 1])
    params = list(net.named_parameters().values())

    def loss():
        return nn.softmax_cross_entropy(net(x), labels)

    # BN in train mode updates running stats on every call; that does not
    # feed back into the train-mode output, so repeated evaluation is fine
    assert check(loss, params + [x], rng=rng, max_entries=12) < 1e-4
