import numpy as np
import pytest

from dfss.core import DimensionError
from dfss.nets import (CheckpointError, build_network, checkpoint_bytes, checkpoint_from_bytes,
                       clone, forward_with_stats, load_checkpoint, save_checkpoint, student_spec,
                       teacher_spec)


def _trained_like(spec, seed=0):
    # perturb running stats so round trips exercise non-default values
    net = build_network(spec, seed)
    rng = np.random.default_rng(seed)
    for bn in net.bn_layers:
        bn.running_mean = rng.standard_normal(bn.num_channels).astype(np.float32)
        bn.running_var = rng.uniform(0.5, 2, bn.num_channels).astype(np.float32)
    return net.eval()


def test_build_deterministic():
    a = build_network(teacher_spec(), 3)
    b = build_network(teacher_spec(), 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))
    c = build_network(teacher_spec(), 4)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.parameters(), c.parameters()))


def test_teacher_larger_than_student():
    t = build_network(teacher_spec(), 0)
    s = build_network(student_spec(), 0)
    assert t.num_parameters() > s.num_parameters()
    assert len(t.bn_layers) >= 5


def test_zero_input_gives_finite_logits():
    net = build_network(teacher_spec(), 0).eval()
    out = net.forward(np.zeros((2, 3, 32, 32), np.float32))
    assert out.shape == (2, 4, 32, 32)
    assert np.all(np.isfinite(out))


def test_wrong_input_shape():
    net = build_network(student_spec(), 0).eval()
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 1, 32, 32), np.float32))


def test_stats_match_two_pass_oracle():
    net = _trained_like(teacher_spec())
    x = np.random.default_rng(1).uniform(size=(1, 3, 32, 32)).astype(np.float32)
    _, stats = forward_with_stats(net, x)
    # replay the stack and capture each BN input independently
    h = x
    captured = []
    for layer in net.layers:
        if type(layer).__name__ == "BatchNorm2d":
            captured.append(h[0].astype(np.float64))
        h = layer.forward(h)
    assert len(captured) == len(stats.means)
    for fmap, mu, var in zip(captured, stats.means, stats.variances):
        c = fmap.shape[0]
        flat = fmap.reshape(c, -1)
        m = flat.sum(axis=1) / flat.shape[1]
        v = ((flat - m[:, None]) ** 2).sum(axis=1) / flat.shape[1]
        np.testing.assert_allclose(mu, m, atol=1e-5)
        np.testing.assert_allclose(var, v, atol=1e-5)


def test_stats_deterministic_and_shape():
    net = _trained_like(teacher_spec())
    x = np.random.default_rng(2).uniform(size=(1, 3, 32, 32)).astype(np.float32)
    _, a = forward_with_stats(net, x)
    _, b = forward_with_stats(net, x)
    assert all(np.array_equal(p, q) for p, q in zip(a.means, b.means))
    big = build_network(teacher_spec(input_shape=(3, 64, 64)), 0).eval()
    _, c = forward_with_stats(big, np.zeros((1, 3, 64, 64), np.float32))
    assert [m.shape for m in c.means] == [m.shape for m in a.means]


def test_stats_leave_running_stats_alone():
    net = _trained_like(teacher_spec())
    before = [(bn.running_mean.tobytes(), bn.running_var.tobytes()) for bn in net.bn_layers]
    forward_with_stats(net, np.ones((1, 3, 32, 32), np.float32))
    after = [(bn.running_mean.tobytes(), bn.running_var.tobytes()) for bn in net.bn_layers]
    assert before == after


def test_stats_preconditions():
    net = build_network(teacher_spec(), 0)
    with pytest.raises(RuntimeError):
        forward_with_stats(net.train(), np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(DimensionError):
        forward_with_stats(net.eval(), np.zeros((2, 3, 32, 32), np.float32))


def test_checkpoint_round_trip(tmp_path):
    net = _trained_like(teacher_spec(), 5)
    path = tmp_path / "t.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path, teacher_spec())
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    assert net.forward(x).tobytes() == back.forward(x).tobytes()
    for a, b in zip(net.bn_layers, back.bn_layers):
        assert a.running_mean.tobytes() == b.running_mean.tobytes()
        assert a.running_var.tobytes() == b.running_var.tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_bad_magic():
    data = bytearray(checkpoint_bytes(build_network(student_spec(), 0)))
    data[0:8] = b"NOTACKPT"
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(bytes(data))


def test_checkpoint_truncated_and_trailing():
    data = checkpoint_bytes(build_network(student_spec(), 0))
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(data[:100])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_from_bytes(data + b"\0")


def test_checkpoint_spec_mismatch(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(build_network(teacher_spec(), 0), path)
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(path, student_spec())


def test_clone_is_independent():
    net = _trained_like(student_spec())
    copy = clone(net)
    copy.parameters()[0][...] = 0
    assert np.any(net.parameters()[0] != 0)
