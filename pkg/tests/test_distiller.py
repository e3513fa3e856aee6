import numpy as np
import pytest

from dfss.core import L1Loss
from dfss.corpus import Corpus, CorpusConfig
from dfss.distiller import (TrainConfig, alpha, batch_loss, dataset_loss, distill, distill_vanilla,
                            distill_wdd, distill_wdpd, epoch_order, kd_with_original_data,
                            schedule_state, train_supervised, train_teacher, write_metrics_csv)
from dfss.nets import (NetworkSpec, build_network, checkpoint_bytes, clone, logits, student_spec,
                       teacher_spec)

FAST = TrainConfig(epochs=2, batch_size=4, seed=3)


@pytest.fixture(scope="module")
def picked(small_world):
    return [int(i) for i in small_world.ids[:12]]


# ---------------------------------------------------------------------------
# alpha schedule
# ---------------------------------------------------------------------------

def test_alpha_examples():
    assert alpha(0, 0.3, 100) == pytest.approx(0.3)
    assert alpha(50, 0.3, 100) == 1.0
    assert alpha(75, 0.3, 100) == 1.0
    assert alpha(25, 0.4, 100) == pytest.approx(0.7)


def test_alpha_grid_properties():
    for total in (2, 10, 64, 100):
        ts = np.arange(total + 1)
        for w in np.linspace(0, 1, 11):
            a = np.array([alpha(t, w, total) for t in ts])
            assert a[0] == pytest.approx(w)
            assert np.all(np.diff(a) >= -1e-15)
            assert np.all(a[ts >= total / 2] == 1.0)
            assert np.all((a >= w - 1e-15) & (a <= 1.0))


def test_alpha_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        total = 2 * int(rng.integers(1, 200))
        t = int(rng.integers(0, total + 1))
        w = float(rng.uniform())
        want = w + (1 - w) * t / (total / 2) if t <= total / 2 else 1.0
        assert abs(alpha(t, w, total) - want) < 1e-12


def test_alpha_preconditions():
    with pytest.raises(ValueError):
        alpha(-1, 0.5, 10)
    with pytest.raises(ValueError):
        alpha(11, 0.5, 10)
    with pytest.raises(ValueError):
        alpha(1, 1.5, 10)


def test_schedule_state_vector():
    s = schedule_state(5, [0.0, 0.5, 1.0], 20)
    np.testing.assert_allclose(s.alpha, [0.5, 0.75, 1.0])


def test_total_iterations_must_be_even():
    with pytest.raises(ValueError, match="even"):
        TrainConfig(epochs=3, batch_size=4).total_iterations(4)
    assert TrainConfig(epochs=3, batch_size=4).total_iterations(8) == 6


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="other")


# ---------------------------------------------------------------------------
# weighted objective oracles
# ---------------------------------------------------------------------------

def test_weighted_loss_scalar_oracle():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((2, 3, 2, 2))
    t = rng.standard_normal((2, 3, 2, 2))
    w = [0.25, 0.9]
    per = []
    for i in range(2):
        acc = 0.0
        for k in range(3):
            for y in range(2):
                for x in range(2):
                    acc += abs(s[i, k, y, x] - t[i, k, y, x])
        per.append(acc / 12)
    want = (w[0] * per[0] + w[1] * per[1]) / 2
    assert abs(L1Loss().forward(s, t, np.array(w)) - want) < 1e-6


def test_wdpd_single_step_gradient_oracle():
    # one 1x1 conv and no normalisation, so the parameter gradient has a closed form
    spec = NetworkSpec((("conv", 2, 1, 1),), num_classes=2, input_shape=(2, 3, 3), role="student")
    net = build_network(spec, 0, dtype=np.float64).train()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 3, 3))
    target = rng.standard_normal((2, 2, 3, 3))
    a = alpha(25, np.array([1.0, 0.0]), 100)
    np.testing.assert_allclose(a, [1.0, 0.5])
    kd = L1Loss()
    net.zero_grad()
    kd.forward(net.forward(x), target, a)
    net.backward(kd.backward())
    got = net.layers[0].grads["weight"][:, :, 0, 0]
    z = net.forward(x)
    want = np.zeros((2, 2))
    count = 2 * 3 * 3
    for i in range(2):
        for o in range(2):
            for c in range(2):
                for y in range(3):
                    for xx in range(3):
                        sgn = np.sign(z[i, o, y, xx] - target[i, o, y, xx])
                        want[o, c] += a[i] / (2 * count) * sgn * x[i, c, y, xx]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_plateau_batch_loss_equals_vanilla(small_world, small_teacher):
    student = build_network(student_spec(), 0).eval()
    imgs = small_world.images[:6]
    t_out = logits(small_teacher, imgs)
    omega = np.linspace(0, 1, 6)
    total = 40
    for t in (21, 30, 40):
        wdpd = batch_loss(student, t_out, imgs, alpha(t, omega, total))
        vanilla = batch_loss(student, t_out, imgs, np.ones(6))
        assert wdpd == vanilla


def test_duplicated_samples_keep_mean_loss(small_world, small_teacher):
    student = build_network(student_spec(), 0)
    imgs = small_world.images[:10]
    w = np.linspace(0.1, 1, 10)
    single = dataset_loss(student, small_teacher, imgs, w)
    double = dataset_loss(student, small_teacher, np.concatenate([imgs, imgs]), np.tile(w, 2))
    assert abs(single - double) < 1e-6


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def test_unit_weights_reduce_to_vanilla(small_world, small_teacher, picked):
    ones = np.ones(len(picked))
    v, _ = distill_vanilla(small_teacher, student_spec(), small_world, picked, FAST)
    d, _ = distill_wdd(small_teacher, student_spec(), small_world, picked, FAST, ones)
    p, _ = distill_wdpd(small_teacher, student_spec(), small_world, picked, FAST, ones)
    assert checkpoint_bytes(v) == checkpoint_bytes(d) == checkpoint_bytes(p)


def test_distill_deterministic(small_world, small_teacher, picked):
    w = np.linspace(0, 1, len(picked))
    a, la = distill_wdpd(small_teacher, student_spec(), small_world, picked, FAST, w)
    b, lb = distill_wdpd(small_teacher, student_spec(), small_world, picked, FAST, w)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert la == lb


def test_epoch_order_depends_on_seed_and_epoch():
    assert np.array_equal(epoch_order(20, 1, 0), epoch_order(20, 1, 0))
    assert not np.array_equal(epoch_order(20, 1, 0), epoch_order(20, 1, 1))
    assert sorted(epoch_order(20, 1, 0)) == list(range(20))


def test_zero_weight_sample_has_no_influence(small_world, small_teacher, picked):
    # with frozen student BN, nothing about sample j can reach the gradient
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3, strategy="wdd", student_bn="frozen")
    w = np.ones(len(picked))
    w[5] = 0.0
    other = Corpus(small_world.name, small_world.images.copy(), small_world.ids,
                   small_world.strata, small_world.seeds, small_world.config)
    other.images[small_world.index_of([picked[5]])[0]] = 0.5
    ta, tb = [], []
    distill(small_teacher, student_spec(), small_world, picked, cfg, w, trace=ta)
    distill(small_teacher, student_spec(), other, picked, cfg, w, trace=tb)
    assert len(ta) == len(tb) == 6
    for (_, la, ga), (_, lb, gb) in zip(ta, tb):
        assert la == lb
        assert all(x.tobytes() == y.tobytes() for x, y in zip(ga, gb))


def test_teacher_not_mutated(small_world, small_teacher, picked):
    before = checkpoint_bytes(small_teacher)
    distill_wdpd(small_teacher, student_spec(), small_world, picked, FAST,
                 np.linspace(0, 1, len(picked)))
    assert checkpoint_bytes(small_teacher) == before
    assert not small_teacher.training


def test_fixed_point_when_student_is_teacher(small_world, small_teacher, picked):
    student = clone(small_teacher)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3, student_bn="frozen")
    before = checkpoint_bytes(student)
    trace = []
    distill(small_teacher, small_teacher.spec, small_world, picked, cfg, student=student,
            trace=trace)
    assert trace[0][1] == 0.0
    assert all(np.all(g == 0) for _, _, grads in trace for g in grads)
    assert checkpoint_bytes(student) == before


def test_weights_required_and_checked(small_world, small_teacher, picked):
    with pytest.raises(ValueError, match="weights"):
        distill(small_teacher, student_spec(), small_world, picked,
                TrainConfig(epochs=2, batch_size=4, strategy="wdd"))
    with pytest.raises(ValueError):
        distill_wdd(small_teacher, student_spec(), small_world, picked, FAST, np.ones(3))
    with pytest.raises(ValueError, match="empty"):
        distill_vanilla(small_teacher, student_spec(), small_world, [], FAST)


def test_distill_reduces_kd_loss(small_world, small_teacher):
    ids = [int(i) for i in small_world.ids[:32]]
    _, log = distill_vanilla(small_teacher, student_spec(), small_world, ids,
                             TrainConfig(epochs=10, batch_size=8, seed=0))
    assert log[-1]["loss"] < 0.5 * log[0]["loss"]


def test_teacher_training_reduces_loss(small_train):
    sub = small_train.subset(small_train.ids[:16])
    _, log = train_teacher(sub, teacher_spec(), TrainConfig(epochs=4, batch_size=8, seed=1))
    assert log[-1]["loss"] < log[0]["loss"]


def test_teacher_training_deterministic(small_train):
    sub = small_train.subset(small_train.ids[:8])
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    a, _ = train_teacher(sub, teacher_spec(), cfg)
    b, _ = train_teacher(sub, teacher_spec(), cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert not a.training


def test_label_out_of_range(small_train):
    bad = small_train.subset(small_train.ids[:4])
    bad.labels = bad.labels.copy()
    bad.labels[0, 0, 0] = 7
    with pytest.raises(ValueError, match="label"):
        train_teacher(bad, teacher_spec(), FAST)


def test_kd_lambda_zero_is_supervised(small_train, small_teacher):
    sub = small_train.subset(small_train.ids[:8])
    cfg = TrainConfig(epochs=2, batch_size=4, seed=2, lam=0.0)
    kd, _ = kd_with_original_data(small_teacher, student_spec(), sub, cfg)
    sup, _ = train_supervised(sub, student_spec(), cfg)
    assert checkpoint_bytes(kd) == checkpoint_bytes(sup)


def test_kd_large_lambda_tracks_teacher(small_train, small_teacher):
    sub = small_train.subset(small_train.ids[:16])
    start = build_network(student_spec(), 0)
    before = dataset_loss(start, small_teacher, sub.images, np.ones(16))
    net, _ = kd_with_original_data(small_teacher, student_spec(), sub,
                                   TrainConfig(epochs=6, batch_size=8, seed=0, lam=50.0, lr=0.01))
    after = dataset_loss(net, small_teacher, sub.images, np.ones(16))
    assert after < before


def test_metrics_csv(tmp_path, small_world, small_teacher, picked):
    _, log = distill_vanilla(small_teacher, student_spec(), small_world, picked, FAST)
    write_metrics_csv(log, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,miou_val"
    assert len(lines) == 1 + FAST.epochs
