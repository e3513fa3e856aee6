"""Training loops: supervised teacher, data-driven KD reference, and the
three data-free distillation objectives (vanilla, fixed-weight, progressive).

All distillation objectives share one loop. Per step the loss is
``mean_i(a_i * L1_i)`` over the batch, where ``a_i`` is 1 for vanilla,
the sample's fixed weight for WDD, and ``alpha(t, w_i, I)`` for WDPD.
``t`` counts optimizer steps and ``I = steps_per_epoch * epochs``.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import L1Loss, NumericError, SoftmaxCrossEntropy
from .nets import build_network, logits
from .metrics import evaluate
from .optim import SGD, cosine_lr

STRATEGIES = ("vanilla", "wdd", "wdpd")


def derive_seed(seed, *tags):
    words = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    lo, hi = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    lam: float = 1.0
    kd_space: str = "logits"
    strategy: str = "vanilla"
    student_bn: str = "train"
    eval_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.kd_space not in ("logits", "probs"):
            raise ValueError(f"kd_space must be 'logits' or 'probs', got {self.kd_space!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.student_bn not in ("train", "frozen"):
            raise ValueError(f"student_bn must be 'train' or 'frozen', got {self.student_bn!r}")

    def to_dict(self):
        return asdict(self)

    def steps_per_epoch(self, n):
        return math.ceil(n / self.batch_size)

    def total_iterations(self, n):
        total = self.steps_per_epoch(n) * self.epochs
        if total % 2:
            raise ValueError(
                f"total iterations I = {total} must be even so that I/2 is a whole step; "
                f"change epochs or batch size")
        return total


@dataclass
class ScheduleState:
    t: int
    omega: np.ndarray
    alpha: np.ndarray


def alpha(t, omega, total):
    """Progressive weight: ramps linearly from ``omega`` at t=0 to 1 at t=I/2,
    then stays at exactly 1."""
    if total <= 0:
        raise ValueError(f"total iterations must be positive, got {total}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > total):
        raise ValueError(f"t outside [0, {total}]")
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0) or np.any(omega > 1):
        raise ValueError("weights must lie in [0, 1]")
    half = total / 2
    ramp = omega + (1.0 - omega) * (np.asarray(t, dtype=float) / half)
    out = np.where(np.asarray(t) < half, ramp, 1.0)
    return float(out) if out.ndim == 0 else out


def epoch_order(n, seed, epoch):
    return np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(n)


def _fit(net, n, config, step_fn, val=None, on_step=None):
    """Shared SGD + cosine loop. ``step_fn(idx, t, total)`` runs forward and
    backward for one batch and returns the scalar loss."""
    total = config.total_iterations(n)
    steps = config.steps_per_epoch(n)
    opt = SGD(net.parameters(), config.momentum)
    names = net.parameter_names()
    log = []
    t = 0
    for epoch in range(config.epochs):
        order = epoch_order(n, config.seed, epoch)
        loss_sum = 0.0
        lr = config.lr
        for b in range(steps):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = cosine_lr(t, total, config.lr)
            net.zero_grad()
            loss = step_fn(idx, t, total)
            if not math.isfinite(loss):
                raise NumericError(f"loss became {loss} at step {t} (epoch {epoch})")
            opt.step(net.gradients(), lr, names)
            loss_sum += loss * len(idx)
            t += 1
            if on_step is not None:
                on_step(t, loss)
        row = {"epoch": epoch + 1, "step": t, "lr": lr, "loss": loss_sum / n, "miou_val": ""}
        last = epoch + 1 == config.epochs
        if val is not None and (last or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            mode = net.training
            row["miou_val"] = evaluate(net, val).miou
            if mode:
                net.train()
        log.append(row)
    return log


def _check_labels(corpus, spec):
    if corpus.labels is None:
        raise ValueError(f"corpus {corpus.name!r} is unlabelled")
    if corpus.labels.max() >= spec.num_classes:
        raise ValueError(f"label index {int(corpus.labels.max())} >= class count {spec.num_classes}")


def train_supervised(corpus, spec, config, val=None):
    """Per-pixel cross-entropy training. Returns ``(network, metrics_log)``;
    the network comes back frozen in eval mode."""
    _check_labels(corpus, spec)
    net = build_network(spec, derive_seed(config.seed, "init", spec.role)).train()
    ce = SoftmaxCrossEntropy()
    images, labels = corpus.images, corpus.labels

    def step(idx, t, total):
        loss = ce.forward(net.forward(images[idx]), labels[idx])
        net.backward(ce.backward())
        return loss

    log = _fit(net, len(corpus), config, step, val)
    return net.eval(), log


def train_teacher(corpus, spec, config, val=None):
    return train_supervised(corpus, spec, config, val)


def kd_with_original_data(teacher, student_spec, corpus, config, val=None):
    """Student trained on labelled data with ``CE + lam * L1(student, teacher)``."""
    _check_labels(corpus, student_spec)
    teacher_out = logits(teacher, corpus.images)
    net = build_network(student_spec, derive_seed(config.seed, "init", student_spec.role)).train()
    ce = SoftmaxCrossEntropy()
    kd = L1Loss(config.kd_space)
    images, labels = corpus.images, corpus.labels
    lam = config.lam

    def step(idx, t, total):
        out = net.forward(images[idx])
        loss = ce.forward(out, labels[idx]) + lam * kd.forward(out, teacher_out[idx])
        net.backward(ce.backward() + lam * kd.backward())
        return loss

    log = _fit(net, len(corpus), config, step, val)
    return net.eval(), log


def _selected_images(corpus, selection):
    ids = selection.ids if hasattr(selection, "ids") else selection
    if len(ids) == 0:
        raise ValueError("cannot distill on an empty selection")
    return corpus.images[corpus.index_of(ids)]


def distill(teacher, student_spec, corpus, selection, config, weights=None, val=None,
            student=None, trace=None):
    """Data-free distillation on ``selection`` (ids into ``corpus``).

    ``config.strategy`` picks the per-sample factor: vanilla ignores
    ``weights``; wdd uses them as fixed factors; wdpd ramps them with
    :func:`alpha`. ``student`` overrides the freshly initialised network.
    ``trace``, if a list, receives ``(t, loss, grads)`` per step.
    """
    images = _selected_images(corpus, selection)
    n = len(images)
    if config.strategy == "vanilla":
        omega = np.ones(n)
    else:
        if weights is None:
            raise ValueError(f"{config.strategy} distillation needs per-sample weights")
        omega = np.asarray(weights, dtype=float)
        if omega.shape != (n,):
            raise ValueError(f"{len(omega)} weights for {n} selected samples")
        if np.any(omega < 0) or np.any(omega > 1):
            raise ValueError("weights must lie in [0, 1]")
    # teacher is frozen: one eval-mode pass gives every target
    teacher_out = logits(teacher, images)
    net = student if student is not None else build_network(
        student_spec, derive_seed(config.seed, "init", student_spec.role))
    if config.student_bn == "train":
        net.train()
    else:
        net.eval()
    kd = L1Loss(config.kd_space)
    progressive = config.strategy == "wdpd"

    def step(idx, t, total):
        w = alpha(t, omega[idx], total) if progressive else omega[idx]
        loss = kd.forward(net.forward(images[idx]), teacher_out[idx], w)
        net.backward(kd.backward())
        if trace is not None:
            trace.append((t, loss, [g.copy() for g in net.gradients()]))
        return loss

    log = _fit(net, n, config, step, val)
    return net.eval(), log


def distill_vanilla(teacher, student_spec, corpus, selection, config, **kw):
    return distill(teacher, student_spec, corpus, selection, replace(config, strategy="vanilla"), **kw)


def distill_wdd(teacher, student_spec, corpus, selection, config, weights, **kw):
    return distill(teacher, student_spec, corpus, selection, replace(config, strategy="wdd"),
                   weights, **kw)


def distill_wdpd(teacher, student_spec, corpus, selection, config, weights, **kw):
    return distill(teacher, student_spec, corpus, selection, replace(config, strategy="wdpd"),
                   weights, **kw)


def schedule_state(t, omega, total):
    omega = np.asarray(omega, dtype=float)
    return ScheduleState(t, omega, np.asarray(alpha(t, omega, total)))


def batch_loss(student, teacher_out, images, factors, kd_space="logits"):
    """Weighted batch objective ``mean_i(factors_i * L1_i)`` at current params."""
    return L1Loss(kd_space).forward(student.forward(images), teacher_out, factors)


def dataset_loss(student, teacher, images, weights, kd_space="logits", chunk=64):
    """``(1/|D|) * sum_i w_i * L1_i`` over a whole sample set, eval mode."""
    student.eval()
    kd = L1Loss(kd_space)
    per = []
    for i in range(0, len(images), chunk):
        x = images[i:i + chunk]
        per.append(kd.per_sample(student.forward(x), logits(teacher, x))[0])
    per = np.concatenate(per).astype(np.float64)
    return float(np.mean(np.asarray(weights, dtype=np.float64) * per))


def write_metrics_csv(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "lr", "loss", "miou_val"],
                           lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
