"""SGD with momentum and the cosine learning-rate schedule."""

import math

import numpy as np

from .core import NumericError


def cosine_lr(t, total, lr0):
    """``lr0 * 0.5 * (1 + cos(pi * t / total))`` for ``0 <= t <= total``."""
    if total <= 0:
        raise ValueError(f"total iterations must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Heavy-ball momentum: ``v <- m*v + g``, ``p <- p - lr*v``.

    ``params`` and ``grads`` are parallel lists of arrays; parameters are
    updated in place so layers keep their references.
    """

    def __init__(self, params, momentum=0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr, names=None):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                label = names[i] if names else f"param[{i}]"
                bad = int(g.size - np.count_nonzero(np.isfinite(g)))
                raise NumericError(f"non-finite gradient for {label}: {bad}/{g.size} entries")
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= (lr * v).astype(p.dtype)


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """One functional momentum step. Returns ``(new_params, new_velocity)``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    params = [np.array(p, dtype=float, copy=True) for p in params]
    velocity = ([np.zeros_like(p) for p in params] if velocity is None
                else [np.array(v, dtype=float, copy=True) for v in velocity])
    opt = SGD(params, momentum)
    opt.velocity = velocity
    opt.step([np.asarray(g, dtype=float) for g in grads], lr)
    return opt.params, opt.velocity
