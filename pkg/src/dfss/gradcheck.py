"""Central finite-difference checks for the hand-written backward passes.

Each probe compares one analytic partial derivative with
``(f(x + h) - f(x - h)) / 2h`` in float64. The relative error is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
near-zero partials from turning round-off into huge ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (BatchNorm2d, Conv2d, L1Loss, ReLU, SoftmaxCrossEntropy, Upsample)

H = 1e-5
FLOOR = 1e-6


@dataclass
class ProbeResult:
    layer: str
    target: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self):
        denom = max(abs(self.analytic), abs(self.numeric), FLOOR)
        return abs(self.analytic - self.numeric) / denom


def _central(f, arr, index, h=H):
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def _probe(arr, rng, n):
    flat = rng.choice(arr.size, size=min(n, arr.size), replace=False)
    return [np.unravel_index(i, arr.shape) for i in flat]


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def check_layer(name, seed, probes=4):
    """Probe one layer kind at ``seed``. Returns a list of ProbeResult."""
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    results = []

    if name in ("conv2d", "batchnorm", "batchnorm_eval", "relu", "bilinear_upsample"):
        if name == "conv2d":
            k = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            layer = Conv2d(c, int(rng.integers(1, 4)), k, stride=stride, padding=k // 2,
                           rng=rng, dtype=np.float64)
            layer.params["bias"] = rng.standard_normal(layer.params["bias"].shape)
            x = rng.standard_normal((n, c, h, w))
        elif name.startswith("batchnorm"):
            layer = BatchNorm2d(c, dtype=np.float64)
            layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
            layer.params["beta"] = rng.standard_normal(c)
            if name == "batchnorm_eval":
                layer.running_mean = rng.standard_normal(c)
                layer.running_var = rng.uniform(0.5, 2.0, c)
                layer.training = False
            x = rng.standard_normal((n, c, h, w)) * 2 + 0.5
        elif name == "relu":
            layer = ReLU()
            x = _away_from_zero(rng, (n, c, h, w))
        else:
            layer = Upsample(int(rng.integers(2, 4)))
            x = rng.standard_normal((n, c, h, w))
        out = layer.forward(x)
        upstream = rng.standard_normal(out.shape)
        layer.zero_grad()
        dx = layer.backward(upstream)

        def f():
            return float((layer.forward(x) * upstream).sum())

        for idx in _probe(x, rng, probes):
            results.append(ProbeResult(name, "input", idx, dx[idx], _central(f, x, idx)))
        for key, p in layer.params.items():
            g = layer.grads[key]
            for idx in _probe(p, rng, probes):
                results.append(ProbeResult(name, key, idx, g[idx], _central(f, p, idx)))
        return results

    if name == "softmax_cross_entropy":
        k = int(rng.integers(2, 5))
        z = rng.standard_normal((n, k, h, w)) * 2
        labels = rng.integers(0, k, size=(n, h, w))
        loss = SoftmaxCrossEntropy()
        loss.forward(z, labels)
        g = loss.backward()

        def f():
            return loss.forward(z, labels)
    elif name in ("l1_loss", "l1_loss_probs"):
        space = "probs" if name.endswith("probs") else "logits"
        t = rng.standard_normal((n, c + 1, h, w))
        z = t + _away_from_zero(rng, t.shape)
        weights = rng.uniform(0.0, 1.0, size=n)
        loss = L1Loss(space)
        loss.forward(z, t, weights)
        g = loss.backward()

        def f():
            return loss.forward(z, t, weights)
    else:
        raise ValueError(f"unknown layer {name!r}")
    for idx in _probe(z, rng, probes):
        results.append(ProbeResult(name, "input", idx, g[idx], _central(f, z, idx)))
    return results


LAYERS = ("conv2d", "batchnorm", "batchnorm_eval", "relu", "bilinear_upsample",
          "softmax_cross_entropy", "l1_loss", "l1_loss_probs")


def max_rel_error(name, seeds):
    worst = 0.0
    count = 0
    for s in seeds:
        for r in check_layer(name, s):
            worst = max(worst, r.rel_error)
            count += 1
    return worst, count
