"""Dense tensor engine: layers with hand-written backward passes and losses.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. float32 is the
working precision; every layer also runs in float64 so that gradients can be
checked against finite differences.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit together."""


class TapeError(RuntimeError):
    """Raised when a backward pass runs without a cached forward pass."""


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{name}: {bad} non-finite value(s) out of {np.size(arr)}")


def _require_4d(name, x):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be N x C x H x W, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride, ho, wo):
    # (N, C, Hp, Wp) -> (C*kh*kw, N*Ho*Wo); one strided slice per kernel offset
    n, c = x.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation. Returns ``(out, cache)``; ``cache`` feeds the backward."""
    _require_4d("conv2d input", x)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be Cout x Cin x kh x kw, got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise DimensionError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = kernel.reshape(cout, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    cache = (cols, x.shape, kernel, stride, padding, ho, wo)
    return out, cache


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    return conv2d_forward(x, kernel, bias, stride, padding)[0]


def conv2d_backward(grad, cache):
    """Returns ``(dx, dkernel, dbias)``."""
    cols, xshape, kernel, stride, padding, ho, wo = cache
    n, cin, h, w = xshape
    cout, _, kh, kw = kernel.shape
    if grad.shape != (n, cout, ho, wo):
        raise DimensionError(f"conv2d backward: grad shape {grad.shape} != {(n, cout, ho, wo)}")
    gm = grad.transpose(1, 0, 2, 3).reshape(cout, -1)
    dkernel = (gm @ cols.T).reshape(kernel.shape)
    dbias = gm.sum(axis=1)
    dcols = (kernel.reshape(cout, -1).T @ gm).reshape(cin, kh, kw, n, ho, wo)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dkernel, dbias


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer. ``params`` and ``grads`` share keys; ``_cache`` is the tape."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.training = True
        self._cache = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _tape(self):
        if self._cache is None:
            raise TapeError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        self._cache = None
        return self


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None,
                 rng=None, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        rng = np.random.default_rng() if rng is None else rng
        w = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size))
        self.params["weight"] = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        out, self._cache = conv2d_forward(
            x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        return out

    def backward(self, grad):
        dx, dw, db = conv2d_backward(grad, self._tape())
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class BatchNorm2d(Layer):
    """Per-channel normalization with running statistics.

    Running variance is updated with the biased batch variance, the same
    quantity the eval-mode normalizer divides by.
    """

    def __init__(self, num_channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(num_channels, dtype=dtype)
        self.params["beta"] = np.zeros(num_channels, dtype=dtype)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.zero_grad()

    def astype(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return super().astype(dtype)

    def forward(self, x):
        _require_4d("batchnorm input", x)
        n, c = x.shape[:2]
        if n == 0:
            raise DimensionError("batchnorm: zero batch size")
        if c != self.num_channels:
            raise DimensionError(f"batchnorm: input has {c} channels, layer has {self.num_channels}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return gamma * xhat + beta

    def backward(self, grad):
        xhat, inv_std, training = self._tape()
        gamma = self.params["gamma"]
        self.grads["gamma"] += (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += grad.sum(axis=(0, 2, 3))
        dxhat = grad * gamma[None, :, None, None]
        if not training:
            return dxhat * inv_std[None, :, None, None]
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)


def batchnorm_forward(x, layer):
    """Functional entry point: runs ``layer`` in whatever mode it is in."""
    return layer.forward(x)


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._tape()


def bilinear_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic interpolation matrix (n_out x n_in), align_corners=False.

    Output coordinate ``i`` samples the input at
    ``src = (i + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``;
    the two neighbours ``floor(src)`` and ``floor(src) + 1`` get weights
    ``1 - frac`` and ``frac``.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


class Upsample(Layer):
    def __init__(self, scale=2):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        _require_4d("upsample input", x)
        h, w = x.shape[2:]
        ah = bilinear_matrix(h, h * self.scale, x.dtype)
        aw = bilinear_matrix(w, w * self.scale, x.dtype)
        self._cache = (ah, aw)
        return np.ascontiguousarray(ah @ x @ aw.T)

    def backward(self, grad):
        ah, aw = self._tape()
        return np.ascontiguousarray(ah.T @ grad @ aw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad, probs, axis=1):
    return probs * (grad - (grad * probs).sum(axis=axis, keepdims=True))


class SoftmaxCrossEntropy:
    """Per-pixel cross-entropy, averaged over every pixel in the batch."""

    def __init__(self):
        self._cache = None

    def forward(self, logits, labels):
        _require_4d("logits", logits)
        n, k, h, w = logits.shape
        if labels.shape != (n, h, w):
            raise DimensionError(f"labels shape {labels.shape} != {(n, h, w)}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"label index out of range [0, {k})")
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        picked = np.take_along_axis(z, labels[:, None].astype(np.intp), axis=1)[:, 0]
        loss = float((logsum - picked).mean())
        self._cache = (logits, labels)
        return loss

    def backward(self):
        if self._cache is None:
            raise TapeError("SoftmaxCrossEntropy.backward called before forward")
        logits, labels = self._cache
        p = softmax(logits)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
        return (p - onehot) / (labels.size)


def l1_loss(a, b):
    """Mean absolute elementwise difference."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


class L1Loss:
    """Per-sample weighted L1 between student and teacher outputs.

    ``forward(student, teacher, weights)`` returns
    ``mean_i(weights[i] * mean|student_i - teacher_i|)``. With ``space="probs"``
    both tensors are passed through a channel softmax first. Only the student
    side receives a gradient.
    """

    def __init__(self, space="logits"):
        if space not in ("logits", "probs"):
            raise ValueError(f"unknown kd space {space!r}")
        self.space = space
        self._cache = None

    def per_sample(self, student, teacher):
        if student.shape != teacher.shape:
            raise DimensionError(f"L1Loss: shape mismatch {student.shape} vs {teacher.shape}")
        if self.space == "probs":
            student, teacher = softmax(student), softmax(teacher)
        diff = student - teacher
        return np.abs(diff).reshape(len(diff), -1).mean(axis=1), diff, student

    def forward(self, student, teacher, weights=None):
        n = student.shape[0]
        if weights is None:
            weights = np.ones(n, dtype=student.dtype)
        weights = np.asarray(weights, dtype=student.dtype)
        if weights.shape != (n,):
            raise DimensionError(f"L1Loss: {len(weights)} weights for batch of {n}")
        per, diff, s_out = self.per_sample(student, teacher)
        self._cache = (diff, weights, s_out)
        return float((weights * per).mean())

    def backward(self):
        if self._cache is None:
            raise TapeError("L1Loss.backward called before forward")
        diff, weights, s_out = self._cache
        n = diff.shape[0]
        count = diff[0].size
        scale = (weights / (n * count)).astype(diff.dtype)
        g = np.sign(diff) * scale.reshape((n,) + (1,) * (diff.ndim - 1))
        if self.space == "probs":
            g = softmax_backward(g, s_out)
        return g
