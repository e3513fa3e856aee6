"""Toy teacher/student segmentation networks and their checkpoint format.

A network is a flat stack of conv / bn / relu / upsample layers ending in a
1x1 conv that emits per-pixel logits at input resolution.

Checkpoint layout (little-endian)::

    8s   magic "DFSSCKPT"
    u32  format version (1)
    32s  sha256 digest of the canonical network-spec JSON
    u64  seed used to initialise the parameters
    u64  P, number of parameter scalars
    f32  x P parameter payload, in ``Network.parameters()`` order
    u32  L, number of batch-norm layers
    L x { u32 C; f32 x C running_mean; f32 x C running_var }
    u32  byte length of the spec JSON, followed by the UTF-8 JSON itself
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import BatchNorm2d, Conv2d, DimensionError, ReLU, Upsample

MAGIC = b"DFSSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Layer descriptors are tuples: ``("conv", out_channels, kernel, stride)``,
    ``("bn",)``, ``("relu",)`` or ``("up", scale)``."""

    layers: tuple
    num_classes: int = 4
    input_shape: tuple = (3, 32, 32)
    role: str = "teacher"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = tuple(tuple(l) for l in d["layers"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).digest()


def _block(ch, stride=1):
    return (("conv", ch, 3, stride), ("bn",), ("relu",))


def teacher_spec(num_classes=4, input_shape=(3, 32, 32), width=16):
    layers = (_block(width) + _block(width) + _block(2 * width, stride=2)
              + _block(2 * width) + (("up", 2),) + _block(width) + _block(width)
              + (("conv", num_classes, 1, 1),))
    return NetworkSpec(layers, num_classes, tuple(input_shape), "teacher")


def student_spec(num_classes=4, input_shape=(3, 32, 32), width=12):
    layers = _block(width) * 3 + (("conv", num_classes, 1, 1),)
    return NetworkSpec(layers, num_classes, tuple(input_shape), "student")


@dataclass
class FeatureStats:
    """Per-BN-layer channel means and population variances of one sample."""

    means: list = field(default_factory=list)
    variances: list = field(default_factory=list)

    def __len__(self):
        return len(self.means)


class Network:
    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.layers = []
        c, h, w = spec.input_shape
        for i, desc in enumerate(spec.layers):
            kind = desc[0]
            if kind == "conv":
                _, cout, k, stride = desc
                if k > h + 2 * (k // 2) or k > w + 2 * (k // 2):
                    raise DimensionError(f"layer {i}: kernel {k} too large for {h}x{w}")
                self.layers.append(Conv2d(c, cout, k, stride, rng=rng, dtype=dtype))
                c = cout
                h = (h + 2 * (k // 2) - k) // stride + 1
                w = (w + 2 * (k // 2) - k) // stride + 1
            elif kind == "bn":
                self.layers.append(BatchNorm2d(c, spec.bn_momentum, spec.bn_eps, dtype=dtype))
            elif kind == "relu":
                self.layers.append(ReLU())
            elif kind == "up":
                self.layers.append(Upsample(desc[1]))
                h, w = h * desc[1], w * desc[1]
            else:
                raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
        if (c, h, w) != (spec.num_classes,) + tuple(spec.input_shape[1:]):
            raise DimensionError(
                f"network output {c}x{h}x{w} does not match "
                f"{spec.num_classes}x{spec.input_shape[1]}x{spec.input_shape[2]}")
        self.training = True

    # -- modes ------------------------------------------------------------
    def train(self):
        self.training = True
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        self.training = False
        for layer in self.layers:
            layer.training = False
        return self

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def bn_layers(self):
        return [l for l in self.layers if isinstance(l, BatchNorm2d)]

    # -- parameters -------------------------------------------------------
    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                out.append((f"{i}.{type(layer).__name__}.{key}", layer, key))
        return out

    def parameters(self):
        return [layer.params[key] for _, layer, key in self.named_parameters()]

    def gradients(self):
        return [layer.grads[key] for _, layer, key in self.named_parameters()]

    def parameter_names(self):
        return [name for name, _, _ in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    # -- passes -----------------------------------------------------------
    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def state_bytes(self):
        """Byte string of every parameter and running statistic."""
        parts = [p.tobytes() for p in self.parameters()]
        for bn in self.bn_layers:
            parts += [bn.running_mean.tobytes(), bn.running_var.tobytes()]
        return b"".join(parts)


def build_network(spec, seed, dtype=np.float32):
    return Network(spec, seed, dtype)


def forward_with_stats(net, x):
    """Eval-mode forward of a single sample, recording the channel mean and
    population variance over H x W of every batch-norm layer's input."""
    if net.training:
        raise RuntimeError("forward_with_stats needs an eval-mode network; "
                           "train mode would update running statistics")
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"forward_with_stats takes a 1 x C x H x W sample, got {x.shape}")
    stats = FeatureStats()
    for layer in net.layers:
        if isinstance(layer, BatchNorm2d):
            stats.means.append(x[0].mean(axis=(1, 2)))
            stats.variances.append(x[0].var(axis=(1, 2)))
        x = layer.forward(x)
    return x, stats


def predict(net, images, batch_size=64):
    """Eval-mode argmax labels for ``images`` (N x C x H x W)."""
    was_training = net.training
    net.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(net.forward(images[i:i + batch_size]).argmax(axis=1))
    if was_training:
        net.train()
    return np.concatenate(out).astype(np.int64)


def logits(net, images, batch_size=64):
    """Eval-mode logits for ``images``; the network is left in eval mode."""
    net.eval()
    return np.concatenate([net.forward(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(net):
    spec_json = net.spec.to_json().encode()
    params = np.concatenate([p.ravel() for p in net.parameters()]).astype("<f4")
    buf = [MAGIC, struct.pack("<I", VERSION), net.spec.digest(),
           struct.pack("<QQ", net.seed, params.size), params.tobytes()]
    bns = net.bn_layers
    buf.append(struct.pack("<I", len(bns)))
    for bn in bns:
        buf.append(struct.pack("<I", bn.num_channels))
        buf.append(bn.running_mean.astype("<f4").tobytes())
        buf.append(bn.running_var.astype("<f4").tobytes())
    buf.append(struct.pack("<I", len(spec_json)))
    buf.append(spec_json)
    return b"".join(buf)


def save_checkpoint(net, path):
    data = checkpoint_bytes(net)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data, spec=None):
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(32)
    seed, count = r.unpack("<QQ")
    params = np.frombuffer(r.take(4 * count), dtype="<f4")
    (n_bn,) = r.unpack("<I")
    running = []
    for _ in range(n_bn):
        (c,) = r.unpack("<I")
        mean = np.frombuffer(r.take(4 * c), dtype="<f4")
        var = np.frombuffer(r.take(4 * c), dtype="<f4")
        running.append((mean, var))
    (n_json,) = r.unpack("<I")
    embedded = NetworkSpec.from_dict(json.loads(r.take(n_json).decode()))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    if embedded.digest() != digest:
        raise CheckpointError("checkpoint corrupted: embedded spec does not match its digest")
    if spec is not None and spec.digest() != digest:
        raise CheckpointError(
            f"spec digest mismatch: checkpoint holds a {embedded.role} network, "
            f"requested spec is a {spec.role} network with a different layout")
    net = Network(embedded, seed)
    if net.num_parameters() != count:
        raise CheckpointError(f"parameter count {count} does not fit the spec ({net.num_parameters()})")
    offset = 0
    for _, layer, key in net.named_parameters():
        p = layer.params[key]
        layer.params[key] = params[offset:offset + p.size].reshape(p.shape).astype(np.float32)
        offset += p.size
    net.zero_grad()
    if len(running) != len(net.bn_layers):
        raise CheckpointError("batch-norm layer count does not fit the spec")
    for bn, (mean, var) in zip(net.bn_layers, running):
        if mean.size != bn.num_channels:
            raise CheckpointError("batch-norm channel count does not fit the spec")
        bn.running_mean = mean.astype(np.float32)
        bn.running_var = var.astype(np.float32)
    return net.eval()


def load_checkpoint(path, spec=None):
    """Load a network in eval mode. ``spec``, if given, must match the digest."""
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data, spec)


def clone(net):
    out = checkpoint_from_bytes(checkpoint_bytes(net))
    if net.training:
        out.train()
    return out
