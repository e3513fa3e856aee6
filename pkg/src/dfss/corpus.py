"""Synthetic segmentation scenes, the stratified open-world corpus, and
image-entropy richness statistics.

Original scenes are a smooth textured grey background with 1-3 flat-ish
shapes on top. The shape kind is the class (1 circle, 2 square, 3 triangle)
and each class draws its colour from its own hue band, so the teacher can
lean on both colour and geometry.

Every record is a pure function of ``(config, seed, index)``: the record's
private generator is seeded from ``SeedSequence([seed, stream, index])``.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

STRATA = ("in_dist", "shifted", "ood")
SHAPES = {1: "circle", 2: "square", 3: "triangle"}
IMG_MAGIC = b"DFSSIMG1"
_RECORD_HEADER = struct.Struct("<IBHH")

# stream tags keep the per-record generators of different corpora disjoint
_STREAM_ORIGINAL = 11
_STREAM_OPENWORLD = 23
_STREAM_ASSIGN = 37


@dataclass(frozen=True)
class CorpusConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    radius: tuple = (5.0, 10.0)
    class_hues: tuple = (0.0, 0.33, 0.62)
    hue_jitter: float = 0.04
    saturation: tuple = (0.6, 0.95)
    value: tuple = (0.6, 0.95)
    shape_noise: float = 0.02
    background_gray: tuple = (0.42, 0.58)
    background_tint: float = 0.05
    texture_amplitude: float = 0.15
    texture_noise: float = 0.03
    shift_hue_degrees: tuple = (90.0, 270.0)
    shift_noise: tuple = (0.1, 0.2)
    shift_brightness: tuple = (0.15, 0.3)
    ood_kinds: tuple = (("flat", 0.15), ("grating", 0.25), ("noise", 0.6))
    ood_gray_fraction: float = 0.5
    grating_noise: float = 0.03

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("radius", "class_hues", "saturation", "value", "background_gray",
                    "shift_hue_degrees", "shift_noise", "shift_brightness"):
            if key in d:
                d[key] = tuple(d[key])
        if "ood_kinds" in d:
            d["ood_kinds"] = tuple((str(k), float(w)) for k, w in d["ood_kinds"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ImageRecord:
    id: int
    stratum: str
    pixels: np.ndarray
    seed: int
    labels: np.ndarray | None = None


@dataclass
class EntropyReport:
    values: np.ndarray
    mean: float
    median: float
    variance: float

    def summary(self):
        return {"mean": self.mean, "median": self.median, "variance": self.variance}


@dataclass
class CorpusManifest:
    name: str
    record_count: int
    stratum_proportions: dict
    config_hash: str
    entries: list
    labeled: bool = False
    height: int = 32
    width: int = 32
    num_classes: int = 4
    generator_seed: int = 0
    richness: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    payload: str = ""

    def __post_init__(self):
        if len(self.entries) != self.record_count:
            raise ValueError(f"manifest has {len(self.entries)} entries for {self.record_count} records")
        total = sum(self.stratum_proportions.values())
        if self.record_count and abs(total - 1.0) > 1e-9:
            raise ValueError(f"stratum proportions sum to {total}, not 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class Corpus:
    name: str
    images: np.ndarray           # N x 3 x H x W float32 in [0, 1]
    ids: np.ndarray              # N int64
    strata: np.ndarray           # N int8, index into STRATA
    seeds: np.ndarray            # N uint64 per-record generator seeds
    config: CorpusConfig
    generator_seed: int = 0
    labels: np.ndarray | None = None  # N x H x W uint8, original data only

    def __len__(self):
        return len(self.ids)

    @property
    def labeled(self):
        return self.labels is not None

    def record(self, i):
        return ImageRecord(int(self.ids[i]), STRATA[self.strata[i]], self.images[i],
                           int(self.seeds[i]), None if self.labels is None else self.labels[i])

    def index_of(self, ids):
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        return np.array([lookup[int(v)] for v in ids], dtype=np.int64)

    def subset(self, ids, name=None):
        idx = self.index_of(ids)
        return Corpus(name or self.name, self.images[idx], self.ids[idx], self.strata[idx],
                      self.seeds[idx], self.config, self.generator_seed,
                      None if self.labels is None else self.labels[idx])

    def split_hash(self):
        h = hashlib.sha256()
        h.update(self.ids.astype("<i8").tobytes())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()

    def stratum_counts(self):
        return {s: int(np.sum(self.strata == k)) for k, s in enumerate(STRATA)}

    def manifest(self, payload="", offsets=None, richness=None):
        n = len(self)
        counts = self.stratum_counts()
        props = {s: (c / n if n else 0.0) for s, c in counts.items()}
        if offsets is None:
            offsets = [None] * n
        entries = [{"id": int(self.ids[i]), "stratum": STRATA[self.strata[i]],
                    "seed": int(self.seeds[i]), "offset": offsets[i]} for i in range(n)]
        if richness is None:
            richness = corpus_richness(self).summary()
        return CorpusManifest(self.name, n, props, self.config.digest(), entries,
                              self.labeled, self.config.height, self.config.width,
                              self.config.num_classes, int(self.generator_seed),
                              richness, self.config.to_dict(), payload)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def record_seed(seed, stream, index):
    lo, hi = np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def _palette_color(rng, cfg, cls):
    hue = (cfg.class_hues[cls - 1] + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)) % 1.0
    sat = rng.uniform(*cfg.saturation)
    val = rng.uniform(*cfg.value)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def sample_scene(rng, cfg):
    """Draw shape parameters for one scene: a list of dicts, painted in order."""
    shapes = []
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        cls = int(rng.integers(1, 4))
        r = float(rng.uniform(*cfg.radius))
        cx = float(rng.uniform(r * 0.5, cfg.width - r * 0.5))
        cy = float(rng.uniform(r * 0.5, cfg.height - r * 0.5))
        angle = float(rng.uniform(0.0, 2 * math.pi))
        shapes.append({"cls": cls, "kind": SHAPES[cls], "cx": cx, "cy": cy, "r": r,
                       "angle": angle, "color": _palette_color(rng, cfg, cls)})
    return shapes


TRIANGLE_CIRCUMRADIUS = 1.25


def triangle_vertices(shape):
    cx, cy, a = shape["cx"], shape["cy"], shape["angle"]
    r = TRIANGLE_CIRCUMRADIUS * shape["r"]
    return [(cx + r * math.cos(a + 2 * math.pi * k / 3), cy + r * math.sin(a + 2 * math.pi * k / 3))
            for k in range(3)]


SQUARE_HALF_SIDE = 0.85


def shape_mask(shape, height, width):
    """Boolean H x W mask of pixels whose centre lies inside ``shape``."""
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    cx, cy, r = shape["cx"], shape["cy"], shape["r"]
    kind = shape["kind"]
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "square":
        a = SQUARE_HALF_SIDE * r
        return (np.abs(px - cx) <= a) & (np.abs(py - cy) <= a)
    if kind == "triangle":
        v = triangle_vertices(shape)
        edges = []
        for k in range(3):
            (x0, y0), (x1, y1) = v[k], v[(k + 1) % 3]
            edges.append((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
        e = np.stack(edges)
        return np.all(e >= 0, axis=0) | np.all(e <= 0, axis=0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng, cfg):
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    tex = np.zeros((h, w))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 4.0, size=2) * rng.choice([-1, 1], size=2)
        tex += np.sin(2 * math.pi * (fx * xs + fy * ys) + rng.uniform(0, 2 * math.pi))
    gray = rng.uniform(*cfg.background_gray)
    tint = rng.uniform(-cfg.background_tint, cfg.background_tint, size=3)
    img = gray + tint[:, None, None] + cfg.texture_amplitude / 3 * tex[None]
    img = img + rng.normal(0.0, cfg.texture_noise, size=(3, h, w))
    return img


def render_scene(rng, cfg, shapes):
    """Paint ``shapes`` over a fresh background drawn from ``rng``."""
    img = _background(rng, cfg)
    labels = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for s in shapes:
        m = shape_mask(s, cfg.height, cfg.width)
        noise = rng.normal(0.0, cfg.shape_noise, size=(3, int(m.sum())))
        img[:, m] = s["color"][:, None] + noise
        labels[m] = s["cls"]
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def _scene(rng, cfg):
    while True:
        img, labels = render_scene(rng, cfg, sample_scene(rng, cfg))
        if np.any(labels == 0):
            return img, labels


def hue_rotation_matrix(degrees):
    """Rotation of RGB space about the grey axis by ``degrees``."""
    t = math.radians(degrees)
    k = np.ones(3) / math.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return math.cos(t) * np.eye(3) + math.sin(t) * kx + (1 - math.cos(t)) * np.outer(k, k)


def _shifted(rng, cfg):
    img, _ = _scene(rng, cfg)
    rot = hue_rotation_matrix(rng.uniform(*cfg.shift_hue_degrees))
    img = np.einsum("ij,jhw->ihw", rot, img.astype(np.float64))
    img = img + rng.choice([-1.0, 1.0]) * rng.uniform(*cfg.shift_brightness)
    img = img + rng.normal(0.0, rng.uniform(*cfg.shift_noise), size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _ood_color(rng, cfg):
    # local colour statistics of p(x): background greys or a shape palette
    if rng.uniform() < cfg.ood_gray_fraction:
        gray = rng.uniform(*cfg.background_gray)
        return gray + rng.uniform(-cfg.background_tint, cfg.background_tint, size=3)
    return _palette_color(rng, cfg, int(rng.integers(1, 4)))


def _ood(rng, cfg):
    kinds = [k for k, _ in cfg.ood_kinds]
    weights = np.array([w for _, w in cfg.ood_kinds], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    h, w = cfg.height, cfg.width
    if kind == "flat":
        color = _ood_color(rng, cfg)
        img = np.broadcast_to(color[:, None, None], (3, h, w))
    elif kind == "grating":
        c1 = _ood_color(rng, cfg)
        c2 = _ood_color(rng, cfg)
        period = rng.uniform(4.0, 12.0)
        theta = rng.uniform(0, math.pi)
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        phase = (xs * math.cos(theta) + ys * math.sin(theta)) / period
        blend = 0.5 + 0.5 * np.sin(2 * math.pi * phase)
        img = c1[:, None, None] * blend[None] + c2[:, None, None] * (1.0 - blend[None])
        img = img + rng.normal(0.0, cfg.grating_noise, size=img.shape)
    elif kind == "noise":
        img = rng.uniform(0.0, 1.0, size=(3, h, w))
    else:
        raise ValueError(f"unknown ood kind {kind!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_original(config, seed, n, name="original"):
    """Labelled scenes drawn from the original distribution."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    cfg = config
    images = np.empty((n, 3, cfg.height, cfg.width), dtype=np.float32)
    labels = np.empty((n, cfg.height, cfg.width), dtype=np.uint8)
    seeds = np.empty(n, dtype=np.uint64)
    for i in range(n):
        seeds[i] = record_seed(seed, _STREAM_ORIGINAL, i)
        images[i], labels[i] = _scene(np.random.default_rng(int(seeds[i])), cfg)
    return Corpus(name, images, np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int8),
                  seeds, cfg, int(seed), labels)


def stratum_counts(n, mix):
    """Exact partition of ``n`` by largest-remainder rounding (ties to lower stratum)."""
    mix = np.asarray(mix, dtype=float)
    if len(mix) != len(STRATA) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"mix must be {len(STRATA)} non-negative proportions summing to 1, got {list(mix)}")
    quota = mix * n
    counts = np.floor(quota + 1e-9).astype(int)
    remainder = quota - counts
    order = sorted(range(len(mix)), key=lambda k: (-remainder[k], k))
    for k in order[:n - counts.sum()]:
        counts[k] += 1
    return [int(c) for c in counts]


def gen_openworld(config, seed, n, mix=(0.3, 0.3, 0.4), name="openworld"):
    """Unlabelled stratified corpus: in-distribution scenes, hue/texture
    shifted scenes, and out-of-distribution fields built from the same palette."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    cfg = config
    counts = stratum_counts(n, mix)
    strata = np.repeat(np.arange(len(STRATA), dtype=np.int8), counts)
    assign_rng = np.random.default_rng(record_seed(seed, _STREAM_ASSIGN, 0))
    strata = strata[assign_rng.permutation(n)]
    images = np.empty((n, 3, cfg.height, cfg.width), dtype=np.float32)
    seeds = np.empty(n, dtype=np.uint64)
    makers = (lambda rng: _scene(rng, cfg)[0], lambda rng: _shifted(rng, cfg),
              lambda rng: _ood(rng, cfg))
    for i in range(n):
        seeds[i] = record_seed(seed, _STREAM_OPENWORLD, i)
        images[i] = makers[strata[i]](np.random.default_rng(int(seeds[i])))
    return Corpus(name, images, np.arange(n, dtype=np.int64), strata, seeds, cfg, int(seed))


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def grayscale(pixels):
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]


def image_entropy(pixels):
    """Shannon entropy (bits) of the 256-bin histogram of the grey image."""
    bins = np.clip(np.floor(grayscale(pixels) * 256.0), 0, 255).astype(np.intp)
    counts = np.bincount(bins.ravel(), minlength=256)
    p = counts[counts > 0] / bins.size
    return float(max(0.0, -(p * np.log2(p)).sum()))


def corpus_richness(corpus):
    images = corpus.images if isinstance(corpus, Corpus) else corpus
    if len(images) == 0:
        raise ValueError("richness of an empty corpus is undefined")
    values = np.array([image_entropy(img) for img in images])
    ordered = np.sort(values)
    return EntropyReport(values, float(values.mean()), float(ordered[(len(values) - 1) // 2]),
                         float(values.var()))


def check_selection_principles(original, collected, ratio=10.0):
    """Cardinality and richness checks for a collected corpus against the
    original one. Accepts manifests or corpora."""
    orig = original.manifest() if isinstance(original, Corpus) else original
    coll = collected.manifest() if isinstance(collected, Corpus) else collected
    return {
        "cardinality_ok": bool(coll.record_count >= ratio * orig.record_count),
        "richness_ok": bool(coll.richness["mean"] >= orig.richness["mean"]),
        "task_relevance": "by construction",
        "original_count": orig.record_count,
        "collected_count": coll.record_count,
        "original_mean_entropy": orig.richness["mean"],
        "collected_mean_entropy": coll.richness["mean"],
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_corpus(corpus, directory, name=None):
    """Write ``<name>.bin`` (packed records) and ``<name>.json`` (manifest)."""
    from pathlib import Path

    name = name or corpus.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = corpus.config.height, corpus.config.width
    offsets = []
    chunks = [IMG_MAGIC]
    pos = len(IMG_MAGIC)
    for i in range(len(corpus)):
        offsets.append(pos)
        rec = [_RECORD_HEADER.pack(int(corpus.ids[i]), int(corpus.strata[i]), h, w),
               corpus.images[i].astype("<f4").tobytes()]
        if corpus.labels is not None:
            rec.append(corpus.labels[i].astype(np.uint8).tobytes())
        blob = b"".join(rec)
        chunks.append(blob)
        pos += len(blob)
    (directory / f"{name}.bin").write_bytes(b"".join(chunks))
    manifest = corpus.manifest(payload=f"{name}.bin", offsets=offsets)
    (directory / f"{name}.json").write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
    return manifest


def read_manifest(path):
    with open(path) as fh:
        return CorpusManifest(**json.load(fh))


def read_corpus(directory, name):
    from pathlib import Path

    directory = Path(directory)
    manifest = read_manifest(directory / f"{name}.json")
    data = (directory / manifest.payload).read_bytes()
    if data[:8] != IMG_MAGIC:
        raise ValueError(f"{manifest.payload}: bad magic bytes")
    cfg = CorpusConfig.from_dict(manifest.config)
    if cfg.digest() != manifest.config_hash:
        raise ValueError(f"{name}: config hash does not match manifest")
    n, h, w = manifest.record_count, manifest.height, manifest.width
    images = np.empty((n, 3, h, w), dtype=np.float32)
    labels = np.empty((n, h, w), dtype=np.uint8) if manifest.labeled else None
    ids = np.empty(n, dtype=np.int64)
    strata = np.empty(n, dtype=np.int8)
    seeds = np.empty(n, dtype=np.uint64)
    npix = 3 * h * w
    for i, e in enumerate(manifest.entries):
        off = e["offset"]
        end = off + _RECORD_HEADER.size + 4 * npix + (h * w if labels is not None else 0)
        if end > len(data):
            raise ValueError(f"{manifest.payload}: truncated at record {i}")
        rid, stratum, rh, rw = _RECORD_HEADER.unpack_from(data, off)
        if (rid, STRATA[stratum], rh, rw) != (e["id"], e["stratum"], h, w):
            raise ValueError(f"{manifest.payload}: record {i} header disagrees with manifest")
        off += _RECORD_HEADER.size
        images[i] = np.frombuffer(data, "<f4", npix, off).reshape(3, h, w)
        if labels is not None:
            labels[i] = np.frombuffer(data, np.uint8, h * w, off + 4 * npix).reshape(h, w)
        ids[i], strata[i], seeds[i] = rid, stratum, e["seed"]
    return Corpus(manifest.name, images, ids, strata, seeds, cfg, manifest.generator_seed, labels)


def export_ppm(pixels, path):
    """8-bit binary PPM of a 3 x H x W image, for eyeballing."""
    img = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(img.transpose(1, 2, 0).tobytes())
