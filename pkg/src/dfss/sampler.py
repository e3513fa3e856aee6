"""Sample selection against a frozen teacher.

ADS scores every open-world sample by how far the channel statistics of its
feature maps sit from the teacher's batch-norm running statistics, keeps the
closest ``epsilon``, and turns their distances into [0, 1] weights. Random
and confidence sampling are the baselines.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import BatchNorm2d, softmax
from .corpus import STRATA
from .nets import clone, forward_with_stats, load_checkpoint


class UnusableTeacher(ValueError):
    pass


@dataclass(frozen=True)
class BnReference:
    layer_ids: tuple
    means: tuple
    variances: tuple

    def __len__(self):
        return len(self.layer_ids)


@dataclass
class SampleScore:
    id: int
    terms: np.ndarray
    d: float
    omega: float = 1.0
    rank: int = 0


@dataclass
class Scoring:
    """Exhaustive per-sample scores over a corpus, in corpus order."""

    ids: np.ndarray
    strata: np.ndarray
    terms: np.ndarray       # N x L per-layer distance terms
    d: np.ndarray           # N aggregate distances
    confidence: np.ndarray  # N mean max-softmax teacher confidence


@dataclass
class SelectionResult:
    strategy: str
    epsilon: int
    ids: list
    seed: int | None = None
    scores: list | None = None
    confidence: list | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.ids) != self.epsilon:
            raise ValueError(f"selection holds {len(self.ids)} ids for epsilon={self.epsilon}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("selection ids are not unique")

    @property
    def weights(self):
        """Per-sample weights in selection order; 1 for baselines."""
        if self.scores is None:
            return np.ones(self.epsilon)
        return np.array([s.omega for s in self.scores])

    def to_dict(self):
        d = {"strategy": self.strategy, "epsilon": self.epsilon, "seed": self.seed,
             "config_hash": self.config_hash, "ids": [int(i) for i in self.ids]}
        d["scores"] = None if self.scores is None else [
            {"id": int(s.id), "d": float(s.d), "omega": float(s.omega), "rank": int(s.rank),
             "terms": [float(x) for x in s.terms]} for s in self.scores]
        d["confidence"] = None if self.confidence is None else [float(c) for c in self.confidence]
        return d

    @classmethod
    def from_dict(cls, d):
        scores = None
        if d.get("scores") is not None:
            scores = [SampleScore(s["id"], np.array(s["terms"]), s["d"], s["omega"], s["rank"])
                      for s in d["scores"]]
        return cls(d["strategy"], d["epsilon"], list(d["ids"]), d.get("seed"), scores,
                   d.get("confidence"), d.get("config_hash", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def harvest_bn_reference(teacher):
    """Copy every batch-norm layer's running statistics out of a teacher
    (a network or a checkpoint path)."""
    net = teacher if hasattr(teacher, "layers") else load_checkpoint(teacher)
    ids, means, variances = [], [], []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm2d):
            m = np.array(layer.running_mean, copy=True)
            v = np.array(layer.running_var, copy=True)
            if np.any(v < 0):
                raise UnusableTeacher(f"layer {i}: negative running variance")
            m.setflags(write=False)
            v.setflags(write=False)
            ids.append(i)
            means.append(m)
            variances.append(v)
    if not ids:
        raise UnusableTeacher("teacher has no batch-norm layers to take statistics from")
    return BnReference(tuple(ids), tuple(means), tuple(variances))


def distribution_distance(stats, ref, layers=None, reduce="mean"):
    """Per-layer ``(||mu - mu_bn|| + ||var - var_bn||) / sqrt(C)`` and their
    mean (or sum) over the chosen layers. Returns ``(terms, d)``."""
    if len(stats.means) != len(ref):
        raise ValueError(f"stats cover {len(stats.means)} layers, reference has {len(ref)}")
    chosen = range(len(ref)) if layers is None else layers
    terms = []
    for k in chosen:
        mu = np.asarray(stats.means[k], dtype=np.float64)
        var = np.asarray(stats.variances[k], dtype=np.float64)
        if mu.shape != ref.means[k].shape or var.shape != ref.variances[k].shape:
            raise ValueError(f"layer {k}: stats have {mu.shape[0]} channels, "
                             f"reference has {ref.means[k].shape[0]}")
        gap = (np.linalg.norm(mu - ref.means[k].astype(np.float64))
               + np.linalg.norm(var - ref.variances[k].astype(np.float64)))
        terms.append(gap / np.sqrt(mu.shape[0]))
    terms = np.array(terms)
    if reduce == "mean":
        d = float(terms.mean())
    elif reduce == "sum":
        d = float(terms.sum())
    else:
        raise ValueError(f"reduce must be 'mean' or 'sum', got {reduce!r}")
    return terms, d


def compute_weights(distances):
    """``1 - (d - min) / (max - min)``; all ones when every distance is equal."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("need at least one distance")
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.ones_like(d)
    return 1.0 - (d - lo) / (hi - lo)


def _workers():
    try:
        return max(1, int(os.environ.get("DFSS_THREADS", "1")))
    except ValueError:
        return 1


def score_corpus(corpus, teacher, ref=None, layers=None, reduce="mean", threads=None):
    """Run every sample through the frozen teacher once, recording the
    distribution distance and the prediction confidence."""
    if teacher.training:
        raise RuntimeError("teacher must be frozen (eval mode) for scoring")
    ref = harvest_bn_reference(teacher) if ref is None else ref
    n = len(corpus)
    n_terms = len(ref) if layers is None else len(layers)
    terms = np.empty((n, n_terms))
    d = np.empty(n)
    conf = np.empty(n)

    def run(net, rows):
        for i in rows:
            out, stats = forward_with_stats(net, corpus.images[i:i + 1])
            terms[i], d[i] = distribution_distance(stats, ref, layers, reduce)
            conf[i] = softmax(out.astype(np.float64)).max(axis=1).mean()

    threads = _workers() if threads is None else threads
    if threads <= 1:
        run(teacher, range(n))
    else:
        # layers keep a forward cache, so each worker gets its own copy
        chunks = np.array_split(np.arange(n), threads)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, [clone(teacher) for _ in chunks], chunks))
    return Scoring(corpus.ids.copy(), corpus.strata.copy(), terms, d, conf)


def _check_epsilon(epsilon, n):
    if epsilon < 1:
        raise ValueError(f"epsilon must be >= 1, got {epsilon}")
    if epsilon > n:
        raise ValueError(f"epsilon={epsilon} exceeds corpus size {n}")


def ads_select(corpus, teacher, epsilon, scoring=None, **score_kw):
    """Keep the ``epsilon`` samples with the smallest distance (ties by id)
    and weight them over the selected subset."""
    _check_epsilon(epsilon, len(corpus))
    if scoring is None:
        scoring = score_corpus(corpus, teacher, **score_kw)
    order = np.lexsort((scoring.ids, scoring.d))[:epsilon]
    omega = compute_weights(scoring.d[order])
    scores = [SampleScore(int(scoring.ids[i]), scoring.terms[i], float(scoring.d[i]),
                          float(w), rank + 1) for rank, (i, w) in enumerate(zip(order, omega))]
    return SelectionResult("ads", epsilon, [s.id for s in scores], None, scores)


def random_select(corpus, epsilon, seed):
    _check_epsilon(epsilon, len(corpus))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(corpus), size=epsilon, replace=False)
    return SelectionResult("random", epsilon, [int(corpus.ids[i]) for i in picked], int(seed))


def confidence_select(corpus, teacher, epsilon, scoring=None, **score_kw):
    """Keep the ``epsilon`` most confident samples (ties by ascending id)."""
    _check_epsilon(epsilon, len(corpus))
    if scoring is None:
        scoring = score_corpus(corpus, teacher, **score_kw)
    order = np.lexsort((scoring.ids, -scoring.confidence))[:epsilon]
    return SelectionResult("confidence", epsilon, [int(scoring.ids[i]) for i in order],
                           confidence=[float(scoring.confidence[i]) for i in order])


def stratum_fractions(selection, corpus):
    strata = corpus.strata[corpus.index_of(selection.ids)]
    return {s: float(np.mean(strata == k)) for k, s in enumerate(STRATA)}


def mean_distance_by_stratum(scoring):
    out = {}
    for k, s in enumerate(STRATA):
        mask = scoring.strata == k
        out[s] = float(scoring.d[mask].mean()) if mask.any() else None
    return out


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

CSV_FIELDS = ("id", "stratum", "d", "omega", "confidence")


def _fmt(v):
    return "" if v is None else repr(float(v))


def stats_rows(item, corpus=None):
    """Rows ``{id, stratum, d, omega, confidence}`` for a Scoring or a
    SelectionResult (the latter needs ``corpus`` to look up strata)."""
    rows = []
    if isinstance(item, Scoring):
        for i in range(len(item.ids)):
            rows.append({"id": int(item.ids[i]), "stratum": STRATA[item.strata[i]],
                         "d": item.d[i], "omega": None, "confidence": item.confidence[i]})
    else:
        strata = {}
        if corpus is not None:
            idx = corpus.index_of(item.ids)
            strata = {int(corpus.ids[i]): STRATA[corpus.strata[i]] for i in idx}
        scores = {s.id: s for s in item.scores} if item.scores else {}
        conf = dict(zip(item.ids, item.confidence)) if item.confidence else {}
        for sid in item.ids:
            s = scores.get(sid)
            rows.append({"id": int(sid), "stratum": strata.get(int(sid), ""),
                         "d": None if s is None else s.d, "omega": None if s is None else s.omega,
                         "confidence": conf.get(sid)})
    if not rows:
        raise ValueError("nothing to export")
    return sorted(rows, key=lambda r: r["id"])


def export_stats_csv(item, path, corpus=None):
    rows = stats_rows(item, corpus)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r["id"], r["stratum"], _fmt(r["d"]), _fmt(r["omega"]), _fmt(r["confidence"])])
    return len(rows)


def read_stats_csv(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({"id": int(r["id"]), "stratum": r["stratum"],
                        **{k: (float(r[k]) if r[k] != "" else None) for k in ("d", "omega", "confidence")}})
    return out
