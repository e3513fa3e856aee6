"""End-to-end experiment orchestration and reports.

A run directory holds every stage's artifacts for one seed::

    run.json                 config hash + seed, checked by every stage
    corpora/{train,test,openworld}.{bin,json}
    teacher.ckpt, teacher_metrics.csv
    scores.csv               distance and confidence for every open-world sample
    selections/<strategy>.json, selections/<strategy>.csv
    students/<strategy>_<distill>.ckpt, metrics/<strategy>_<distill>.csv
    report.json, report.txt  deterministic; timing.json holds wall-clock
"""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (STRATA, CorpusConfig, check_selection_principles, gen_openworld,
                     gen_original, read_corpus, write_corpus)
from .distiller import (STRATEGIES, TrainConfig, derive_seed, distill, kd_with_original_data,
                        train_teacher, write_metrics_csv)
from .metrics import evaluate, performance_gap
from .nets import load_checkpoint, save_checkpoint, student_spec, teacher_spec
from .sampler import (ads_select, confidence_select, export_stats_csv, mean_distance_by_stratum,
                      random_select, score_corpus, stratum_fractions, SelectionResult)

SELECTIONS = ("ads", "random", "confidence")


class PreconditionError(ValueError):
    """A stage was asked to run on inputs that violate its contract."""


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    n_train: int = 320
    n_test: int = 200
    n_openworld: int = 2000
    mix: tuple = (0.3, 0.3, 0.4)
    teacher_width: int = 16
    student_width: int = 12
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12))
    student: TrainConfig = field(default_factory=TrainConfig)
    kd_reference: TrainConfig | None = field(default_factory=lambda: TrainConfig(epochs=20))
    epsilon: int = 100
    diagnostic_epsilons: tuple = (100, 200)
    selections: tuple = SELECTIONS
    strategies: tuple = STRATEGIES

    def to_dict(self):
        d = asdict(self)
        d["corpus"] = self.corpus.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        base = cls()
        known = set(base.to_dict())
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        if "corpus" in d:
            d["corpus"] = CorpusConfig.from_dict({**base.corpus.to_dict(), **d["corpus"]})
        for key in ("teacher", "student", "kd_reference"):
            if key in d and d[key] is not None:
                start = getattr(base, key) or TrainConfig()
                d[key] = TrainConfig(**{**asdict(start), **d[key]})
        for key in ("mix", "diagnostic_epsilons", "selections", "strategies"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**{**{k: getattr(base, k) for k in known}, **d})
        cfg.validate()
        return cfg

    def validate(self):
        bad = set(self.selections) - set(SELECTIONS)
        if bad:
            raise PreconditionError(f"unknown selection strategies {sorted(bad)}")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise PreconditionError(f"unknown distillation strategies {sorted(bad)}")
        if self.epsilon > self.n_openworld:
            raise PreconditionError(
                f"epsilon={self.epsilon} exceeds the open-world corpus size {self.n_openworld}")

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def specs(self):
        shape = (3, self.corpus.height, self.corpus.width)
        k = self.corpus.num_classes
        return (teacher_spec(k, shape, self.teacher_width),
                student_spec(k, shape, self.student_width))


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# run directory bookkeeping
# ---------------------------------------------------------------------------

class RunDir:
    def __init__(self, root, config, seed):
        self.root = Path(root)
        self.config = config
        self.seed = int(seed)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def init(self):
        """Create the directory and pin it to this config and seed."""
        self.root.mkdir(parents=True, exist_ok=True)
        marker = self.path("run.json")
        if marker.exists():
            self.check()
            return
        _write_json(marker, {"config_hash": self.config.digest(), "seed": self.seed,
                             "config": self.config.to_dict()})

    def check(self):
        marker = self.path("run.json")
        if not marker.exists():
            raise FileNotFoundError(f"{marker} not found; run gen-corpus first")
        with open(marker) as fh:
            pinned = json.load(fh)
        if pinned["config_hash"] != self.config.digest():
            raise PreconditionError(
                f"{self.root} was produced with config {pinned['config_hash'][:12]}, "
                f"current config is {self.config.digest()[:12]}; use a fresh --out directory")
        if pinned["seed"] != self.seed:
            raise PreconditionError(
                f"{self.root} was produced with seed {pinned['seed']}, got --seed {self.seed}")

    def need(self, *parts, hint):
        p = self.path(*parts)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run {hint} first")
        return p

    def corpus(self, name):
        self.need("corpora", f"{name}.json", hint="gen-corpus")
        return read_corpus(self.path("corpora"), name)

    def teacher(self):
        return load_checkpoint(self.need("teacher.ckpt", hint="train-teacher"),
                               self.config.specs()[0])

    def selection(self, strategy):
        return SelectionResult.load(self.need("selections", f"{strategy}.json",
                                              hint=f"sample --strategy {strategy}"))

    def student_path(self, strategy, mode):
        return self.path("students", f"{strategy}_{mode}.ckpt")


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_corpus(run):
    cfg = run.config
    run.init()
    out = run.path("corpora")
    train = gen_original(cfg.corpus, derive_seed(run.seed, "train"), cfg.n_train, "train")
    test = gen_original(cfg.corpus, derive_seed(run.seed, "test"), cfg.n_test, "test")
    world = gen_openworld(cfg.corpus, derive_seed(run.seed, "openworld"), cfg.n_openworld,
                          cfg.mix, "openworld")
    return {c.name: write_corpus(c, out) for c in (train, test, world)}


def stage_train_teacher(run):
    run.check()
    tspec, _ = run.config.specs()
    train = run.corpus("train")
    net, log = train_teacher(train, tspec, replace(run.config.teacher, seed=run.seed),
                             val=run.corpus("test"))
    save_checkpoint(net, run.path("teacher.ckpt"))
    write_metrics_csv(log, run.path("teacher_metrics.csv"))
    return net


def select(strategy, world, teacher, epsilon, seed, scoring=None):
    if epsilon > len(world):
        raise PreconditionError(f"epsilon={epsilon} exceeds corpus size {len(world)}")
    if strategy == "ads":
        return ads_select(world, teacher, epsilon, scoring=scoring)
    if strategy == "confidence":
        return confidence_select(world, teacher, epsilon, scoring=scoring)
    if strategy == "random":
        return random_select(world, epsilon, derive_seed(seed, "random"))
    raise PreconditionError(f"unknown selection strategy {strategy!r}")


def stage_sample(run, strategy, epsilon=None, scoring=None):
    run.check()
    epsilon = run.config.epsilon if epsilon is None else epsilon
    world = run.corpus("openworld")
    if epsilon > len(world):
        raise PreconditionError(f"epsilon={epsilon} exceeds corpus size {len(world)}")
    teacher = run.teacher()
    if scoring is None and strategy != "random":
        scoring = score_corpus(world, teacher)
    sel = select(strategy, world, teacher, epsilon, run.seed, scoring)
    sel.config_hash = run.config.digest()
    run.path("selections").mkdir(exist_ok=True)
    sel.save(run.path("selections", f"{strategy}.json"))
    export_stats_csv(sel, run.path("selections", f"{strategy}.csv"), world)
    return sel


def stage_distill(run, strategy, mode, teacher=None, world=None):
    run.check()
    _, sspec = run.config.specs()
    sel = run.selection(strategy)
    if sel.config_hash != run.config.digest():
        raise PreconditionError(f"selection {strategy} was made under a different config")
    teacher = run.teacher() if teacher is None else teacher
    world = run.corpus("openworld") if world is None else world
    cfg = replace(run.config.student, seed=run.seed, strategy=mode)
    net, log = distill(teacher, sspec, world, sel, cfg, weights=sel.weights)
    run.path("students").mkdir(exist_ok=True)
    run.path("metrics").mkdir(exist_ok=True)
    save_checkpoint(net, run.student_path(strategy, mode))
    write_metrics_csv(log, run.path("metrics", f"{strategy}_{mode}.csv"))
    return net


def stage_evaluate(run, strategy=None, mode=None):
    """mIoU of the teacher, or of one student plus its gap to the teacher."""
    run.check()
    test = run.corpus("test")
    t_report = evaluate(run.teacher(), test)
    out = {"teacher": t_report.to_dict()}
    if strategy is not None:
        _, sspec = run.config.specs()
        path = run.student_path(strategy, mode)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run distill --strategy {strategy} "
                                    f"--distill {mode} first")
        s_report = evaluate(load_checkpoint(path, sspec), test)
        out["student"] = s_report.to_dict()
        out["gap"] = performance_gap(t_report, s_report)
    return out


# ---------------------------------------------------------------------------
# run-all
# ---------------------------------------------------------------------------

def _r(x):
    return None if x is None else round(float(x), 6)


def run_all(config, seed, out_dir, log=print):
    """Whole pipeline for one seed. Writes artifacts plus ``report.json``
    and returns the report dict."""
    run = RunDir(out_dir, config, seed)
    clock = {}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        clock[name] = round(time.perf_counter() - t0, 3)
        log(f"[seed {seed}] {name}: {clock[name]:.1f}s")
        return res

    timed("gen-corpus", stage_gen_corpus, run)
    teacher = timed("train-teacher", stage_train_teacher, run)
    train, test, world = run.corpus("train"), run.corpus("test"), run.corpus("openworld")
    scoring = timed("score", score_corpus, world, teacher)
    export_stats_csv(scoring, run.path("scores.csv"))

    t_report = evaluate(teacher, test)
    kd_ref = None
    if config.kd_reference is not None:
        _, sspec = config.specs()
        net, kd_log = timed("kd-reference", kd_with_original_data, teacher, sspec, train,
                            replace(config.kd_reference, seed=seed))
        run.path("metrics").mkdir(exist_ok=True)
        write_metrics_csv(kd_log, run.path("metrics", "kd_reference.csv"))
        kd_ref = evaluate(net, test)

    sels = {s: timed(f"sample-{s}", stage_sample, run, s, config.epsilon, scoring)
            for s in config.selections}

    students = []
    done = {}
    for s in config.selections:
        sel = sels[s]
        for mode in config.strategies:
            # with every weight equal to 1 the three objectives are the same
            # computation, so the vanilla student is reused bit for bit
            key = (s, "vanilla" if np.all(sel.weights == 1.0) else mode)
            if key in done:
                src = run.student_path(*key)
                run.student_path(s, mode).write_bytes(src.read_bytes())
                report, reused = done[key], f"{key[0]}_{key[1]}"
            else:
                net = timed(f"distill-{s}-{mode}", stage_distill, run, s, mode, teacher, world)
                report, reused = evaluate(net, test), None
                done[key] = done[(s, mode)] = report
            students.append({"selection": s, "distill": mode, "miou": _r(report.miou),
                             "gap": _r(performance_gap(t_report, report)),
                             "per_class_iou": [_r(v) if np.isfinite(v) else None
                                               for v in report.per_class_iou],
                             "same_as": reused})

    diag = {}
    for eps in config.diagnostic_epsilons:
        if eps > len(world):
            continue
        row = {}
        for s in SELECTIONS:
            sel = select(s, world, teacher, eps, seed, scoring)
            row[s] = {k: _r(v) for k, v in stratum_fractions(sel, world).items()}
        diag[str(eps)] = row

    principles = check_selection_principles(train, world)
    report = {
        "run_id": f"seed{seed}-{config.digest()[:12]}",
        "seed": int(seed),
        "config_hash": config.digest(),
        "seeds": {"train": derive_seed(seed, "train"), "test": derive_seed(seed, "test"),
                  "openworld": derive_seed(seed, "openworld"),
                  "random_selection": derive_seed(seed, "random"),
                  "teacher_init": derive_seed(seed, "init", "teacher"),
                  "student_init": derive_seed(seed, "init", "student")},
        "teacher_miou": _r(t_report.miou),
        "teacher_per_class_iou": [_r(v) if np.isfinite(v) else None
                                  for v in t_report.per_class_iou],
        "kd_reference_miou": None if kd_ref is None else _r(kd_ref.miou),
        "epsilon": config.epsilon,
        "students": students,
        "mean_distance": {k: _r(v) for k, v in mean_distance_by_stratum(scoring).items()},
        "mean_confidence": {s: _r(scoring.confidence[scoring.strata == k].mean())
                            for k, s in enumerate(STRATA) if np.any(scoring.strata == k)},
        "selected_strata": diag,
        "selection_principles": {k: (_r(v) if isinstance(v, float) else v)
                                 for k, v in principles.items()},
        "test_split_hash": t_report.split_hash,
    }
    _write_json(run.path("report.json"), report)
    run.path("report.txt").write_text(format_report(report))
    _write_json(run.path("timing.json"), {"seed": int(seed), "seconds": clock,
                                          "total": round(sum(clock.values()), 3)})
    return report


def format_report(report):
    lines = [f"run {report['run_id']}",
             f"teacher mIoU        {report['teacher_miou']:.4f}"]
    if report.get("kd_reference_miou") is not None:
        lines.append(f"KD (original data)  {report['kd_reference_miou']:.4f}")
    lines.append(f"students at epsilon={report['epsilon']}:")
    lines.append(f"  {'selection':<11}{'distill':<9}{'mIoU':>8}{'gap':>9}")
    for s in report["students"]:
        lines.append(f"  {s['selection']:<11}{s['distill']:<9}{s['miou']:>8.4f}{s['gap']:>9.4f}")
    lines.append("mean distance d: " + ", ".join(
        f"{k} {v:.3f}" for k, v in report["mean_distance"].items() if v is not None))
    for eps, row in report["selected_strata"].items():
        lines.append(f"ood fraction at epsilon={eps}: " + ", ".join(
            f"{s} {v['ood']:.2f}" for s, v in row.items()))
    p = report["selection_principles"]
    lines.append(f"selection principles: cardinality_ok={p['cardinality_ok']} "
                 f"richness_ok={p['richness_ok']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# aggregation across seeds
# ---------------------------------------------------------------------------

def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"median": None, "min": None, "max": None, "values": values}
    return {"median": _r(statistics.median(vals)), "min": _r(min(vals)),
            "max": _r(max(vals)), "values": values}


def aggregate_reports(reports):
    """Median / min / max over per-seed reports, per (selection, distill)."""
    if not reports:
        raise PreconditionError("no reports to aggregate")
    hashes = {r["config_hash"] for r in reports}
    if len(hashes) != 1:
        raise PreconditionError("reports come from different configs")
    reports = sorted(reports, key=lambda r: r["seed"])
    seeds = [r["seed"] for r in reports]
    if len(set(seeds)) != len(seeds):
        raise PreconditionError(f"duplicate seeds among reports: {seeds}")
    rows = []
    keys = [(s["selection"], s["distill"]) for s in reports[0]["students"]]
    for sel, mode in keys:
        mious, gaps = [], []
        for r in reports:
            match = [s for s in r["students"] if (s["selection"], s["distill"]) == (sel, mode)]
            mious.append(match[0]["miou"] if match else None)
            gaps.append(match[0]["gap"] if match else None)
        rows.append({"selection": sel, "distill": mode, "miou": _summary(mious),
                     "gap": _summary(gaps)})
    return {
        "config_hash": hashes.pop(),
        "seeds": [r["seed"] for r in reports],
        "teacher_miou": _summary([r["teacher_miou"] for r in reports]),
        "kd_reference_miou": _summary([r.get("kd_reference_miou") for r in reports]),
        "students": rows,
    }


def format_aggregate(agg):
    lines = [f"seeds {agg['seeds']}",
             f"teacher mIoU median {agg['teacher_miou']['median']:.4f}",
             f"  {'selection':<11}{'distill':<9}{'median':>8}{'min':>8}{'max':>8}"]
    for row in agg["students"]:
        m = row["miou"]
        lines.append(f"  {row['selection']:<11}{row['distill']:<9}"
                     f"{m['median']:>8.4f}{m['min']:>8.4f}{m['max']:>8.4f}")
    return "\n".join(lines) + "\n"


def load_reports(paths):
    """Read ``report.json`` files; directories are searched recursively."""
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("report.json")))
        elif p.exists():
            found.append(p)
        else:
            raise FileNotFoundError(f"{p} not found")
    if not found:
        raise FileNotFoundError("no report.json found under " + ", ".join(map(str, paths)))
    out = []
    for p in found:
        with open(p) as fh:
            out.append(json.load(fh))
    return out
