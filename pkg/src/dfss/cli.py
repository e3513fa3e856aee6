"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 2 precondition violation, 3 I/O error, 4 numeric
failure (NaN or inf during training).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import NumericError
from .distiller import STRATEGIES
from .nets import CheckpointError
from .pipeline import (SELECTIONS, PreconditionError, RunDir, aggregate_reports,
                       format_aggregate, load_config, load_reports, run_all, stage_distill,
                       stage_evaluate, stage_gen_corpus, stage_sample, stage_train_teacher)

EXIT_PRECONDITION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _run(args):
    return RunDir(args.out, load_config(args.config), args.seed)


def cmd_gen_corpus(args):
    for name, m in stage_gen_corpus(_run(args)).items():
        print(f"{name}: {m.record_count} records, mean entropy {m.richness['mean']:.3f} bits")


def cmd_train_teacher(args):
    run = _run(args)
    stage_train_teacher(run)
    print(f"teacher mIoU {stage_evaluate(run)['teacher']['miou']:.4f} -> {run.path('teacher.ckpt')}")


def cmd_sample(args):
    sel = stage_sample(_run(args), args.strategy, args.epsilon)
    print(f"{sel.strategy}: kept {sel.epsilon} samples")


def cmd_distill(args):
    run = _run(args)
    stage_distill(run, args.strategy, args.distill)
    res = stage_evaluate(run, args.strategy, args.distill)
    print(f"{args.strategy}/{args.distill}: student mIoU {res['student']['miou']:.4f}, "
          f"gap {res['gap']:.4f}")


def cmd_evaluate(args):
    res = stage_evaluate(_run(args), args.strategy, args.distill if args.strategy else None)
    print(json.dumps(res, indent=1))


def cmd_report(args):
    agg = aggregate_reports(load_reports(args.runs or [args.out]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1) + "\n")
    text = format_aggregate(agg)
    (out / "aggregate.txt").write_text(text)
    print(text, end="")


def cmd_run_all(args):
    report = run_all(load_config(args.config), args.seed, args.out,
                     log=lambda m: print(m, file=sys.stderr))
    print((Path(args.out) / "report.txt").read_text(), end="")
    return report


def build_parser():
    p = argparse.ArgumentParser(prog="dfss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", default=None, help="JSON experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="runs/seed0", help="run directory")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "generate train/test/open-world corpora")
    add("train-teacher", cmd_train_teacher, "train the teacher on the original corpus")
    sp = add("sample", cmd_sample, "select a subset of the open-world corpus")
    sp.add_argument("--strategy", choices=SELECTIONS, default="ads")
    sp.add_argument("--epsilon", type=int, default=None)
    sp = add("distill", cmd_distill, "distill a student on a selection")
    sp.add_argument("--strategy", choices=SELECTIONS, default="ads")
    sp.add_argument("--distill", choices=STRATEGIES, default="wdpd")
    sp = add("evaluate", cmd_evaluate, "mIoU of the teacher and optionally one student")
    sp.add_argument("--strategy", choices=SELECTIONS, default=None)
    sp.add_argument("--distill", choices=STRATEGIES, default="wdpd")
    sp = add("report", cmd_report, "aggregate per-seed reports into median/min/max")
    sp.add_argument("runs", nargs="*", help="run directories or report.json files")
    add("run-all", cmd_run_all, "run every stage for one seed and write report.json")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (PreconditionError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    return 0


if __name__ == "__main__":
    sys.exit(main())
