import json

import numpy as np
import pytest

from dfss import cli
from dfss.pipeline import ExperimentConfig, PreconditionError, aggregate_reports, load_config

TINY = {
    "corpus": {"height": 16, "width": 16, "radius": [3.0, 5.0]},
    "n_train": 16, "n_test": 8, "n_openworld": 60,
    "teacher": {"epochs": 2, "batch_size": 8},
    "student": {"epochs": 2, "batch_size": 4},
    "kd_reference": {"epochs": 2, "batch_size": 8},
    "epsilon": 12, "diagnostic_epsilons": [12, 24],
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_config_round_trip(tiny):
    cfg = load_config(tiny)
    assert cfg.n_openworld == 60 and cfg.corpus.height == 16
    assert cfg.student.epochs == 2 and cfg.student.lr == 0.05
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_config_unknown_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"n_trian": 3}))
    assert run("gen-corpus", "--config", p, "--out", tmp_path / "r") == 2


def test_stages_one_by_one(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--config", tiny, "--seed", 3, "--out", out]
    assert run("gen-corpus", *common) == 0
    assert run("train-teacher", *common) == 0
    assert run("sample", "--strategy", "ads", "--epsilon", 12, *common) == 0
    assert run("distill", "--strategy", "ads", "--distill", "wdpd", *common) == 0
    capsys.readouterr()
    assert run("evaluate", "--strategy", "ads", "--distill", "wdpd", *common) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["gap"] == pytest.approx(res["teacher"]["miou"] - res["student"]["miou"])
    assert sum(map(sum, res["teacher"]["confusion"])) == 8 * 16 * 16


def test_stage_is_idempotent(tiny, tmp_path):
    out = tmp_path / "run"
    common = ["--config", tiny, "--seed", 3, "--out", out]
    run("gen-corpus", *common)
    run("train-teacher", *common)
    first = (out / "teacher.ckpt").read_bytes()
    assert run("train-teacher", *common) == 0
    assert (out / "teacher.ckpt").read_bytes() == first


def test_epsilon_larger_than_corpus(tiny, tmp_path):
    out = tmp_path / "run"
    common = ["--config", tiny, "--seed", 3, "--out", out]
    run("gen-corpus", *common)
    run("train-teacher", *common)
    assert run("sample", "--strategy", "ads", "--epsilon", 200, *common) == 2


def test_missing_artifact_is_io_error(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    run("gen-corpus", "--config", tiny, "--seed", 3, "--out", out)
    capsys.readouterr()
    assert run("sample", "--config", tiny, "--seed", 3, "--out", out) == 3
    assert "train-teacher" in capsys.readouterr().err


def test_config_hash_mismatch_refused(tiny, tmp_path):
    out = tmp_path / "run"
    run("gen-corpus", "--config", tiny, "--seed", 3, "--out", out)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "n_test": 9}))
    assert run("train-teacher", "--config", other, "--seed", 3, "--out", out) == 2
    assert run("train-teacher", "--config", tiny, "--seed", 4, "--out", out) == 2


def test_nan_exit_code(tmp_path):
    cfg = {**TINY, "teacher": {"epochs": 2, "batch_size": 8, "lr": 1e30}}
    p = tmp_path / "nan.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    run("gen-corpus", "--config", p, "--out", out)
    with np.errstate(all="ignore"):
        assert run("train-teacher", "--config", p, "--out", out) == 4


def test_run_all_twice_is_byte_identical(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run-all", "--config", tiny, "--seed", 7, "--out", a) == 0
    assert run("run-all", "--config", tiny, "--seed", 7, "--out", b) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert any(str(f).endswith(".ckpt") for f in files)
    for f in files:
        if f.name != "timing.json":
            assert (a / f).read_bytes() == (b / f).read_bytes(), f
    report = json.loads((a / "report.json").read_text())
    assert [(s["selection"], s["distill"]) for s in report["students"]] == [
        (s, d) for s in ("ads", "random", "confidence") for d in ("vanilla", "wdd", "wdpd")]


def _fake_report(seed, values):
    return {"seed": seed, "config_hash": "h", "teacher_miou": 0.9, "kd_reference_miou": None,
            "students": [{"selection": "ads", "distill": "vanilla", "miou": v, "gap": 0.9 - v}
                         for v in values]}


def test_aggregate_median_min_max():
    agg = aggregate_reports([_fake_report(s, [v]) for s, v in ((1, 0.5), (2, 0.7), (3, 0.6))])
    row = agg["students"][0]["miou"]
    assert (row["median"], row["min"], row["max"]) == (0.6, 0.5, 0.7)
    assert row["values"] == [0.5, 0.7, 0.6]


def test_aggregate_rejects_mixed_configs():
    a, b = _fake_report(1, [0.5]), _fake_report(2, [0.5])
    b["config_hash"] = "other"
    with pytest.raises(PreconditionError):
        aggregate_reports([a, b])
    with pytest.raises(PreconditionError):
        aggregate_reports([_fake_report(1, [0.5]), _fake_report(1, [0.6])])


def test_report_command(tmp_path):
    for s, v in ((1, 0.5), (2, 0.7), (3, 0.6)):
        d = tmp_path / f"seed{s}"
        d.mkdir()
        (d / "report.json").write_text(json.dumps(_fake_report(s, [v])))
    assert run("report", "--out", tmp_path) == 0
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    assert agg["seeds"] == [1, 2, 3]
    assert agg["students"][0]["miou"]["median"] == 0.6


def test_report_without_inputs(tmp_path):
    assert run("report", "--out", tmp_path / "nothing") == 3
