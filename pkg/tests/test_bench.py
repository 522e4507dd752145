"""Bench harness behavior: corpus shape, modes, measurements, reports."""

import json

import pytest

from insitu.bench import (
    CATEGORIES,
    MODES,
    all_scenarios,
    get_scenario,
    measure_overhead,
    measure_restore,
    run_drill,
    run_microbench,
    run_scenario,
    run_suite,
    summarize,
    write_report,
)
from insitu.cli import main as cli_main


@pytest.fixture(scope="module")
def matrix():
    """Every scenario through every mode, shared by the shape tests."""
    return run_suite(modes=MODES)


def _recovered(matrix, mode):
    return {r.scenario for r in matrix
            if r.mode == mode and r.outcome == "recovered"}


# ------------------------------------------------------------ corpus shape


def test_corpus_covers_every_category_twice():
    by_cat = {}
    for s in all_scenarios():
        by_cat.setdefault(s.category, []).append(s.name)
    assert set(by_cat) == set(CATEGORIES)
    assert len(CATEGORIES) == 7
    for category, names in by_cat.items():
        assert len(names) >= 2, f"{category} has only {names}"


def test_exactly_one_designed_negative():
    hopeless = [s.name for s in all_scenarios() if not s.recoverable]
    assert hopeless == ["consumed-audit"]


def test_scenarios_are_deterministic():
    for name in ("stale-manifest", "nan-burst", "flaky-uplink"):
        first = run_scenario(name, "in-situ")
        second = run_scenario(name, "in-situ")
        assert first.final_metric == second.final_metric
        assert first.outcome == second.outcome == "recovered"


# ------------------------------------------------------------- mode shapes


def test_every_armed_run_actually_crashed(matrix):
    assert all(r.crashed for r in matrix)


def test_insitu_recovers_all_recoverable(matrix):
    want = {s.name for s in all_scenarios() if s.recoverable}
    assert _recovered(matrix, "in-situ") == want


def test_negative_fails_on_value_not_on_crash(matrix):
    report = next(r for r in matrix
                  if r.scenario == "consumed-audit" and r.mode == "in-situ")
    assert report.outcome == "failed"
    assert "wrong value" in report.detail


def test_restart_recovers_everything(matrix):
    assert _recovered(matrix, "restart") == {s.name for s in all_scenarios()}


def test_pass_only_heals_exactly_the_transient_faults(matrix):
    assert _recovered(matrix, "pass-only") == {"flaky-uplink", "flaky-sync"}


def test_no_decompose_heals_exactly_the_preloop_faults(matrix):
    assert _recovered(matrix, "no-fd") == {"eager-buffer", "seized-output"}


def test_no_decompose_covers_strictly_fewer_categories(matrix):
    full = {r.category for r in matrix
            if r.mode == "in-situ" and r.outcome == "recovered"}
    trimmed = {r.category for r in matrix
               if r.mode == "no-fd" and r.outcome == "recovered"}
    assert trimmed < full


# ------------------------------------------------------------ measurements


def test_restore_measurement_prefers_in_place_at_scale():
    down = measure_restore(30, steps=60, pace=0.004, mode="in-situ")
    redo = measure_restore(30, steps=60, pace=0.004, mode="restart")
    assert down.total == redo.total
    assert down.restore_s < redo.restore_s
    assert down.restore_s < 0.5


def test_overhead_measurement_is_plausible():
    report = measure_overhead(args=(4, 16000), reps=1, pairs=8)
    assert len(report.per_rep) == 1
    # a loose sanity window; the acceptance bound runs the full config
    assert -0.2 < report.fraction < 0.2


def test_microbench_constructs_are_cheaper_than_output():
    report = run_microbench(number=50_000)
    assert report.baseline_s > 0
    for construct, ratio in report.ratios().items():
        assert 0.0 <= ratio < 0.5, f"{construct} cost {ratio:.2f}x baseline"


# ----------------------------------------------------------------- reports


def test_report_files(tmp_path, matrix):
    samples = [measure_restore(ci, steps=40, pace=0.003, mode=m)
               for ci in (10, 30) for m in ("in-situ", "restart")]
    paths = write_report(tmp_path / "out", reports=matrix, samples=samples)
    names = {p.name for p in paths}
    assert {"report.json", "report.csv", "summary.txt",
            "outcomes.png", "restore.png"} <= names
    for p in paths:
        assert p.exists() and p.stat().st_size > 0

    bundle = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(bundle["suite"]) == len(matrix)
    assert len(bundle["restore"]) == len(samples)

    csv_lines = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert len(csv_lines) == len(matrix) + 1


def test_summary_table_shape(matrix):
    text = summarize(matrix)
    for category in CATEGORIES:
        assert category in text
    for mode in MODES:
        assert mode in text
    assert "total" in text


# ------------------------------------------------------------------- drill


def test_drill_broadcast_heals_the_sourceless_worker():
    report = run_drill()
    assert report.ok, report.to_json()
    assert report.fix_host == "w1"
    assert report.healed_by_relay == ("w2",)
    assert report.elapsed_s < 60.0


# --------------------------------------------------------------------- cli


def test_cli_lists_the_corpus(capsys):
    assert cli_main(["bench", "list"]) == 0
    out = capsys.readouterr().out
    for s in all_scenarios():
        assert s.name in out


def test_cli_vaccinate_preview(tmp_path, capsys):
    f = tmp_path / "fn.py"
    f.write_text("def job(n):\n    s = 0\n    for i in range(n):\n"
                 "        s += i\n    return s\n")
    assert cli_main(["vaccinate", str(f), "--function", "job"]) == 0
    assert "cells" in capsys.readouterr().out
    assert cli_main(["vaccinate", str(f), "--function", "job",
                     "--emit"]) == 0
    assert "__isr_cell_" in capsys.readouterr().out


def test_cli_bench_run_writes_report(tmp_path, capsys):
    out = tmp_path / "rep"
    code = cli_main(["bench", "run", "--scenario", "flaky-uplink",
                     "--modes", "in-situ,restart", "--out", str(out)])
    assert code == 0
    assert (out / "report.csv").exists()
    assert (out / "outcomes.png").exists()
    assert "runtime-error" in capsys.readouterr().out


def test_cli_demo_accepts_a_scripted_fix(tmp_path, capsys):
    fix = tmp_path / "fix.json"
    fix.write_text(json.dumps({"version": 1, "signature": {},
                               "commands": [{"kind": "pass"}]}))
    assert cli_main(["demo-crash", "--script", str(fix)]) == 0
    assert "finished" in capsys.readouterr().out


def test_cli_rejects_unknown_mode(capsys):
    assert cli_main(["bench", "run", "--modes", "sideways"]) == 2
