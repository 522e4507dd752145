"""Acceptance gates, one test per criterion with pinned tolerances.

Each test asserts its bounds and prints one PASS line with the measured
numbers (visible under ``pytest -s``). The restore-time study drives a
1000-iteration paced loop once per mode and crash point, so this module
needs a few minutes of wall clock; everything in it is seeded.
"""

import time

import pytest

import genfuncs
from insitu.bench import (
    CATEGORIES,
    all_scenarios,
    measure_overhead,
    measure_restore,
    run_drill,
    run_microbench,
    run_scenario,
    run_suite,
)

CRASH_POINTS = (100, 500, 900)


@pytest.fixture(scope="module")
def restore_samples():
    out = {}
    for ci in CRASH_POINTS:
        # best of two for the in-place leg: its restore is sub-ms, so a
        # single scheduler preemption would otherwise decide the sample
        legs = [measure_restore(ci, steps=1000, pace=0.02, mode="in-situ")
                for _ in range(2)]
        out[ci] = {
            "in-situ": min(legs, key=lambda s: s.restore_s),
            "restart": measure_restore(ci, steps=1000, pace=0.02,
                                       mode="restart"),
        }
    return out


def test_criterion_semantic_preservation():
    started = time.monotonic()
    fns = genfuncs.corpus()
    assert len(fns) >= 30
    for name, source in fns:
        for args in genfuncs.CORPUS_ARGS:
            genfuncs.check_equivalence(source, name, args)
    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    print(f"PASS semantic preservation: {len(fns)} functions x "
          f"{len(genfuncs.CORPUS_ARGS)} inputs equal in {elapsed:.1f}s")


def test_criterion_resume_concatenation():
    splits = genfuncs.split_corpus()
    positions = sum(sites for _, _, sites in splits)
    crashed = 0
    for name, source, sites in splits:
        for args in genfuncs.SPLIT_ARGS:
            crashed += genfuncs.check_splits(source, name, sites, args)
    assert positions >= 50 and crashed >= positions
    print(f"PASS resume concatenation: {positions} split positions, "
          f"{crashed} crashed sessions, all states equal")


def test_criterion_scenario_suite():
    corpus = list(all_scenarios())
    by_cat = {}
    for s in corpus:
        by_cat.setdefault(s.category, []).append(s)
    assert set(by_cat) == set(CATEGORIES) and len(CATEGORIES) == 7
    assert all(len(v) >= 2 for v in by_cat.values())
    negatives = [s for s in corpus if not s.recoverable]
    assert len(negatives) == 1

    reports = {r.scenario: r for r in run_suite(modes=("in-situ",))}
    recovered = {n for n, r in reports.items() if r.outcome == "recovered"}
    assert recovered == {s.name for s in corpus if s.recoverable}
    assert reports[negatives[0].name].outcome == "failed"
    print(f"PASS scenario suite: {len(recovered)}/{len(corpus)} recovered "
          f"in-situ; {negatives[0].name} correctly reported failed")


def test_criterion_ablation_shape():
    reports = run_suite(modes=("in-situ", "pass-only", "no-fd"))
    def recovered(mode):
        return {r.scenario for r in reports
                if r.mode == mode and r.outcome == "recovered"}
    def categories(mode):
        return {r.category for r in reports
                if r.mode == mode and r.outcome == "recovered"}

    runtime_error_cases = {s.name for s in all_scenarios()
                           if s.category == "runtime-error"}
    assert recovered("pass-only") == runtime_error_cases
    assert categories("no-fd") < categories("in-situ")
    print(f"PASS ablation shape: pass-only == {sorted(runtime_error_cases)}; "
          f"no-fd covers {len(categories('no-fd'))} of "
          f"{len(categories('in-situ'))} categories")


def test_criterion_restore_time(restore_samples):
    mid_in = restore_samples[500]["in-situ"].restore_s
    mid_re = restore_samples[500]["restart"].restore_s
    assert mid_in < 1.0
    assert mid_re >= 10.0
    assert mid_re / mid_in >= 10.0

    in_situ = [restore_samples[ci]["in-situ"].restore_s
               for ci in CRASH_POINTS]
    restart = [restore_samples[ci]["restart"].restore_s
               for ci in CRASH_POINTS]
    assert max(in_situ) / min(in_situ) < 2.0
    assert restart[0] < restart[1] < restart[2]
    for ci in CRASH_POINTS:
        assert restore_samples[ci]["in-situ"].total == \
            restore_samples[ci]["restart"].total
    print(f"PASS restore time: crash@500 in-situ {mid_in * 1000:.1f}ms, "
          f"restart {mid_re:.2f}s, {mid_re / mid_in:.0f}x; in-situ spread "
          f"{max(in_situ) / min(in_situ):.2f}x, restart "
          f"{[round(r, 1) for r in restart]} monotonic")


def test_criterion_overhead_and_construct_costs():
    overhead = measure_overhead()
    assert overhead.fraction < 0.01, overhead
    micro = run_microbench()
    ratios = micro.ratios()
    for construct, ratio in ratios.items():
        assert ratio <= 0.5, f"{construct} cost {ratio:.2f}x the baseline"
    print(f"PASS overhead: {overhead.fraction * 100:+.3f}% over "
          f"{len(overhead.per_rep)} reps; constructs "
          + " ".join(f"{k}={v:.2f}x" for k, v in ratios.items()))


def test_criterion_recovered_metrics_match_restart_exactly():
    recoverable = [s for s in all_scenarios() if s.recoverable]
    mismatches = 0
    for rep in range(10):
        for scenario in recoverable:
            healed = run_scenario(scenario, "in-situ")
            redone = run_scenario(scenario, "restart")
            assert healed.outcome == "recovered", (rep, scenario.name)
            assert redone.outcome == "recovered", (rep, scenario.name)
            if healed.final_metric != redone.final_metric:
                mismatches += 1
    assert mismatches == 0
    print(f"PASS correctness: {len(recoverable)} scenarios x 10 reps, "
          f"in-situ metric == restart metric, 0 mismatches")


def test_criterion_distributed_broadcast():
    report = run_drill()
    assert report.ok, report.to_json()
    assert report.workers == 4 and len(report.armed) == 2
    assert report.fix_host is not None
    assert len(report.healed_by_relay) == 1
    assert report.elapsed_s < 60.0
    print(f"PASS distributed: host {report.fix_host} healed "
          f"{list(report.healed_by_relay)}, outputs equal crash-free run, "
          f"{report.elapsed_s:.2f}s")
