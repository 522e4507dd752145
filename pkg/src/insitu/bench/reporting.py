"""Turns bench results into files: delimited tables, JSON, figures.

Everything lands in one output directory. The figures are rendered
headless (Agg) so the suite runs the same on a box with no display.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from collections import defaultdict
from pathlib import Path

from .runner import MODES, OverheadReport, RestoreSample, RunReport

CSV_COLUMNS = ("scenario", "category", "mode", "outcome", "crashed",
               "restore_time_s", "final_metric", "expected",
               "overhead_fraction", "detail")


def _plt():
    # Agg must be picked before pyplot exists; imported lazily so that
    # merely importing the bench package stays cheap
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_run_csv(reports: list[RunReport], path: Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for report in reports:
            row = report.to_json()
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
    return path


def _by_category(reports: list[RunReport]) -> dict[str, list[RunReport]]:
    groups: dict[str, list[RunReport]] = defaultdict(list)
    for report in reports:
        groups[report.category].append(report)
    return groups


def _speedups(reports: list[RunReport]) -> dict[str, float]:
    """Restart-to-in-situ restore ratio per scenario, where both ran."""
    timed: dict[str, dict[str, float]] = defaultdict(dict)
    for r in reports:
        if r.outcome == "recovered" and r.restore_time_s:
            timed[r.scenario][r.mode] = r.restore_time_s
    out = {}
    for scenario, times in timed.items():
        if times.get("in-situ") and times.get("restart"):
            out[scenario] = times["restart"] / times["in-situ"]
    return out


def summarize(reports: list[RunReport],
              samples: list[RestoreSample] | None = None) -> str:
    """Plain-text table: per category, recoveries per mode plus the
    median restart/in-situ speedup of its scenarios.

    The per-category speedups come from the suite's own scenarios,
    which finish in microseconds per iteration; rerunning those from
    scratch can genuinely beat in-place recovery. The paced-loop line
    added when ``samples`` are given is the figure that matters for
    long iterations.
    """
    groups = _by_category(reports)
    speedups = _speedups(reports)
    modes = [m for m in MODES if any(r.mode == m for r in reports)]

    header = ["category", "scenarios"] + modes + ["speedup"]
    rows = []
    for category in sorted(groups):
        here = groups[category]
        names = sorted({r.scenario for r in here})
        cells = [category, str(len(names))]
        for mode in modes:
            run = [r for r in here if r.mode == mode]
            good = sum(r.outcome == "recovered" for r in run)
            cells.append(f"{good}/{len(run)}" if run else "-")
        ratios = [speedups[n] for n in names if n in speedups]
        cells.append(f"{statistics.median(ratios):.1f}x" if ratios else "-")
        rows.append(cells)

    total = ["total", str(len({r.scenario for r in reports}))]
    for mode in modes:
        run = [r for r in reports if r.mode == mode]
        total.append(f"{sum(r.outcome == 'recovered' for r in run)}/{len(run)}")
    all_ratios = list(speedups.values())
    total.append(f"{statistics.median(all_ratios):.1f}x" if all_ratios else "-")
    rows.append(total)

    widths = [max(len(row[i]) for row in [header] + rows)
              for i in range(len(header))]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    divider = "  ".join("-" * w for w in widths)
    text = "\n".join([line(header), divider] + [line(r) for r in rows]) + "\n"

    paced = _paced_line(samples or [])
    if paced:
        text += "\n" + paced + "\n"
    return text


def _paced_line(samples: list[RestoreSample]) -> str:
    by_mode: dict[str, list[RestoreSample]] = defaultdict(list)
    for s in samples:
        by_mode[s.mode].append(s)
    if not (by_mode.get("in-situ") and by_mode.get("restart")):
        return ""
    med_in = statistics.median(s.restore_s for s in by_mode["in-situ"])
    med_re = statistics.median(s.restore_s for s in by_mode["restart"])
    probe = by_mode["in-situ"][0]
    ratio = med_re / med_in if med_in > 0 else float("inf")
    return (f"paced loop ({probe.steps} steps @ {probe.pace * 1000:.0f}ms):"
            f" in-situ median {med_in * 1000:.1f}ms,"
            f" restart median {med_re:.2f}s, {ratio:.0f}x")


def render_outcomes(reports: list[RunReport], path: Path) -> Path:
    plt = _plt()
    groups = _by_category(reports)
    categories = sorted(groups)
    modes = [m for m in MODES if any(r.mode == m for r in reports)]

    fig, ax = plt.subplots(figsize=(9, 4.2))
    width = 0.8 / max(len(modes), 1)
    for k, mode in enumerate(modes):
        xs, ys = [], []
        for i, category in enumerate(categories):
            run = [r for r in groups[category] if r.mode == mode]
            xs.append(i + (k - (len(modes) - 1) / 2) * width)
            ys.append(sum(r.outcome == "recovered" for r in run))
        ax.bar(xs, ys, width=width * 0.92, label=mode)
    ax.set_xticks(range(len(categories)))
    ax.set_xticklabels(categories, rotation=20, ha="right")
    ax.set_ylabel("scenarios recovered")
    ax.set_title("recoveries by fault category and mode")
    ax.yaxis.get_major_locator().set_params(integer=True)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_restore(samples: list[RestoreSample], path: Path) -> Path:
    plt = _plt()
    series: dict[str, list[RestoreSample]] = defaultdict(list)
    for sample in samples:
        series[sample.mode].append(sample)

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for mode, points in sorted(series.items()):
        points = sorted(points, key=lambda s: s.crash_iter)
        ax.plot([p.crash_iter for p in points],
                [p.restore_s for p in points],
                marker="o", label=mode)
    ax.set_yscale("log")
    ax.set_xlabel("crash iteration")
    ax.set_ylabel("restore time (s, log scale)")
    ax.set_title("restore time vs crash position")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(out_dir: Path, reports: list[RunReport] | None = None,
                 samples: list[RestoreSample] | None = None,
                 overhead: OverheadReport | None = None,
                 micro=None, drill=None) -> list[Path]:
    """Writes whatever was measured; returns the paths it created."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    bundle: dict = {}
    if reports:
        bundle["suite"] = [r.to_json() for r in reports]
        written.append(write_run_csv(reports, out_dir / "report.csv"))
        summary = summarize(reports, samples)
        (out_dir / "summary.txt").write_text(summary)
        written.append(out_dir / "summary.txt")
        written.append(render_outcomes(reports, out_dir / "outcomes.png"))
    if samples:
        bundle["restore"] = [dataclasses.asdict(s) for s in samples]
        written.append(render_restore(samples, out_dir / "restore.png"))
    if overhead is not None:
        bundle["overhead"] = overhead.to_json()
    if micro is not None:
        bundle["microbench"] = micro.to_json()
    if drill is not None:
        bundle["drill"] = drill.to_json()

    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(bundle, indent=2) + "\n")
    written.insert(0, report_path)
    return written
