"""Markdown summary and static plots for a finished (or partial) experiment directory.

Everything is rebuilt from files already on disk, so regenerating a report
from the same directory produces identical bytes.
"""
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..defense import SWEEP_COLUMNS, read_sweep_csv  # noqa: E402
from ..exceptions import ConfigError  # noqa: E402
from .experiment import (MANIFEST_NAME, METHODS, RESULT_COLUMNS, read_audit_csv,  # noqa: E402
                         read_results_csv)

METRICS = SWEEP_COLUMNS[2:]
ARTIFACT_NAMES = ("pfgsm", "dmr", "combined", "combined_reversed")
# no timestamps or version strings in the PNG metadata
PNG_METADATA = {"Software": None}


def _table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def _plot_results(results, path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / len(METRICS)
    methods = [r["method"] for r in results]
    for j, metric in enumerate(METRICS):
        xs = [i + (j - (len(METRICS) - 1) / 2) * width for i in range(len(results))]
        ax.bar(xs, [r[metric] for r in results], width=width, label=metric)
    ax.set_xticks(range(len(results)), methods)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(ncol=len(METRICS), fontsize="small")
    ax.set_title("Retrieval accuracy per method")
    fig.tight_layout()
    _save(fig, path)


def _plot_sweep(sweep, metric, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    conditions = list(dict.fromkeys(r["condition"] for r in sweep))
    for cond in conditions:
        rows = sorted((r for r in sweep if r["condition"] == cond), key=lambda r: r["rate"])
        ax.plot([r["rate"] for r in rows], [r[metric] for r in rows], marker="o", label=cond)
    ax.set_xlabel("dropout rate")
    ax.set_ylabel(f"{metric} (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"{metric} under inference dropout")
    ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def emit_report(output_dir):
    """Write ``report.md`` and ``plots/`` into ``output_dir``; returns the written paths."""
    out = Path(output_dir)
    results_path = out / "results_table.csv"
    if not results_path.is_file():
        raise ConfigError(f"no results table at {results_path}; run the experiment first")
    manifest_path = out / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
    results = read_results_csv(results_path)
    sweep_path = out / "defense_sweep.csv"
    sweep = read_sweep_csv(sweep_path) if sweep_path.is_file() else []
    audit_path = out / "order_audit.csv"
    audit = read_audit_csv(audit_path) if audit_path.is_file() else []

    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    cfg = manifest.get("config", {})
    lines = ["# Re-identification attack experiment", ""]
    if cfg:
        lines += [f"Master seed: {cfg.get('seed')}. Dataset: {cfg.get('dataset', {}).get('kind')}."
                  f" Config fingerprint: `{manifest.get('config_fingerprint', '')[:16]}`.", ""]

    lines += ["## Results", "", "Percentages; method order NoAttack, DeepMisRanking, PFGSM, "
              "Combined.", ""]
    order = {m: i for i, m in enumerate(METHODS)}
    results = sorted(results, key=lambda r: (r["dataset"], order.get(r["method"], len(order))))
    lines.append(_table(RESULT_COLUMNS, [[r["dataset"], r["method"]]
                                          + [f"{r[k]:.2f}" for k in METRICS] for r in results]))
    _plot_results(results, plots / "results_bars.png")
    written.append(plots / "results_bars.png")
    lines += ["", "![results](plots/results_bars.png)", ""]

    if audit:
        lines += ["## Attack order audit", "",
                  "The combined attack run in both orders; differences are reported, not judged.",
                  "", _table(("order",) + METRICS,
                             [[r["order"]] + [f"{r[k]:.2f}" for k in METRICS] for r in audit]),
                  ""]

    rows = []
    for name in ARTIFACT_NAMES:
        summary_path = out / "artifacts" / name / "artifact.json"
        if summary_path.is_file():
            s = json.loads(summary_path.read_text())
            rows.append([name, s["count"], f"{s['mean_ms_ssim']:.4f}", f"{s['max_linf']:.4f}",
                         f"{s['mean_l2']:.4f}"])
    if rows:
        lines += ["## Perturbation audit", "",
                  "MS-SSIM and norms are measured against the clean queries; per-image values "
                  "are in each artifact's `trace.csv`.", "",
                  _table(("artifact", "images", "mean MS-SSIM", "max L-inf", "mean L2"), rows), ""]

    lines += ["## Inference-dropout defense", ""]
    if sweep:
        lines += [_table(SWEEP_COLUMNS, [[f"{r['rate']:g}", r["condition"]]
                                         + [f"{r[k]:.2f}" for k in METRICS] for r in sweep]), ""]
        for metric in METRICS:
            fname = f"defense_{metric.replace('-', '')}.png"
            _plot_sweep(sweep, metric, plots / fname)
            written.append(plots / fname)
            lines.append(f"![{metric}](plots/{fname})")
        lines.append("")
    else:
        lines += ["No defense sweep was recorded for this run, so the dropout-rate curves are "
                  "omitted.", ""]

    report = out / "report.md"
    report.write_text("\n".join(lines))
    written.insert(0, report)
    return written
