"""CSV tables and matplotlib figures for bench and calibration output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file output only; no display server in CI

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_bench_report(outdir: str | Path, rows: list[dict]) -> list[Path]:
    """Emit bench.csv plus a makespan bar chart; returns written paths.

    Row keys: case, sequential_ms, parallel_ms, reduction_pct, per_call,
    batched, interaction_reduction_pct.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "bench.csv"
    fields = ["case", "sequential_ms", "parallel_ms", "reduction_pct",
              "per_call", "batched", "interaction_reduction_pct"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})

    png_path = outdir / "bench_makespan.png"
    cases = [str(r["case"]) for r in rows]
    seq = [float(r["sequential_ms"]) for r in rows]
    par = [float(r["parallel_ms"]) for r in rows]
    xs = range(len(cases))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cases) + 2), 3.6))
    ax.bar([x - width / 2 for x in xs], seq, width, label="sequential")
    ax.bar([x + width / 2 for x in xs], par, width, label="parallel")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(cases, rotation=20, ha="right")
    ax.set_ylabel("makespan (ms)")
    ax.set_title("replay makespan by dispatch policy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def write_calibration_report(outdir: str | Path, tau_errors: list[tuple[float, float]],
                             chosen_tau: float, alpha: float,
                             certainty_rate: float | None = None) -> list[Path]:
    """Emit calibration.csv plus an error-versus-tau figure; returns paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "calibration.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "error", "chosen"])
        for tau, err in tau_errors:
            writer.writerow([tau, f"{err:.6f}", int(tau == chosen_tau)])

    png_path = outdir / "calibration.png"
    taus = [t for t, _ in tau_errors]
    errs = [e for _, e in tau_errors]
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.plot(taus, errs, marker="o", label="validation error")
    ax.axhline(alpha, linestyle="--", color="gray", label=f"alpha = {alpha:g}")
    ax.axvline(chosen_tau, linestyle=":", color="tab:green",
               label=f"chosen tau = {chosen_tau:g}")
    ax.set_xlabel("tau")
    ax.set_ylabel("error rate")
    title = "threshold calibration"
    if certainty_rate is not None:
        title += f" (certain on {certainty_rate:.1%})"
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]
