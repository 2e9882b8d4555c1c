"""Figure rendering for the `report` subcommand.

The delimited files stay the source of truth for plotting; these PNGs are
conveniences written alongside them. Rendered images are outside the
byte-identical determinism contract (matplotlib owns their bytes).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _read_csv(path: Path):
    """Return (header, rows) skipping leading # comment lines."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and not row[0].startswith("#")]
    return rows[0], rows[1:]


def _column(header, rows, name, dtype=float) -> np.ndarray:
    idx = header.index(name)
    return np.array([dtype(row[idx]) for row in rows])


def _save(fig, out: Path, name: str, dpi: int, written: list) -> None:
    fig.savefig(out / name, dpi=dpi)
    plt.close(fig)
    written.append(name)


def render_lyapunov(src: Path, out: Path, dpi: int) -> list:
    written = []
    table = src / "lyapunov.csv"
    if not table.is_file():
        return written
    header, rows = _read_csv(table)
    lams = _column(header, rows, "lambda_max")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(lams, bins=40, color="steelblue", edgecolor="black", linewidth=0.4)
    ax.axvline(0.0, color="firebrick", linestyle="--", linewidth=1.0, label="zero")
    ax.set_xlabel("maximal Lyapunov exponent")
    ax.set_ylabel("draws")
    ax.set_title(f"{len(lams)} random blocks, max = {lams.max():.3e}")
    ax.legend()
    fig.tight_layout()
    _save(fig, out, "lyapunov.png", dpi, written)
    return written


def render_divergence(src: Path, out: Path, dpi: int) -> list:
    written = []
    report_path = src / "report.json"
    if not report_path.is_file():
        return written
    report = json.loads(report_path.read_text(encoding="utf-8"))

    traces = report.get("traces", [])
    if traces:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for tr in traces:
            path = src / tr["file"]
            if not path.is_file():
                continue
            header, rows = _read_csv(path)
            steps = _column(header, rows, "step")
            dev = _column(header, rows, "deviation")
            keep = dev > 0
            ax.semilogy(steps[keep], dev[keep],
                        label=f"{tr['policy']} eps={tr['epsilon']:g}")
        ax.set_xlabel("step")
        ax.set_ylabel("max-abs state gap")
        ax.set_title("perturbation divergence")
        ax.legend(fontsize=8)
        fig.tight_layout()
        _save(fig, out, "divergence_traces.png", dpi, written)

    means = report.get("mean_divergence", {})
    if means:
        fig, ax = plt.subplots(figsize=(6, 4))
        names = list(means)
        ax.bar(names, [means[n] for n in names], color="slategray")
        ax.set_ylabel("mean output divergence vs FP64")
        ax.set_title(f"{report.get('draws', '?')} random models")
        fig.tight_layout()
        _save(fig, out, "divergence_means.png", dpi, written)
    return written


def render_scan_bench(src: Path, out: Path, dpi: int) -> list:
    written = []
    timing_path = src / "timing.json"
    if not timing_path.is_file():
        return written
    rows = json.loads(timing_path.read_text(encoding="utf-8")).get("rows", [])
    if not rows:
        return written
    fig, ax = plt.subplots(figsize=(7, 4.5))
    t_lens = sorted({r["t_len"] for r in rows})
    seq = [next(r["seq_seconds"] for r in rows if r["t_len"] == t) for t in t_lens]
    ax.loglog(t_lens, seq, "o-", label="sequential")
    for w in sorted({r["workers"] for r in rows}):
        par = [next(r["par_seconds"] for r in rows if r["t_len"] == t and r["workers"] == w)
               for t in t_lens]
        ax.loglog(t_lens, par, "s--", label=f"parallel, {w} workers")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("seconds per scan")
    ax.set_title("scan wall time")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out, "scan_bench.png", dpi, written)
    return written


def _render_loss_curve(path: Path, out: Path, name: str, title: str, dpi: int, written: list):
    header, rows = _read_csv(path)
    steps = _column(header, rows, "step")
    loss = _column(header, rows, "loss")
    lr = _column(header, rows, "lr")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, loss, color="steelblue", linewidth=1.0, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("masked cross-entropy")
    ax.set_title(title)
    ax2 = ax.twinx()
    ax2.plot(steps, lr, color="darkorange", linewidth=0.8, alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    _save(fig, out, name, dpi, written)


def render_train(src: Path, out: Path, dpi: int) -> list:
    written = []
    single = src / "steps.csv"
    if single.is_file():
        _render_loss_curve(single, out, "training.png", "training loss", dpi, written)

    full = src / "steps_full.csv"
    lora = src / "steps_lora.csv"
    if full.is_file() and lora.is_file():
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for path, label, color in ((full, "full FP32", "steelblue"),
                                   (lora, "LoRA BF16", "darkorange")):
            header, rows = _read_csv(path)
            ax.plot(_column(header, rows, "step"), _column(header, rows, "loss"),
                    label=label, color=color, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("masked cross-entropy")
        ax.set_title("full vs low-rank training")
        ax.legend()
        fig.tight_layout()
        _save(fig, out, "training_compare.png", dpi, written)

        report_path = src / "report.json"
        if report_path.is_file():
            report = json.loads(report_path.read_text(encoding="utf-8"))
            if "full" in report and "lora" in report:
                fig, ax = plt.subplots(figsize=(5, 4))
                ax.bar(["full", "lora"],
                       [report["full"]["peak_bytes"], report["lora"]["peak_bytes"]],
                       color=["steelblue", "darkorange"])
                ax.set_ylabel("peak tracked bytes")
                ax.set_title("training memory")
                fig.tight_layout()
                _save(fig, out, "memory_compare.png", dpi, written)
    return written


_RENDERERS = {
    "lyapunov": render_lyapunov,
    "divergence": render_divergence,
    "scan-bench": render_scan_bench,
    "train": render_train,
}


def render_run(src, out, subcommand: str, dpi: int = 120) -> list:
    """Render every figure the run's files support; returns written names."""
    renderer = _RENDERERS.get(subcommand)
    if renderer is None:
        return []
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return renderer(Path(src), out, dpi)
