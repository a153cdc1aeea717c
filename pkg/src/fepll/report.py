"""Benchmark report rendering: CSV rows, a Markdown summary, and figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["write_csv", "write_markdown", "render_figures", "aggregate"]

CSV_FIELDS = [
    "image", "profile", "psnr", "ssim", "seconds", "patches",
    "score_evaluations", "selection_multiplies", "estimation_multiplies",
]


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_FIELDS})


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean PSNR/SSIM/time and total counters per profile, in first-seen order."""
    order: list[str] = []
    groups: dict[str, list[dict]] = {}
    for row in rows:
        name = row["profile"]
        if name not in groups:
            order.append(name)
            groups[name] = []
        groups[name].append(row)
    out = []
    for name in order:
        g = groups[name]
        n = len(g)
        out.append({
            "profile": name,
            "images": n,
            "psnr": sum(r["psnr"] for r in g) / n if g[0].get("psnr") is not None else None,
            "ssim": sum(r["ssim"] for r in g) / n if g[0].get("ssim") is not None else None,
            "seconds": sum(r["seconds"] for r in g) / n,
            "selection_multiplies": sum(r["selection_multiplies"] for r in g),
            "estimation_multiplies": sum(r["estimation_multiplies"] for r in g),
        })
    return out


def write_markdown(summary: list[dict], path: str | Path,
                   baseline: str | None = None) -> None:
    base_time = None
    if baseline is not None:
        for row in summary:
            if row["profile"] == baseline:
                base_time = row["seconds"]
    lines = [
        "| profile | images | PSNR (dB) | SSIM | mean time (s) | speedup |",
        "|---|---|---|---|---|---|",
    ]
    for row in summary:
        speed = f"{base_time / row['seconds']:.1f}x" if base_time else "-"
        p = f"{row['psnr']:.2f}" if row["psnr"] is not None else "-"
        s = f"{row['ssim']:.3f}" if row["ssim"] is not None else "-"
        lines.append(f"| {row['profile']} | {row['images']} | {p} | {s} | "
                     f"{row['seconds']:.3f} | {speed} |")
    Path(path).write_text("\n".join(lines) + "\n")


def render_figures(summary: list[dict], outdir: str | Path,
                   baseline: str | None = None) -> list[Path]:
    """Bar charts of per-profile speedup and quality, written as PNG files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = [row["profile"] for row in summary]
    times = [row["seconds"] for row in summary]
    base_time = times[0]
    if baseline is not None and baseline in names:
        base_time = times[names.index(baseline)]
    written = []

    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 3.2))
    ax.bar(names, [base_time / t for t in times], color="0.45")
    ax.set_ylabel("speedup")
    ax.set_title("mean speedup per profile")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    p = outdir / "speedup.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    if summary[0].get("psnr") is not None:
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 3.2))
        ax.bar(names, [row["psnr"] for row in summary], color="0.45")
        ax.set_ylabel("PSNR (dB)")
        lo = min(row["psnr"] for row in summary)
        hi = max(row["psnr"] for row in summary)
        pad = max(0.5, 0.1 * (hi - lo))
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_title("mean PSNR per profile")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        p = outdir / "quality.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written
