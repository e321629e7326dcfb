"""Report emission: JSON document, per-request CSV and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_FIELDS = ("request", "su", "du", "base_su", "base_du", "rd", "u1", "u2", "auroc_rd", "auroc_u1", "auroc_u2")


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report))


def per_request_rows(report: dict) -> list[dict]:
    rows = []
    for r in report.get("per_request", []):
        row = {k: r[k] for k in ("request", "su", "du", "base_su", "base_du", "rd", "u1", "u2")}
        for key in ("rd", "u1", "u2"):
            row[f"auroc_{key}"] = r["auroc"][key]
        rows.append(row)
    return rows


def write_per_request_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in per_request_rows(report):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_auroc_csv(table: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("request", "rd", "u1", "u2"), lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def plot_accuracy(report: dict, path) -> None:
    """Accuracy on every set after each stage (stage 0 is the base model)."""
    stages = [report["base"]] + report["stages"]
    x = list(range(len(stages)))
    fig, ax = plt.subplots(figsize=(6, 4))
    n_req = len(report["base"]["su"])
    for t in range(n_req):
        ax.plot(x, [s["su"][t] for s in stages], marker="o", label=f"S.U. request {t + 1}")
        ax.plot(x, [s["du"][t] for s in stages], marker="x", linestyle="--", label=f"D.U. request {t + 1}")
    for key, label in (("rd", "R.D."), ("u1", "U.1"), ("u2", "U.2")):
        ax.plot(x, [s[key] for s in stages], marker="s", linewidth=2, label=label)
    ax.set_xlabel("requests processed")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks(x)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_auroc(report: dict, path) -> None:
    """Per-request detector AUROC against each OOD set."""
    rows = report.get("per_request", [])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.25
    for k, key in enumerate(("rd", "u1", "u2")):
        ax.bar([r["request"] + (k - 1) * width for r in rows], [r["auroc"][key] for r in rows], width, label=key)
    ax.set_xlabel("request")
    ax.set_ylabel("AUROC")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks([r["request"] for r in rows])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_orth(report: dict, path) -> None:
    """||(A^{t-1})^T A^t||^2 after each request."""
    stages = report["stages"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([s["request"] for s in stages], [s["orth_to_previous"] for s in stages])
    ax.set_xlabel("request")
    ax.set_ylabel("orthogonality to previous A")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report: dict, out_dir) -> dict[str, Path]:
    """Write report.json, per_request.csv and the figures into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "per_request.csv"}
    write_report_json(report, paths["json"])
    write_per_request_csv(report, paths["csv"])
    if report.get("stages"):
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        for name, fn in (("accuracy", plot_accuracy), ("auroc", plot_auroc), ("orthogonality", plot_orth)):
            paths[name] = fig_dir / f"{name}.png"
            fn(report, paths[name])
    return paths
