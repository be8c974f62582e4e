"""Collect run outputs under a directory into CSV tables and matplotlib figures."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

TREND_CHECKS = ("adaptation_benefit", "temporal_loss_benefit", "move_count_trend",
                "psnr_vs_reptile", "twe_vs_prepix")


def _rel(path: Path, root: Path) -> str:
    return str(path.relative_to(root)) if path != root else "."


def metric_rows(root) -> List[dict]:
    """One row per (summary file, model, shot) found below ``root``."""
    root = Path(root)
    rows = []
    for p in sorted(root.rglob("*summary.json")):
        data = json.loads(p.read_text())
        for label, s in data.items():
            if not isinstance(s, dict) or "per_shot" not in s:
                continue
            for k in s["shots"]:
                m = s["per_shot"][str(k)] if str(k) in s["per_shot"] else s["per_shot"][k]
                row = {"source": _rel(p.parent, root), "model": label, "shot": int(k)}
                row.update({n: m.get(n) for n in METRIC_NAMES})
                row["episodes"] = m.get("episodes")
                rows.append(row)
    return rows


def trend_rows(root) -> List[dict]:
    """One row per seed of a trend benchmark, with every check and the key means."""
    root = Path(root)
    rows = []
    for p in sorted(root.rglob("trend.json")):
        t = json.loads(p.read_text())
        row = {"source": _rel(p.parent, root), "seed": t["seed"]}
        row.update({c: bool(t["checks"][c]) for c in TREND_CHECKS})
        for label, m in sorted(t["results"].items()):
            for n in ("mse", "psnr", "twe"):
                row[f"{label}.{n}"] = m[n]
        rows.append(row)
    return rows


def curve_files(root) -> List[Path]:
    return sorted(Path(root).rglob("*_curve.csv"))


def _read_curve(path: Path) -> Dict[str, list]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for r in rows:
        for k, v in r.items():
            cols.setdefault(k, []).append(float(v) if v not in ("", None) else float("nan"))
    return cols


def to_csv(rows: List[dict]) -> str:
    if not rows:
        return ""
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in cols})
    return buf.getvalue()


def plot_metrics(rows: List[dict], path: Path) -> None:
    """Grouped bars: one panel per metric, one group per shot, one bar per model."""
    metrics = [m for m in METRIC_NAMES if any(r[m] is not None for r in rows)]
    labels = list(dict.fromkeys(f"{r['source']}:{r['model']}" if r["source"] != "." else r["model"]
                                for r in rows))
    shots = sorted({r["shot"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2), squeeze=False)
    width = 0.8 / max(len(labels), 1)
    for ax, m in zip(axes[0], metrics):
        for i, lab in enumerate(labels):
            vals = []
            for k in shots:
                hit = [r[m] for r in rows if r["shot"] == k and r[m] is not None and
                       (f"{r['source']}:{r['model']}" if r["source"] != "." else r["model"]) == lab]
                vals.append(hit[0] if hit else float("nan"))
            ax.bar([j + i * width for j in range(len(shots))], vals, width, label=lab)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(shots))])
        ax.set_xticklabels([f"K={k}" for k in shots])
        ax.set_title(m.upper())
    axes[0][-1].legend(fontsize=6, loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curve(path_csv: Path, path: Path) -> None:
    cols = _read_curve(path_csv)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k in ("support_loss", "query_loss", "d_loss"):
        if k in cols and any(v == v for v in cols[k]):
            ax.plot(cols["step"], cols[k], label=k, lw=0.8)
    ax.set_xlabel("step")
    ax.set_title(path_csv.stem)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_trend(rows: List[dict], path: Path) -> None:
    """Pass/fail grid of the directional checks, seeds by checks."""
    grid = [[1.0 if r[c] else 0.0 for c in TREND_CHECKS] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(rows) + 1.5))
    ax.imshow(grid, cmap="RdYlGn", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(TREND_CHECKS)))
    ax.set_xticklabels(TREND_CHECKS, rotation=30, ha="right", fontsize=7)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([f"seed {r['seed']}" for r in rows])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(root, out=None) -> dict:
    """Write ``report_metrics.csv``/``report_trend.csv`` and figures; return what was written."""
    root = Path(root)
    out = Path(out) if out is not None else root
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    written = {"tables": [], "figures": []}
    mrows = metric_rows(root)
    if mrows:
        (out / "report_metrics.csv").write_text(to_csv(mrows))
        written["tables"].append(out / "report_metrics.csv")
        plot_metrics(mrows, figs / "metrics.png")
        written["figures"].append(figs / "metrics.png")
    trows = trend_rows(root)
    if trows:
        (out / "report_trend.csv").write_text(to_csv(trows))
        written["tables"].append(out / "report_trend.csv")
        plot_trend(trows, figs / "trend_checks.png")
        written["figures"].append(figs / "trend_checks.png")
    for c in curve_files(root):
        name = _rel(c, root).replace("/", "_").replace(".csv", ".png")
        plot_curve(c, figs / name)
        written["figures"].append(figs / name)
    written["metric_rows"] = mrows
    written["trend_rows"] = trows
    return written
