"""TrainReport persistence (CSV + JSON lines) and the matplotlib figures rendered next to it."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence, TextIO

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ("L_cap", "L_svc", "L_stc", "L")
METRIC_COLUMNS = ("bleu1", "bleu4", "rougeL", "cider")

plt.rcParams.update({
    "figure.figsize": (6.4, 4.0),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 11,
    "legend.fontsize": 9,
    "savefig.dpi": 120,
})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_report(rows: Sequence[dict], out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.jsonl``; columns are the union of row keys in first-seen order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    csv_path, jsonl_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.jsonl"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    with jsonl_path.open("w") as fh:
        for row in rows:
            clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
            fh.write(json.dumps(clean, sort_keys=True) + "\n")
    return csv_path, jsonl_path


def read_report(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = int(v) if v.lstrip("-").isdigit() else float(v) if v else None
            except ValueError:
                parsed[k] = v
        out.append(parsed)
    return out


def _series(rows, key):
    pts = [(r["epoch"], r[key]) for r in rows if r.get(key) is not None
           and not (isinstance(r[key], float) and math.isnan(r[key]))]
    return [p[0] for p in pts], [p[1] for p in pts]


def render_figures(rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Loss curves, evaluation metrics and SCST reward statistics, as PNGs under ``out_dir/figures``."""
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    train = [r for r in rows if r.get("stage") == "train"]
    tune = [r for r in rows if r.get("stage") == "finetune"]

    if train:
        fig, ax = plt.subplots()
        for key in LOSS_COLUMNS:
            xs, ys = _series(train, key)
            if xs:
                ax.plot(xs, ys, label=key, lw=2 if key == "L" else 1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log" if all(v > 0 for _, ys in [_series(train, "L")] for v in ys) else "linear")
        ax.legend(frameon=False)
        fig.tight_layout()
        written.append(fig_dir / "losses.png")
        fig.savefig(written[-1])
        plt.close(fig)

    evald = [r for r in rows if r.get("cider") is not None]
    if evald:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
        for stage, marker in (("train", "o"), ("finetune", "s")):
            part = [r for r in evald if r.get("stage") == stage]
            for key in METRIC_COLUMNS[:3]:
                xs, ys = _series(part, key)
                if xs:
                    ax1.plot(xs, ys, marker=marker, ms=3, label=f"{key} ({stage})")
            xs, ys = _series(part, "cider")
            if xs:
                ax2.plot(xs, ys, marker=marker, ms=3, label=stage)
        ax1.set_xlabel("epoch")
        ax1.set_ylim(0, 1.02)
        ax1.legend(frameon=False)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("CIDEr-D")
        ax2.legend(frameon=False)
        fig.tight_layout()
        written.append(fig_dir / "metrics.png")
        fig.savefig(written[-1])
        plt.close(fig)

    if tune:
        fig, ax = plt.subplots()
        xs, ys = _series(tune, "reward_mean")
        ax.plot(xs, ys, marker="o", label="mean reward")
        xs, ys = _series(tune, "reward_pos_frac")
        ax.plot(xs, ys, marker="s", label="fraction R > 0")
        ax.axhline(0, color="0.6", lw=0.8)
        ax.set_xlabel("fine-tuning epoch")
        ax.legend(frameon=False)
        fig.tight_layout()
        written.append(fig_dir / "scst_rewards.png")
        fig.savefig(written[-1])
        plt.close(fig)
    return written


def write_retrieval_table(candidates, fh: TextIO) -> None:
    """Ranked retrieval table as CSV: rank, image_id, style, p_obj, p_roi, p_tri, P."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["rank", "image_id", "style", "p_obj", "p_roi", "p_tri", "P"])
    for rank, c in enumerate(candidates):
        s = c.scores
        writer.writerow([rank, c.item.image_id, c.item.style_id,
                         f"{s.p_obj:.6f}", f"{s.p_roi:.6f}", f"{s.p_tri:.6f}", f"{s.p:.6f}"])
