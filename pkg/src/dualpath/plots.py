"""Rendering of training curves, ablation bars, and embedding heat maps.

Pure presentation: every number shown here was computed elsewhere and read
back from the metrics log, the ablation results, or an embedding dump.
"""
from __future__ import annotations

import json
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

from .errors import FormatError
from .store import MAGIC_EMBEDDINGS
from .evaluation import load_embedding_dump

LOSS_KEYS = ("loss_enh", "loss_asr_c", "loss_asr_f", "loss_sl", "loss_cl", "loss_total")


def _read_jsonl(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise FormatError(f"{path}:{lineno}: not valid JSON ({err.msg})") from None
    return records


def _slug(name: str) -> str:
    return name.replace("/", "_").replace(" ", "_")


def plot_metrics(metrics_path, out_dir) -> list:
    """One curve image per loss component, plus LR and validation TER."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _read_jsonl(metrics_path)
    if not records:
        warnings.warn(f"metrics log {metrics_path} is empty; nothing to plot")
        return []
    steps = [rec["step"] for rec in records]
    written = []
    for key in LOSS_KEYS:
        values = [rec.get(key) for rec in records]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(steps, values, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.set_title(key)
        ax.grid(alpha=0.3)
        path = out_dir / f"{key}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [rec.get("lr") for rec in records], linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.set_title("learning rate schedule")
    ax.grid(alpha=0.3)
    path = out_dir / "lr.png"
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    ter_points = [
        (rec["step"], rec["valid_ter"])
        for rec in records
        if rec.get("valid_ter") is not None
    ]
    if ter_points:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(*zip(*ter_points), marker="o", linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("validation TER")
        ax.set_title("validation TER per epoch")
        ax.grid(alpha=0.3)
        path = out_dir / "valid_ter.png"
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def plot_ablation(results_path, out_dir) -> list:
    """Bar chart of mean test TER per variant with per-seed scatter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _read_jsonl(results_path)
    if not rows:
        warnings.warn(f"results file {results_path} is empty; nothing to plot")
        return []
    variants = []
    for row in rows:
        if "variant" not in row:
            raise FormatError(f"{results_path}: record without 'variant' field")
        if row["variant"] not in variants:
            variants.append(row["variant"])
    means, stds = [], []
    for name in variants:
        ters = [
            r["test_ter"] for r in rows if r["variant"] == name and r["test_ter"] is not None
        ]
        means.append(float(np.mean(ters)) if ters else np.nan)
        stds.append(float(np.std(ters, ddof=1)) if len(ters) > 1 else 0.0)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(variants), 4))
    xs = np.arange(len(variants))
    ax.bar(xs, means, yerr=stds, capsize=4, color="#6699cc")
    for i, name in enumerate(variants):
        ters = [
            r["test_ter"] for r in rows if r["variant"] == name and r["test_ter"] is not None
        ]
        ax.scatter([i] * len(ters), ters, color="#223355", zorder=3, s=14)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=15, ha="right")
    ax.set_ylabel("test TER")
    ax.set_title("ablation: mean test TER per variant")
    ax.grid(axis="y", alpha=0.3)
    path = out_dir / "ablation_ter.png"
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [path]


def plot_embeddings(dump_path, out_dir) -> list:
    """One heat map per array in an embedding dump."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = load_embedding_dump(dump_path)
    written = []
    for name, arr in dump.arrays.items():
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(np.asarray(arr).T, aspect="auto", origin="lower", cmap="magma")
        ax.set_xlabel("frame")
        ax.set_ylabel("channel")
        ax.set_title(f"{name} ({dump.uid})")
        fig.colorbar(im, ax=ax, fraction=0.046)
        path = out_dir / f"{_slug(name)}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_plots(in_path, out_dir) -> list:
    """Dispatch on the input file: embedding dump, ablation results, or log."""
    in_path = Path(in_path)
    with open(in_path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC_EMBEDDINGS:
        return plot_embeddings(in_path, out_dir)
    records = _read_jsonl(in_path)
    if records and "variant" in records[0]:
        return plot_ablation(in_path, out_dir)
    return plot_metrics(in_path, out_dir)
