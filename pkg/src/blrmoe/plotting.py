"""Matplotlib figures written next to the TSV/JSON reports (Agg backend, PNG)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the PNG bytes stable across reruns
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_training_curve(history, languages: Sequence[str], path: str | Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [h.epoch for h in history]
    ax1.plot(epochs, [h.loss for h in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("joint loss")
    for lang in languages:
        vals = [h.ter.get(lang, math.nan) for h in history]
        if not all(math.isnan(v) for v in vals):
            ax2.plot(epochs, vals, marker=".", label=lang)
    if not all(math.isnan(h.ter_micro) for h in history):
        ax2.plot(epochs, [h.ter_micro for h in history], color="k", lw=2, label="avg")
        ax2.legend(fontsize=8)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("TER")
    return _save(fig, Path(path))


def plot_report_bars(report, path: str | Path, title: str = "") -> Path:
    """Per-language TER with router accuracy as a second panel."""
    langs = list(report.languages)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(langs, [report.ter[l] for l in langs], color="tab:blue")
    ax1.set_ylabel("TER")
    acc = [report.router_acc[l] for l in langs]
    ax2.bar(langs, [0 if math.isnan(a) else a for a in acc], color="tab:orange")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel("router accuracy")
    if title:
        fig.suptitle(title)
    return _save(fig, Path(path))


def plot_directional(report, path: str | Path) -> Path:
    m = report.medians
    systems = ["vanilla", "lr_moe", "blr_moe"]
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(12, 3.5))
    x = range(len(systems))
    ax1.bar([i - 0.2 for i in x], [m[f"in_domain.{s}"] for s in systems], 0.4, label="in-domain")
    ax1.bar([i + 0.2 for i in x], [m[f"shifted.{s}"] for s in systems], 0.4, label="shifted")
    ax1.set_xticks(list(x), systems)
    ax1.set_ylabel("median TER")
    ax1.legend(fontsize=8)
    ax2.bar(["before", "after"], [m["shifted.blr_moe"], m["finetuned.ter"]], color="tab:green")
    ax2.set_title("router fine-tuning: shifted TER", fontsize=9)
    ax2b = ax2.twinx()
    ax2b.plot(["before", "after"], [m["shifted_router_acc.blr_moe"], m["finetuned.router_acc"]],
              color="k", marker="o")
    ax2b.set_ylabel("router accuracy")
    chain = [k for k in m if k.startswith("pruning.")]
    ax3.plot([k.split(".", 1)[1] for k in chain], [m[k] for k in chain], marker="o")
    ax3.set_title("pruned experts vs TER", fontsize=9)
    ax3.tick_params(axis="x", labelrotation=20)
    return _save(fig, Path(path))


def plot_table_rows(rows, languages: Sequence[str], path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 1.3 * len(rows)), 3.5))
    width = 0.8 / len(languages)
    for j, lang in enumerate(languages):
        vals = [r.ter[lang] for r in rows]
        ax.bar([i + j * width for i in range(len(rows))],
               [0 if math.isnan(v) else v for v in vals], width, label=lang)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))],
                  [f"{r.modules}\n{r.params}" for r in rows], fontsize=8)
    ax.set_ylabel("TER")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, Path(path))
