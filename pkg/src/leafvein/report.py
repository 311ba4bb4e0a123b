"""Tables and figures rebuilt from a run directory's JSON/CSV artifacts.

Nothing here touches model weights or raw predictions: every number drawn
comes from ``metrics.json``, ``metrics_train.json`` and ``history.json``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from matplotlib.ticker import MaxNLocator

from . import plotting
from .errors import ConfigError

log = logging.getLogger(__name__)

FIGURE_NAMES = (
    "fig_confusion",
    "fig_roc",
    "fig_roc_mean",
    "fig_pr",
    "fig_pr_mean",
    "fig_scores",
    "fig_learning",
)

# column order per split: accuracy, precision, F1, recall (support-weighted)
SUMMARY_METRICS = (
    ("accuracy", "accuracy"),
    ("precision", "weighted_precision"),
    ("f1", "weighted_f1"),
    ("recall", "weighted_recall"),
)
SUMMARY_COLUMNS = ["model"] + [f"{split}_{m}" for split in ("train", "test") for m, _ in SUMMARY_METRICS]


@dataclass
class RunArtifacts:
    run_id: str
    path: Path
    config: Optional[dict]
    history: Optional[dict]
    metrics: Optional[dict]
    metrics_train: Optional[dict]

    @property
    def class_names(self) -> list:
        return list(self.metrics["class_names"]) if self.metrics else []


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def load_run(path) -> RunArtifacts:
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"run directory does not exist: {path}")
    run = RunArtifacts(
        run_id=path.name,
        path=path,
        config=_read_json(path / "model_config.json"),
        history=_read_json(path / "history.json"),
        metrics=_read_json(path / "metrics.json"),
        metrics_train=_read_json(path / "metrics_train.json"),
    )
    _cross_validate(run)
    return run


def _cross_validate(run: RunArtifacts) -> None:
    names = None
    if run.metrics is not None:
        names = run.metrics["class_names"]
        k = len(names)
        if np.asarray(run.metrics["confusion"]).shape != (k, k):
            raise ConfigError(f"{run.path}: confusion matrix does not match {k} classes")
    if run.metrics_train is not None and names is not None and run.metrics_train["class_names"] != names:
        raise ConfigError(f"{run.path}: train and test metrics disagree on class names")
    if run.config is not None and names is not None and run.config["head"]["num_classes"] != len(names):
        raise ConfigError(f"{run.path}: model config has {run.config['head']['num_classes']} outputs, metrics have {len(names)}")
    pred = run.path / "predictions.csv"
    if pred.exists() and names is not None:
        with open(pred, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        if [h[2:] for h in header[2:]] != names:
            raise ConfigError(f"{pred}: class columns do not match metrics.json")


def discover_runs(paths) -> list[RunArtifacts]:
    """Accept model run directories or parent directories holding several."""
    runs = []
    for p in map(Path, paths):
        if (p / "metrics.json").exists() or (p / "history.json").exists():
            runs.append(load_run(p))
            continue
        children = sorted(c for c in p.iterdir() if c.is_dir() and (c / "metrics.json").exists()) if p.is_dir() else []
        if not children:
            raise ConfigError(f"no run artifacts found under {p}")
        runs.extend(load_run(c) for c in children)
    names = [r.run_id for r in runs]
    for r in runs:
        if names.count(r.run_id) > 1:
            r.run_id = f"{r.path.parent.name}-{r.path.name}"
    if len({r.run_id for r in runs}) != len(runs):
        raise ConfigError("run directories cannot be told apart by name: " + ", ".join(str(r.path) for r in runs))
    return runs


# --- summary table -----------------------------------------------------------

def summary_table(runs) -> list[dict]:
    """One row per run, in the given order: train then test, four metrics each."""
    if not runs:
        raise ConfigError("summary table needs at least one run")
    rows = []
    for run in runs:
        row = {"model": run.run_id}
        for split, data, fname in (("train", run.metrics_train, "metrics_train.json"), ("test", run.metrics, "metrics.json")):
            if data is None:
                raise ConfigError(f"{run.path}: missing {fname}")
            for label, key in SUMMARY_METRICS:
                row[f"{split}_{label}"] = float(data["aggregates"][key])
        rows.append(row)
    return rows


def format_cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([format_cell(r[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def summary_text(rows) -> str:
    cells = [SUMMARY_COLUMNS] + [[format_cell(r[c]) for c in SUMMARY_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_COLUMNS))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_summary(rows, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / "summary.csv", out_dir / "summary.txt"
    csv_path.write_text(summary_csv(rows), encoding="utf-8")
    txt_path.write_text(summary_text(rows), encoding="utf-8")
    return csv_path, txt_path


# --- figures -----------------------------------------------------------------

def _short(name: str, n: int = 18) -> str:
    return name if len(name) <= n else name[: n - 1] + "."


def plot_confusion(metrics, title):
    cm = np.asarray(metrics["confusion"])
    names = [_short(n) for n in metrics["class_names"]]
    k = len(names)
    fig, ax = plotting.new_figure(1.2 + 0.42 * k, 1.0 + 0.42 * k)
    im = ax.imshow(cm, cmap="Blues", vmin=0)
    vmax = cm.max() if cm.size else 0
    for i in range(k):
        for j in range(k):
            if cm[i, j]:
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=6,
                        color="white" if cm[i, j] > vmax / 2 else "black")
    ax.set_xticks(range(k), names, rotation=90)
    ax.set_yticks(range(k), names)
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return fig


def _per_class_curves(metrics, kind):
    samples = metrics["curves"][kind]
    out = []
    for k, (name, s) in enumerate(zip(metrics["class_names"], samples)):
        if s is None:
            continue
        auc = metrics["per_class"][k][f"{kind}_auc"]
        out.append((k, name, s, auc))
    return out


def plot_class_curves(metrics, kind, title):
    curves = _per_class_curves(metrics, kind)
    if not curves:
        return None
    fig, ax = plotting.new_figure(6.0, 4.8)
    for k, name, s, auc in curves:
        color = plotting.CLASS_COLORS[k % len(plotting.CLASS_COLORS)]
        ax.plot(s["x"], s["y"], color=color, label=f"{name} (AUC = {auc:.2f})")
    if kind == "roc":
        ax.plot([0, 1], [0, 1], "k--", lw=0.6)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
    else:
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="center left", bbox_to_anchor=(1.02, 0.5))
    return fig


def plot_mean_curve(metrics, kind, title):
    s = metrics["curves"].get(f"mean_{kind}")
    auc = metrics.get(f"mean_{kind}_auc")
    if s is None or auc is None:
        return None
    fig, ax = plotting.new_figure(4.5, 4.0)
    ax.plot(s["x"], s["y"], color="C0", lw=1.5, label=f"Mean {kind.upper()} (AUC = {auc:.4f})")
    if kind == "roc":
        ax.plot([0, 1], [0, 1], "k--", lw=0.6)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right")
    else:
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.legend(loc="lower left")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    return fig


def plot_scores(metrics, title):
    per_class = metrics["per_class"]
    if not per_class:
        return None
    names = [_short(p["name"]) for p in per_class]
    series = (
        ("precision", "Precision"),
        ("recall", "Recall"),
        ("f1", "F1 score"),
        ("ovr_accuracy", "Accuracy (one-vs-rest)"),
    )
    x = np.arange(len(names))
    width = 0.2
    fig, ax = plotting.new_figure(max(6.0, 0.45 * len(names)), 3.8)
    for i, (key, label) in enumerate(series):
        ax.bar(x + (i - 1.5) * width, [p[key] for p in per_class], width, label=label)
    ax.set_xticks(x, names, rotation=60, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Score")
    ax.set_title(title)
    ax.legend(ncol=4, loc="lower center", bbox_to_anchor=(0.5, 1.06))
    return fig


def plot_learning(history, title):
    records, boundaries = [], []
    for phase in (history or {}).get("phases", []):
        if records:
            boundaries.append(len(records) + 0.5)
        records.extend(phase["records"])
    if not records:
        return None
    epochs = np.arange(1, len(records) + 1)
    fig, (ax_acc, ax_loss) = plotting.new_figure(8.0, 3.2, ncols=2)
    ax_acc.plot(epochs, [r["train_accuracy"] for r in records], "o-", ms=2.5, label="Training accuracy")
    ax_acc.plot(epochs, [r["val_accuracy"] for r in records], "s-", ms=2.5, label="Validation accuracy")
    ax_loss.plot(epochs, [r["train_loss"] for r in records], "o-", ms=2.5, label="Training loss")
    ax_loss.plot(epochs, [r["val_loss"] for r in records], "s-", ms=2.5, label="Validation loss")
    for ax, ylabel in ((ax_acc, "Accuracy"), (ax_loss, "Loss")):
        for b in boundaries:
            ax.axvline(b, color="grey", lw=0.6, ls=":")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("Epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
    fig.suptitle(title)
    return fig


def render_figures(run: RunArtifacts, out_dir, fmt: str = "png") -> list[Path]:
    """Write the seven standard figures for one run; absent data skips a figure."""
    if fmt not in ("png", "svg"):
        raise ConfigError(f"unsupported figure format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = run.metrics
    builders = {
        "fig_confusion": lambda: plot_confusion(m, f"Confusion matrix: {run.run_id}") if m else None,
        "fig_roc": lambda: plot_class_curves(m, "roc", f"ROC curves: {run.run_id}") if m else None,
        "fig_roc_mean": lambda: plot_mean_curve(m, "roc", f"Mean ROC: {run.run_id}") if m else None,
        "fig_pr": lambda: plot_class_curves(m, "pr", f"PR curves: {run.run_id}") if m else None,
        "fig_pr_mean": lambda: plot_mean_curve(m, "pr", f"Mean PR: {run.run_id}") if m else None,
        "fig_scores": lambda: plot_scores(m, f"Per-class scores: {run.run_id}") if m else None,
        "fig_learning": lambda: plot_learning(run.history, f"Learning curves: {run.run_id}"),
    }
    written = []
    with plotting.style():
        for name in FIGURE_NAMES:
            fig = builders[name]()
            if fig is None:
                log.warning("%s: no data for %s, figure skipped", run.run_id, name)
                continue
            written.append(plotting.save(fig, out_dir / f"{name}.{fmt}", fmt))
    return written


def build_report(run_paths, out_dir, fmt: str = "png") -> dict:
    """Summary table for all runs plus one figure directory per run."""
    runs = discover_runs(run_paths)
    out_dir = Path(out_dir)
    result = {"figures": {}}
    for run in runs:
        result["figures"][run.run_id] = render_figures(run, out_dir / run.run_id, fmt)
    rows = summary_table(runs)
    result["summary"] = write_summary(rows, out_dir)
    result["rows"] = rows
    return result
