"""Figure and table rendering for metric, correlation, and training reports.

Every report writes a tab-delimited table (and JSON where structured data
helps) plus a matplotlib figure alongside it."""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRIC_LABELS = {"at_coo": "AT-COO %", "qt_coo": "QT-COO %",
                 "qa_subg": "accuracy after removal %"}


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_tsv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join("" if v is None else str(v) for v in row) + "\n")


def render_metrics_report(report, out_dir) -> list[str]:
    """Bar chart per metric plus one TSV/JSON table. Returns written paths."""
    _ensure_dir(out_dir)
    methods = sorted(report.per_method)
    metrics = [m for m in ("at_coo", "qt_coo", "qa_subg")
               if any(report.per_method[meth].get(m) is not None for meth in methods)]

    rows = []
    for meth in methods:
        vals = report.per_method[meth]
        rows.append([meth] + [None if vals.get(m) is None else f"{vals[m]:.2f}"
                              for m in metrics])
    tsv = os.path.join(out_dir, "metrics.tsv")
    write_tsv(tsv, ["method"] + metrics, rows)
    js = os.path.join(out_dir, "metrics.json")
    with open(js, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)

    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    if len(metrics) == 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        vals = [report.per_method[m].get(metric) for m in methods]
        vals = [0.0 if v is None else v for v in vals]
        ax.bar(methods, vals, color="#4878a8")
        ax.set_title(METRIC_LABELS.get(metric, metric))
        ax.set_ylim(0, 100)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    png = os.path.join(out_dir, "metrics.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [tsv, js, png]


def render_correlation_report(correlations, metrics_per_method,
                              preference_per_method, out_dir) -> list[str]:
    """Scatter of metric vs preference per metric, with the correlation table."""
    _ensure_dir(out_dir)
    rows = [[name, f"{pe:.4f}", f"{sp:.4f}"]
            for name, (pe, sp) in sorted(correlations.items())]
    tsv = os.path.join(out_dir, "correlations.tsv")
    write_tsv(tsv, ["metric", "pearson", "spearman"], rows)

    methods = sorted(preference_per_method)
    names = sorted(correlations)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.4))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        xs = [metrics_per_method[m][name] for m in methods]
        ys = [preference_per_method[m] for m in methods]
        ax.scatter(xs, ys, color="#a84848")
        for m, x, y in zip(methods, xs, ys):
            ax.annotate(m, (x, y), fontsize=7, xytext=(3, 3),
                        textcoords="offset points")
        pe, sp = correlations[name]
        ax.set_title(f"{METRIC_LABELS.get(name, name)}\nr={pe:.2f} rho={sp:.2f}")
        ax.set_xlabel(name)
        ax.set_ylabel("preference strength")
    fig.tight_layout()
    png = os.path.join(out_dir, "correlations.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [tsv, png]


def render_training_report(metrics_path, out_dir) -> list[str]:
    """Loss and accuracy curves from a training metrics log."""
    _ensure_dir(out_dir)
    records = []
    with open(metrics_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [r["train_loss"] for r in records], label="train")
    ax1.plot(epochs, [r["val_loss"] for r in records], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["val_acc"] for r in records], color="#48a860")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    png = os.path.join(out_dir, "training.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [png]


def render_bt_report(result, out_dir) -> list[str]:
    """Preference-strength bar chart plus table, overall and per group."""
    _ensure_dir(out_dir)
    methods = sorted(result.overall)
    rows = [["overall", m, f"{result.overall[m]:.4f}"] for m in methods]
    for gkey, vals in sorted(result.by_group.items()):
        rows += [[gkey, m, f"{v:.4f}"] for m, v in sorted(vals.items())]
    tsv = os.path.join(out_dir, "preferences.tsv")
    write_tsv(tsv, ["group", "method", "strength"], rows)
    js = os.path.join(out_dir, "preferences.json")
    with open(js, "w") as fh:
        json.dump(result.to_json(), fh, indent=2)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(methods, [result.overall[m] for m in methods], color="#7848a8")
    ax.set_ylabel("preference strength")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    png = os.path.join(out_dir, "preferences.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [tsv, js, png]
