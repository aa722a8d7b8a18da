"""Figures written next to the CSV/JSON outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import CLASS_COLORS  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "slidesampler",
}


def _color(k):
    r, g, b = CLASS_COLORS[k % len(CLASS_COLORS)]
    return (r / 255, g / 255, b / 255)


def _save(fig, path):
    path = str(path)
    metadata = {"Software": None} if path.endswith(".png") else {}
    if path.endswith(".pdf"):
        metadata = {"CreationDate": None, "Producer": None, "Creator": None}
    fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)


def plot_table(rows, class_labels, path):
    """Grouped bars: one group per class, one bar per table row, plus the mean."""
    with plt.rc_context(RC):
        labels = list(class_labels) + ["mean"]
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        width = 0.8 / max(len(rows), 1)
        x = np.arange(len(labels))
        cmap = plt.get_cmap("tab10")
        for i, row in enumerate(rows):
            values = [np.nan if v is None else v for v in list(row["aps"]) + [row["mean"]]]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, values, width,
                   label=f'{row["mode"]} / BB {row["backbone"]} / BS {row["batch_size"]}', color=cmap(i % 10))
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("AP (VOC2007, 11-point)")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=2, loc="lower left")
        _save(fig, path)


def plot_pr_curves(report, class_names, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for k, res in sorted(report.per_class.items()):
            if not res.present or not res.recall:
                continue
            ax.step([0.0] + res.recall, [1.0] + res.precision, where="post", color=_color(k),
                    label=f"{class_names[k]} (AP {res.ap:.3f})")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, loc="lower left")
        _save(fig, path)


def plot_training_log(records, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [r.val_metric for r in records], color="0.2", label="validation")
        ax.plot(epochs, [r.train_loss for r in records], color="0.6", ls="--", label="training")
        for r in records:
            if r.event == "lr_drop":
                ax.axvline(r.epoch, color=_color(0), lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)
