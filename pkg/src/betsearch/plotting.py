"""Static line charts for search, training and sweep reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "figure.figsize": (6.4, 3.2),
    "svg.hashsalt": "bet",  # stable element ids across runs
}


def _save(fig, path):
    fig.tight_layout()
    fmt = "svg" if str(path).endswith(".svg") else None
    fig.savefig(path, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)


def plot_search(records, path):
    """Measured vs predicted fitness and predictor loss per iteration."""
    t = [r.t for r in records]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        ax1.plot(t, [r.fitness for r in records], "o-", label="measured")
        ax1.plot(t, [r.predicted for r in records], "s--", label="predicted")
        for r in records:
            ax1.annotate(r.strategy, (r.t, r.fitness), textcoords="offset points",
                         xytext=(0, 5), ha="center", fontsize=6)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("fitness ratio")
        ax1.legend(frameon=False)
        ax2.plot(t, [r.predictor_loss for r in records], "o-", color="C3")
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("predictor MSE")
        ax2.set_yscale("log")
        _save(fig, path)


def plot_training(epochs, path):
    """BPR loss per epoch with validation ensemble on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([e.epoch for e in epochs], [e.loss for e in epochs], color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BPR loss", color="C0")
        evals = [e for e in epochs if e.val_ensemble is not None]
        if evals:
            ax2 = ax.twinx()
            ax2.plot([e.epoch for e in evals], [e.val_ensemble for e in evals], "o-", color="C1")
            ax2.set_ylabel("validation ensemble", color="C1")
        _save(fig, path)


def plot_sweep(rows, axis, path, metric="val_ensemble"):
    """Metric against the swept hyperparameter; one line per seed if several."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        seeds = sorted({r["seed"] for r in rows})
        for i, s in enumerate(seeds):
            pts = sorted((r["value"], r[metric]) for r in rows if r["seed"] == s)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", color=f"C{i % 10}",
                    label=f"seed {s}" if len(seeds) > 1 else None)
        ax.set_xlabel(axis)
        ax.set_ylabel(metric.replace("_", " "))
        if len(seeds) > 1:
            ax.legend(frameon=False)
        _save(fig, path)
