"""Static figures with byte-stable PNG output."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

PNG_METADATA = {"Software": None}
GROUP_NAMES = {1: "transcode", 2: "enhance + transcode", 3: "enhance + preprocess + transcode"}


class PlotInputError(ValueError):
    pass


def _save(fig, out):
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def _metrics(data):
    return data.get("metrics", data)


def scatter(data, out):
    m = _metrics(data)
    preds, targets = m.get("predictions"), m.get("targets")
    if not preds or not targets:
        raise PlotInputError("scatter needs an eval report with predictions and targets")
    ids = sorted(set(preds) & set(targets))
    x = np.array([preds[i] for i in ids])
    y = np.array([targets[i] for i in ids])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x, y, s=10)
    ax.set_xlabel("predicted score")
    ax.set_ylabel("MOS")
    if "srocc" in m:
        ax.set_title(f"SROCC {m['srocc']:.3f}  PLCC {m['plcc']:.3f}")
    _save(fig, out)


def _manifest_rows(data):
    rows = data.get("clips")
    if not rows:
        raise PlotInputError("expected a corpus manifest with clips")
    return rows


def mos_hist(data, out):
    rows = _manifest_rows(data)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(1, 5, 17)
    for g in (1, 2, 3):
        vals = [r["mos"] for r in rows if r["group"] == g]
        if vals:
            ax.hist(vals, bins=bins, alpha=0.5, label=GROUP_NAMES[g])
    ax.set_xlabel("MOS")
    ax.set_ylabel("clips")
    ax.legend(fontsize=7)
    _save(fig, out)


def qp_trend(data, out):
    from .worksim import QP_INTERVALS, group_trend

    rows = _manifest_rows(data)
    trend = group_trend(rows)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3), sharey=True)
    labels = [f"{lo}-{hi}" for lo, hi in QP_INTERVALS]
    for ax, g in zip(axes, (1, 2, 3)):
        for i in range(len(QP_INTERVALS)):
            vals = [r["mos"] for r in rows if r["group"] == g and r["recipe"]["qp_interval_index"] == i]
            if vals:
                ax.boxplot(vals, positions=[i], widths=0.6)
        means = trend[g]
        xs = [i for i, v in enumerate(means) if v is not None]
        ax.plot(xs, [means[i] for i in xs], marker="o")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, fontsize=7)
        ax.set_title(GROUP_NAMES[g], fontsize=8)
    axes[0].set_ylabel("MOS")
    _save(fig, out)


def selection_map(data, out):
    trace = data[0] if isinstance(data, list) else data
    if not isinstance(trace, dict) or "hard_indices" not in trace:
        raise PlotInputError("expected a selection trace with hard_indices")
    s = int(trace.get("grid_side") or trace.get("layout", {}).get("grid_side", 0))
    if s < 1:
        raise PlotInputError("trace lacks the grid side")
    idx = np.asarray(trace["hard_indices"]).ravel()
    scores = trace.get("scores")
    grid = np.asarray(scores, dtype=float).reshape(-1)[: s * s].reshape(s, s) if scores is not None else np.zeros((s, s))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(grid, cmap="viridis")
    rows, cols = idx // s, idx % s
    ax.add_patch(
        Rectangle(
            (cols.min() - 0.5, rows.min() - 0.5), cols.max() - cols.min() + 1, rows.max() - rows.min() + 1,
            fill=False, edgecolor="red", linewidth=2,
        )
    )
    ax.set_xticks(range(s))
    ax.set_yticks(range(s))
    ax.set_title(f"selected {int(np.sqrt(idx.size))}x{int(np.sqrt(idx.size))} of {s}x{s}")
    _save(fig, out)


RENDERERS = {"scatter": scatter, "mos-hist": mos_hist, "qp-trend": qp_trend, "selection-map": selection_map}


def render(kind, data, out):
    if kind not in RENDERERS:
        raise PlotInputError(f"unknown plot kind {kind!r}")
    RENDERERS[kind](data, out)
