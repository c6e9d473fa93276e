"""Figures written next to the delimited outputs.  Uses the Agg backend only."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import default_bins  # noqa: E402


def _save(fig, path):
    path = Path(path)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path.name


def sample_figures(out, samples, ref, S):
    """Histogram overlays per coordinate (1D) or scatter plots (2D and up)."""
    out = Path(out)
    names = []
    d = ref.shape[1]
    if d == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        edges = default_bins(np.concatenate([x[:, 0] for x in samples.values()]), ref[:, 0], 80)
        ax.hist(ref[:, 0], edges, density=True, color="0.8", label="reference")
        for tag, x in samples.items():
            ax.hist(x[:, 0], edges, density=True, histtype="step", lw=1.5, label=tag)
        ax.set_xlabel("y")
        ax.legend()
        names.append(_save(fig, out / "samples_hist.png"))
        return names
    for tag, x in samples.items():
        fig, ax = plt.subplots(figsize=(5, 5))
        n = min(len(ref), 3000)
        ax.scatter(ref[:n, 0], ref[:n, 1], s=2, c="0.7", label="reference")
        ax.scatter(x[:n, 0], x[:n, 1], s=2, label=tag)
        ax.set_xlabel("y0")
        ax.set_ylabel("y1")
        ax.legend(markerscale=4)
        names.append(_save(fig, out / f"samples_{tag}_scatter.png"))
    return names


def h_heatmap(path, t, y, H):
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.pcolormesh(t, y, H.T, shading="auto", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, label="h(t, y)")
    ax.set_xlabel("t")
    ax.set_ylabel("y")
    return _save(fig, path)


def loss_trace(path, trace, label):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(trace[:, 0], trace[:, 1])
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"{label} loss")
    return _save(fig, path)


def stress_figures(out, generated, real, record):
    """Per rule: distribution of the last-m cumulative portfolio return."""
    from .stress import RULES, evaluate_set

    out = Path(out)
    names = []
    for rule in RULES:
        fig, ax = plt.subplots(figsize=(6, 4))
        r = evaluate_set(real, rule, record)
        vals = {key: evaluate_set(ws, rule, record) for key, ws in generated.items()}
        edges = default_bins(np.concatenate([r, *vals.values()]), r, 40)
        ax.hist(r, edges, density=True, color="0.8", label=f"real (n={len(r)})")
        for (source, eta), v in vals.items():
            ax.hist(v, edges, density=True, histtype="step", lw=1.3, label=f"{source} eta={eta:g}")
        ax.set_xlabel("cumulative log-return")
        ax.set_title(rule)
        ax.legend(fontsize=7)
        names.append(_save(fig, out / f"stress_{rule}.png"))
    return names
