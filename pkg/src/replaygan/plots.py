"""PNG figures for the evaluate and utility commands."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from .schema import Cohort  # noqa: E402


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


def distribution_plots(real: Cohort, syn: Cohort, out: Path) -> None:
    """KDE overlays for numeric variables (log1p scale) and level-frequency bars for the rest."""
    rr, rs = real.rows(), syn.rows()
    for j, v in enumerate(real.schema.variables):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if v.is_numeric:
            a, b = np.log1p(rr[:, j]), np.log1p(rs[:, j])
            grid = np.linspace(min(a.min(), b.min()), max(a.max(), b.max()), 200)
            for x, label in ((a, "real"), (b, "synthetic")):
                if np.ptp(x) > 0:
                    ax.plot(grid, gaussian_kde(x)(grid), label=label)
                else:
                    ax.axvline(x[0], label=label)
            ax.set_xlabel(f"log1p({v.name})")
            ax.set_ylabel("density")
        else:
            k = len(v.levels)
            fa = np.bincount(rr[:, j].astype(int), minlength=k) / len(rr)
            fb = np.bincount(rs[:, j].astype(int), minlength=k) / max(len(rs), 1)
            x = np.arange(k)
            ax.bar(x - 0.2, fa, 0.4, label="real")
            ax.bar(x + 0.2, fb, 0.4, label="synthetic")
            ax.set_xticks(x, v.levels, rotation=30, ha="right", fontsize=7)
            ax.set_ylabel("fraction of rows")
        ax.set_title(v.name)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"dist_{_safe(v.name)}.png", dpi=90)
        plt.close(fig)


def correlation_plots(cr_real, cr_syn, out: Path) -> None:
    names = cr_real.variables
    for kind in ("static", "trend", "cycle"):
        fig, axes = plt.subplots(1, 2, figsize=(11, 5))
        for ax, cr, title in ((axes[0], cr_real, "real"), (axes[1], cr_syn, "synthetic")):
            im = ax.imshow(getattr(cr, kind), vmin=-1, vmax=1, cmap="RdBu_r")
            ax.set_xticks(range(len(names)), names, rotation=90, fontsize=6)
            ax.set_yticks(range(len(names)), names, fontsize=6)
            ax.set_title(f"{kind} tau, {title}")
        fig.colorbar(im, ax=axes, shrink=0.7)
        fig.savefig(out / f"corr_{kind}.png", dpi=90)
        plt.close(fig)


def action_heatmaps(map_real, map_syn, rows, cols, action_vars, out: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, m, title in ((axes[0], map_real, "real"), (axes[1], map_syn, "synthetic")):
        ax.imshow(m, vmin=0, vmax=max(map_real.max(), map_syn.max(), 1e-9), cmap="viridis")
        for (i, j), val in np.ndenumerate(m):
            ax.text(j, i, f"{val:.2f}", ha="center", va="center", fontsize=6, color="w")
        ax.set_xticks(range(len(cols)), cols, rotation=30, fontsize=7)
        ax.set_yticks(range(len(rows)), rows, fontsize=7)
        ax.set_xlabel(action_vars[1])
        ax.set_ylabel(action_vars[0])
        ax.set_title(f"greedy actions, {title}")
    fig.tight_layout()
    fig.savefig(out / "action_heatmap.png", dpi=90)
    plt.close(fig)
