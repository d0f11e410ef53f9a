"""Figures for run reports. Rendered off-screen to image files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def indicator_figure(table, path):
    """Loss and space-filling indicators, each divided by its maximum."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = table["iteration"]
        for name, label in (("J", "$J$"), ("psi_p", r"$\psi_p$"), ("kld", "KLD"),
                            ("chv", "CHV")):
            v = table.get(f"{name}_norm")
            if v is not None and np.any(np.isfinite(v)):
                ax.plot(it, v, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("normalized value")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc="best")
        return _save(fig, path)


def split_rmse_figure(table, path, best=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        s = table["split"]
        for key, marker in (("rmse_train", "o"), ("rmse_val", "s"), ("rmse_test", "^")):
            ax.plot(s, table[key], marker=marker, label=key.split("_")[1])
        if best is not None:
            ax.axvline(best, color="r", lw=0.8)
        ax.set_xlabel("split")
        ax.set_ylabel("RMSE")
        ax.set_yscale("log")
        ax.legend(loc="best")
        return _save(fig, path)


def sweep_figure(table, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, sharex=True, figsize=(6.4, 6.0))
        lam = table["lambda"]
        for ax, key, label in zip(axes, ("J", "psi_p", "iterations"),
                                  ("$J$", r"$\psi_p$", "iterations")):
            ax.semilogx(lam, table[key], marker="o")
            ax.set_ylabel(label)
        axes[-1].set_xlabel(r"$\lambda$")
        return _save(fig, path)
