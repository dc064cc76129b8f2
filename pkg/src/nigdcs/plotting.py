"""Static SVG figures; output is byte-identical across reruns."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_var", "plot_states"]

_RC = {"svg.hashsalt": "nigdcs", "svg.fonttype": "none", "figure.figsize": (9, 4)}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_var(dates, realized_loss, forecasts, level, path):
    """Realized loss against VaR forecasts of one or more models at one level."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        d = np.asarray(dates, dtype="datetime64[D]")
        ax.plot(d, realized_loss, color="0.55", lw=0.8, label="realized loss")
        for name, values in forecasts.items():
            ax.plot(d, values, lw=1.1, label=name)
        hits = np.zeros(d.size, dtype=bool)
        if forecasts:
            first = next(iter(forecasts.values()))
            hits = np.asarray(realized_loss) > np.asarray(first)
        ax.scatter(d[hits], np.asarray(realized_loss)[hits], s=12, color="crimson", zorder=3, label="violation")
        ax.set_title(f"VaR at level {level:g}")
        ax.set_ylabel("loss")
        ax.legend(loc="upper left", fontsize=8, frameon=False)
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def plot_states(dates, states, names, path):
    """Filtered parameter paths, one panel per column of ``states``."""
    states = np.asarray(states)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(states.shape[1], 1, sharex=True, figsize=(9, 1.8 * states.shape[1]))
        axes = np.atleast_1d(axes)
        d = np.asarray(dates, dtype="datetime64[D]")
        for ax, col, name in zip(axes, states.T, names):
            ax.plot(d, col, lw=0.8)
            ax.set_ylabel(name)
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)
