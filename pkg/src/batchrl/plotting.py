"""Matplotlib figures for return and value-estimate curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_REF_STYLE = {"behavioral": ("tab:gray", "--"), "behavioral_greedy": ("black", ":"),
              "oracle": ("tab:green", "-.")}


def render_figures(by_env: dict, out_dir, window: int = 5, clip: float = 100.0) -> list[Path]:
    """Write ``returns_<env>.png`` and ``values_<env>.png`` for every environment.

    ``by_env`` maps env name to a list of
    ``(algo, aggregate, smoothed_return, value_display, value_display_std, references)``.
    """
    out_dir = Path(out_dir)
    written = []
    for env_name, runs in sorted(by_env.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        refs = {}
        for algo, agg, smooth, _, _, ref in sorted(runs, key=lambda r: r[0]):
            x = agg["iteration"]
            line, = ax.plot(x, smooth, label=algo)
            ax.fill_between(x, smooth - agg["return_std"], smooth + agg["return_std"],
                            color=line.get_color(), alpha=0.2)
            refs.update(ref)
        for name, value in refs.items():
            color, style = _REF_STYLE.get(name, ("tab:brown", "--"))
            ax.axhline(value, color=color, linestyle=style, linewidth=1, label=name)
        ax.set_xlabel("training iterations")
        ax.set_ylabel(f"return (window {window})")
        ax.set_title(env_name)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"returns_{env_name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 4))
        for algo, agg, _, value, value_std, _ in sorted(runs, key=lambda r: r[0]):
            x = agg["iteration"]
            line, = ax.plot(x, value, label=algo)
            ax.fill_between(x, value - value_std, value + value_std, color=line.get_color(),
                            alpha=0.2)
        ax.set_ylim(min(ax.get_ylim()[0], 0.0), clip)
        ax.set_xlabel("training iterations")
        ax.set_ylabel(f"value estimate (clipped at {clip:g})")
        ax.set_title(env_name)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"values_{env_name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
