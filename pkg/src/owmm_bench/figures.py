"""PNG figures for reports and scenes (matplotlib, Agg backend)."""

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

# No software/date chunks, so the same figure gives the same bytes.
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_grounding(grounding: dict, path) -> Path:
    """Mean +- population std of grounding score per target class."""
    classes = [c for c in ("object", "receptacle", "navigation") if c in grounding]
    means = [grounding[c]["mean"] or 0.0 for c in classes]
    stds = [grounding[c]["std"] or 0.0 for c in classes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(classes, means, yerr=stds, color="#4c72b0", capsize=3, width=0.6)
        for i, c in enumerate(classes):
            ax.text(i, 0.02, f"n={grounding[c]['n']}", ha="center", va="bottom", color="white", fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("grounding score")
        ax.set_title("Affordance grounding")
        fig.tight_layout()
        return _save(fig, path)


def plot_rates(rates: dict, path, title: str = "Episodic success") -> Path:
    names = list(rates)
    vals = [0.0 if rates[k] is None else rates[k] for k in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.barh(names[::-1], vals[::-1], color="#55a868")
        ax.set_xlim(0, 1)
        ax.set_xlabel("rate")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_noise_ladder(sigmas: Sequence[float], means: Sequence[float], path,
                      stds: Optional[Sequence[float]] = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(sigmas, means, yerr=stds, marker="o", lw=1, capsize=3)
        ax.set_xlabel("box noise sigma (px)")
        ax.set_ylabel("mean grounding score")
        ax.set_ylim(0, 1.02)
        fig.tight_layout()
        return _save(fig, path)


def plot_scene(scene, path, task=None, waypoints: Optional[Sequence] = None) -> Path:
    """Top-down map: occupancy, receptacle footprints, objects and an optional path."""
    nx, ny = scene.shape
    cs = scene.cell_size
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.imshow(scene.occupancy.T, origin="lower", cmap="Greys", alpha=0.35,
                  extent=(0, nx * cs, 0, ny * cs), interpolation="nearest")
        for r in scene.receptacles:
            lo = r.box_min
            edge = "#c44e52" if task is not None and r.rec_id == task.goal_rec else "#8c613c"
            ax.add_patch(Rectangle((lo[0], lo[1]), r.footprint[0], r.footprint[1], fill=False, ec=edge, lw=1.2))
            ax.text(r.center[0], r.center[1], r.rec_id, ha="center", va="center", fontsize=7)
        for o in scene.objects:
            ms = 6 if task is not None and o.obj_id == task.object else 3
            ax.plot(o.position[0], o.position[1], "o", color="#dd8452", ms=ms)
        if waypoints:
            xs, ys = zip(*[(w[0], w[1]) for w in waypoints])
            ax.plot(xs, ys, "-", color="#4c72b0", lw=1)
        ax.set_aspect("equal")
        ax.set_xlim(0, nx * cs)
        ax.set_ylim(0, ny * cs)
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        fig.tight_layout()
        return _save(fig, path)


def render_report_figures(report: dict, out_dir) -> list:
    out = Path(out_dir)
    paths = []
    ss = report.get("single_step")
    if ss is not None:
        paths.append(plot_grounding(ss["grounding"], out / "grounding.png"))
    ep = report.get("episodic")
    if ep is not None:
        mode = ep["mode"] or "n/a"
        paths.append(plot_rates(ep["rates"], out / "episodic.png", f"Episodic success ({mode})"))
    return paths
