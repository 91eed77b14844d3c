"""Render exported plot-spec JSON files to PNG with matplotlib.

Optional: only ``polarsim report --figures`` imports this module. Each spec
names its CSV, a mark type and field encodings; the renderer maps those onto
a small set of matplotlib idioms. Output is deterministic for fixed input.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dynamics import N_CATEGORIES, PoliticsCategory  # noqa: E402
from .metrics import read_csv  # noqa: E402

LABELS = [c.label for c in PoliticsCategory]
CATEGORY_COLORS = ["#1f3b99", "#4f74d6", "#9db5ee", "#9e9e9e", "#f0a3a3", "#d95757", "#991f1f"]

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _column(rows, name, cast=float):
    return np.array([cast(r[name]) if r[name] != "" else np.nan for r in rows])


def _line(spec, base, ax):
    rows = read_csv(base / spec["data"])
    x = _column(rows, spec["encoding"]["x"])
    ys = spec["encoding"]["y"]
    ys = ys if isinstance(ys, list) else [ys]
    detail = spec["encoding"].get("detail")
    if detail:
        ids = _column(rows, detail, int)
        y = _column(rows, ys[0])
        for uid in np.unique(ids):
            sel = ids == uid
            ax.plot(x[sel], y[sel], lw=0.4, alpha=0.3, color="k")
    else:
        for name in ys:
            ax.plot(x, _column(rows, name), label=name)
        if len(ys) > 1:
            ax.legend(frameon=False)
    ax.set_xlabel(spec["encoding"]["x"])
    ax.set_ylabel(ys[0] if len(ys) == 1 else "value")


def _bar(spec, base, fig):
    enc = spec["encoding"]
    if "layers" in spec:
        ax = fig.add_subplot(111)
        for path, label in zip(spec["layers"], spec["layer_labels"]):
            rows = read_csv(base / path)
            lo, hi = _column(rows, enc["x"]), _column(rows, enc["x2"])
            ax.bar(lo, _column(rows, enc["y"]), width=hi - lo, align="edge", alpha=0.5, label=label)
        ax.set_xlabel("belief")
        ax.set_ylabel("users")
        ax.legend(frameon=False)
        return
    rows = read_csv(base / spec["data"])
    if "facet" in enc:
        facet = _column(rows, enc["facet"], int)
        x = _column(rows, enc["x"], int)
        y = _column(rows, enc["y"])
        axes = fig.subplots(1, N_CATEGORIES, sharey=True)
        for k, ax in enumerate(axes):
            sel = facet == k
            ax.bar(x[sel], y[sel], color=CATEGORY_COLORS)
            ax.axhline(0, color="k", lw=0.5)
            ax.set_title(LABELS[k], fontsize=8)
            ax.set_xticks(range(N_CATEGORIES))
            ax.set_xticklabels([str(j + 1) for j in range(N_CATEGORIES)], fontsize=6)
        axes[0].set_ylabel(enc["y"])
        return
    ax = fig.add_subplot(111)
    names = [r[enc["x"]] for r in rows]
    ys = enc["y"] if isinstance(enc["y"], list) else [enc["y"]]
    width = 0.8 / len(ys)
    pos = np.arange(len(names))
    for i, name in enumerate(ys):
        ax.bar(pos + i * width, _column(rows, name), width=width, label=name)
    ax.set_xticks(pos + 0.4 - width / 2)
    ax.set_xticklabels(names)
    ax.legend(frameon=False)


def _area(spec, base, fig):
    enc = spec["encoding"]
    rows = read_csv(base / spec["data"])
    facet = _column(rows, enc["facet"], int)
    step = _column(rows, enc["x"], int)
    freqs = np.stack([_column(rows, f) for f in enc["y"]], axis=1)
    axes = fig.subplots(N_CATEGORIES, 1, sharex=True)
    for k, ax in enumerate(axes):
        sel = facet == k
        f = freqs[sel]
        undefined = np.isnan(f).any(axis=1)
        ax.stackplot(step[sel], np.nan_to_num(f).T, colors=CATEGORY_COLORS, linewidth=0)
        if undefined.any():
            # no survivors: grey
            ax.fill_between(step[sel], 0, 1, where=undefined, color="0.7", step="mid", linewidth=0)
        ax.set_ylim(0, 1)
        ax.set_ylabel(LABELS[k], rotation=0, ha="right", fontsize=7)
        ax.set_yticks([])
    axes[-1].set_xlabel("step")


def _heatmap(spec, base, ax):
    enc = spec["encoding"]
    rows = read_csv(base / spec["data"])
    x, y, c = _column(rows, enc["x"]), _column(rows, enc["y"]), _column(rows, enc["color"])
    xs, ys = np.unique(x), np.unique(y)
    grid = np.full((len(ys), len(xs)), np.nan)
    grid[np.searchsorted(ys, y), np.searchsorted(xs, x)] = c
    im = ax.imshow(grid, origin="lower", extent=(xs[0], xs[-1], ys[0], ys[-1]), aspect="auto", cmap="viridis")
    ax.figure.colorbar(im, ax=ax, label=enc["color"])
    ax.set_xlabel(enc["x"])
    ax.set_ylabel(enc["y"])


def render_spec(spec_path, out_path=None) -> Path:
    """Render one plot-spec; data paths resolve relative to the spec's run directory."""
    spec_path = Path(spec_path)
    spec = json.loads(spec_path.read_text())
    base = spec_path.parent.parent
    out = Path(out_path) if out_path else base / "figures" / (spec_path.stem + ".png")
    out.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        mark = spec["mark"]
        if mark == "area":
            size = (10, 7)
        elif mark == "bar" and "facet" in spec["encoding"]:
            size = (10, 3)
        else:
            size = (5, 3.5)
        fig = plt.figure(figsize=size)
        if mark == "line":
            _line(spec, base, fig.add_subplot(111))
        elif mark == "bar":
            _bar(spec, base, fig)
        elif mark == "area":
            _area(spec, base, fig)
        elif mark == "heatmap":
            _heatmap(spec, base, fig.add_subplot(111))
        else:
            plt.close(fig)
            raise ValueError(f"unknown mark {mark!r} in {spec_path}")
        fig.suptitle(spec["title"])
        fig.tight_layout()
        fig.savefig(out, format="png", metadata={"Software": None})
        plt.close(fig)
    return out


def render_run(run_dir) -> list[Path]:
    """Render every spec under ``run_dir/plots`` into ``run_dir/figures``."""
    specs = sorted(Path(run_dir).glob("plots/*.json"))
    return [render_spec(p) for p in specs]
