"""Matplotlib defaults for report figures.

Everything that influences output bytes is pinned here so re-rendering the
same artifacts gives identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "axes.linewidth": 0.6,
    "legend.fontsize": 6,
    "legend.frameon": False,
    "lines.linewidth": 1.0,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "image.cmap": "Blues",
    "svg.hashsalt": "leafvein",
    "svg.fonttype": "path",
    "path.simplify": False,
}

# metadata keys that would otherwise embed versions or timestamps
PNG_METADATA = {"Software": None}
SVG_METADATA = {"Date": None, "Creator": None}

# 15+ distinguishable colours for per-class curves
CLASS_COLORS = plt.get_cmap("tab20").colors


def new_figure(width=6.0, height=4.5, nrows=1, ncols=1, **kw):
    fig, ax = plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height), **kw)
    return fig, ax


def save(fig, path, fmt="png"):
    metadata = PNG_METADATA if fmt == "png" else SVG_METADATA
    fig.savefig(path, format=fmt, metadata=metadata, bbox_inches="tight")
    plt.close(fig)
    return path


def style():
    """Context manager applying :data:`RC`."""
    return matplotlib.rc_context(RC)
