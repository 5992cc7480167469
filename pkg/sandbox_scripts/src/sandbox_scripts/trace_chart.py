"""Element tracer: runs chart code headlessly and serializes figure structure.

Walks every constructed figure to collect text artist strings, chart-type
tags inferred from artist classes, the subplot grid, and the face/edge
colors actually assigned to plotted artists (alpha composited over white,
quantized to 24-bit RGB). Writes one JSON record with keys exactly
{texts, type_tags, layout, colors}; savefig is suppressed so tracing never
produces rasters. Same CLI and error contract as the renderer.
"""

import argparse
import json
import math
import os
import sys
import traceback
from pathlib import Path

# Tag vocabulary note: histograms are BarContainers at the artist level and
# therefore classify as "bar"; box plots are recognized via their patches
# only when drawn with patch_artist. Both traces of a pair use this same
# classifier, so the scores stay comparable.
KNOWN_TAGS = (
    "line", "scatter", "bar", "barh", "hist", "pie", "heatmap",
    "box", "violin", "area", "errorbar", "contour", "other",
)


def _parse_args(argv):
    parser = argparse.ArgumentParser(description="trace chart elements from code")
    parser.add_argument("--code-file", required=True)
    parser.add_argument("--out", default=None, help="accepted for contract parity; unused")
    parser.add_argument("--trace-out", required=True)
    return parser.parse_args(argv)


def _emit_error(exc):
    print(json.dumps({
        "error_class": type(exc).__name__,
        "message": str(exc),
        "traceback": traceback.format_exc(),
    }))


def _rgb24(rgba) -> str:
    r, g, b, a = rgba
    r = a * r + (1.0 - a)
    g = a * g + (1.0 - a)
    b = a * b + (1.0 - a)
    return "#%02X%02X%02X" % (
        min(255, int(round(r * 255.0))),
        min(255, int(round(g * 255.0))),
        min(255, int(round(b * 255.0))),
    )


def _collect_texts(fig):
    texts = []

    def _add(value):
        if value and value.strip():
            texts.append(value)

    for artist in fig.texts:
        _add(artist.get_text())
    for ax in fig.axes:
        for loc in ("center", "left", "right"):
            _add(ax.get_title(loc=loc))
        _add(ax.get_xlabel())
        _add(ax.get_ylabel())
        for artist in ax.texts:
            _add(artist.get_text())
        legend = ax.get_legend()
        if legend is not None:
            for artist in legend.get_texts():
                _add(artist.get_text())
    return texts


def _container_children(ax):
    children = set()
    for container in getattr(ax, "containers", []):
        try:
            for artist in container.get_children():
                children.add(id(artist))
        except Exception:
            continue
    return children


def _classify_axes(ax):
    from matplotlib.collections import (
        LineCollection,
        PathCollection,
        PolyCollection,
        QuadMesh,
    )
    from matplotlib.container import BarContainer, ErrorbarContainer
    from matplotlib.patches import PathPatch, Wedge

    try:
        from matplotlib.contour import ContourSet
    except ImportError:
        ContourSet = ()

    tags = set()
    for container in getattr(ax, "containers", []):
        if isinstance(container, BarContainer):
            orientation = getattr(container, "orientation", "vertical")
            tags.add("barh" if orientation == "horizontal" else "bar")
        elif isinstance(container, ErrorbarContainer):
            tags.add("errorbar")

    if any(isinstance(p, Wedge) for p in ax.patches):
        tags.add("pie")
    if any(isinstance(p, PathPatch) for p in ax.patches):
        tags.add("box")
    if ax.images:
        tags.add("heatmap")

    has_poly = False
    has_line_collection = False
    for coll in ax.collections:
        if ContourSet and isinstance(coll, ContourSet):
            tags.add("contour")
        elif isinstance(coll, QuadMesh):
            tags.add("heatmap")
        elif isinstance(coll, PolyCollection):
            has_poly = True
        elif isinstance(coll, LineCollection):
            has_line_collection = True
        elif isinstance(coll, PathCollection):
            tags.add("scatter")
    if has_poly:
        tags.add("violin" if has_line_collection else "area")

    owned = _container_children(ax)
    if any(id(line) not in owned for line in ax.lines):
        tags.add("line")
    return tags


def _collect_colors(ax):
    import numpy as np
    from matplotlib.colors import to_rgba

    colors = set()
    owned = _container_children(ax)
    for line in ax.lines:
        if id(line) in owned:
            continue
        colors.add(_rgb24(to_rgba(line.get_color())))
    for patch in ax.patches:
        face = to_rgba(patch.get_facecolor())
        if face[3] > 0.0:
            colors.add(_rgb24(face))
        else:
            edge = to_rgba(patch.get_edgecolor())
            if edge[3] > 0.0:
                colors.add(_rgb24(edge))
    for coll in ax.collections:
        faces = np.atleast_2d(np.asarray(coll.get_facecolor(), dtype=float))
        rows = [row for row in faces if row.size == 4 and row[3] > 0.0]
        if not rows:
            edges = np.atleast_2d(np.asarray(coll.get_edgecolor(), dtype=float))
            rows = [row for row in edges if row.size == 4 and row[3] > 0.0]
        for row in rows:
            colors.add(_rgb24(tuple(row)))
    for container in getattr(ax, "containers", []):
        for artist in container.get_children():
            get_face = getattr(artist, "get_facecolor", None)
            if get_face is None:
                continue
            try:
                face = to_rgba(get_face())
            except (TypeError, ValueError):
                continue
            if face[3] > 0.0:
                colors.add(_rgb24(face))
    return colors


def _layout(figures):
    populated = [fig for fig in figures if fig.axes]
    if not populated:
        return {"rows": 1, "cols": 1, "n_axes": 1}
    best = max(populated, key=lambda fig: len(fig.axes))
    rows = cols = 1
    for ax in best.axes:
        try:
            spec = ax.get_subplotspec()
        except AttributeError:
            spec = None
        if spec is None:
            continue
        grid = spec.get_gridspec()
        rows = max(rows, grid.nrows)
        cols = max(cols, grid.ncols)
    n_axes = len(best.axes)
    if n_axes > rows * cols:
        cols = math.ceil(n_axes / rows)
    return {"rows": rows, "cols": cols, "n_axes": n_axes}


def build_trace(figures):
    texts = []
    tags = set()
    colors = set()
    for fig in figures:
        texts.extend(_collect_texts(fig))
        for ax in fig.axes:
            tags |= _classify_axes(ax)
            colors |= _collect_colors(ax)
    if not tags:
        tags = {"other"}
    return {
        "texts": sorted(texts),
        "type_tags": sorted(tags),
        "layout": _layout(figures),
        "colors": sorted(colors),
    }


def main(argv=None):
    args = _parse_args(argv)
    os.environ["MPLBACKEND"] = "Agg"
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    from matplotlib.figure import Figure

    try:
        code = Path(args.code_file).read_text(encoding="utf-8")
    except OSError as exc:
        _emit_error(exc)
        return 1

    original_savefig = Figure.savefig

    def savefig_noop(self, *a, **kw):
        return None

    Figure.savefig = savefig_noop
    try:
        exec(compile(code, "<chart-code>", "exec"), {"__name__": "__main__"})
        figures = [plt.figure(num) for num in plt.get_fignums()]
        record = build_trace(figures)
    except BaseException as exc:
        _emit_error(exc)
        return 1
    finally:
        Figure.savefig = original_savefig

    try:
        Path(args.trace_out).write_text(
            json.dumps(record, ensure_ascii=False), encoding="utf-8"
        )
    except OSError as exc:
        _emit_error(exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
