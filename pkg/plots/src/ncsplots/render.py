"""Render FigureSpec JSON files into PNG/PDF figures.

The renderer only reads tables; it never recomputes a statistic. Five figure
kinds are supported: field_panel, heatmap, chi_curve, density_overlay, and
distribution_row. Values outside the spec's ``clip`` range are replaced by
the closest value inside it; masked (observed or NaN) pixels render in a
distinct color. Color scales are fixed per figure kind and echoed into a
``<out>.meta.json`` sidecar so panels stay comparable across configurations.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KIND_STYLE = {
    "field_panel": {"cmap": "viridis", "bad_color": "#d9d9d9"},
    "heatmap": {"cmap": "coolwarm", "bad_color": "#d9d9d9"},
    "chi_curve": {"palette": ["#1f77b4", "#ff7f0e", "#9467bd", "#2ca02c"]},
    "density_overlay": {"palette": ["#ff7f0e", "#1f77b4", "#9467bd"]},
    "distribution_row": {"palette": ["#1f77b4", "#ff7f0e", "#9467bd"]},
}

REQUIRED_NUMERIC = {
    "field_panel": ("row", "col"),
    "heatmap": ("row", "col"),
    "chi_curve": (),
    "density_overlay": (),
    "distribution_row": (),
}


class RenderError(RuntimeError):
    pass


def load_table(path: Path) -> dict[str, list[str]]:
    if not path.exists():
        raise RenderError(f"table {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RenderError(f"table {path} is empty") from None
        rows = list(reader)
    if not rows:
        raise RenderError(f"table {path} has a header but no rows")
    columns = {name: [] for name in header}
    for row in rows:
        if len(row) != len(header):
            raise RenderError(f"ragged row in {path}")
        for name, cell in zip(header, row):
            columns[name].append(cell)
    return columns


def numeric(table: dict, column: str, path: Path) -> np.ndarray:
    if column not in table:
        raise RenderError(f"table {path} lacks required column {column!r}")
    return np.array([float(v) for v in table[column]])


def apply_clip(values: np.ndarray, clip) -> np.ndarray:
    if clip is None:
        return values
    lo, hi = float(clip[0]), float(clip[1])
    return np.clip(values, lo, hi)


def _grid_image(table: dict, value_column: str, clip, path: Path) -> np.ndarray:
    rows = numeric(table, "row", path).astype(int)
    cols = numeric(table, "col", path).astype(int)
    vals = apply_clip(numeric(table, value_column, path), clip)
    img = np.full((rows.max() + 1, cols.max() + 1), np.nan)
    img[rows, cols] = vals
    if "observed" in table:
        obs = numeric(table, "observed", path).astype(bool)
        img[rows[obs], cols[obs]] = np.nan  # masked pixels render distinctly
    return img


def _series_groups(table: dict, series_by: str | None):
    if series_by is None or series_by not in table:
        return [("all", np.ones(len(next(iter(table.values()))), dtype=bool))]
    labels = np.array(table[series_by])
    return [(label, labels == label) for label in dict.fromkeys(table[series_by])]


def render_spec(spec: dict, spec_dir: Path) -> Path:
    kind = spec.get("kind")
    if kind not in KIND_STYLE:
        raise RenderError(f"unknown figure kind {kind!r}")
    tables = [spec_dir / t for t in spec.get("tables", [])]
    if not tables:
        raise RenderError("spec references no tables")
    loaded = [(p, load_table(p)) for p in tables]
    clip = spec.get("clip")
    value_column = spec.get("value_column", "value")
    if "out" not in spec:
        raise RenderError("spec lacks an 'out' image path")
    out_path = spec_dir / spec["out"]
    style = KIND_STYLE[kind]

    if kind in ("field_panel", "heatmap"):
        layout = spec.get("layout", [1, len(loaded)])
        nrows, ncols = int(layout[0]), int(layout[1])
        if nrows * ncols < len(loaded):
            nrows, ncols = 1, len(loaded)
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 3.0 * nrows),
                                 squeeze=False)
        cmap = matplotlib.colormaps[style["cmap"]].copy()
        cmap.set_bad(style["bad_color"])
        vmin = clip[0] if clip else None
        vmax = clip[1] if clip else None
        im = None
        for ax, (path, table) in zip(axes.ravel(), loaded):
            img = _grid_image(table, value_column, clip, path)
            im = ax.imshow(img, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax,
                           interpolation="nearest")
            ax.set_xticks([]); ax.set_yticks([])
            ax.set_title(path.stem, fontsize=9)
        for ax in axes.ravel()[len(loaded):]:
            ax.axis("off")
        if im is not None:
            fig.colorbar(im, ax=axes, shrink=0.85)
        scale_meta = {"cmap": style["cmap"], "vmin": vmin, "vmax": vmax}

    elif kind == "chi_curve":
        path, table = loaded[0]
        x_col = spec.get("x_column", "h_mean")
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for i, (label, sel) in enumerate(_series_groups(table, spec.get("series_by"))):
            xs = numeric(table, x_col, path)[sel]
            ys = apply_clip(numeric(table, value_column, path), clip)[sel]
            order = np.argsort(xs)
            ax.plot(xs[order], ys[order], marker="o", ms=3,
                    color=style["palette"][i % len(style["palette"])], label=label)
        ax.set_xlabel("distance h")
        ax.set_ylabel("chi(h)")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
        scale_meta = {"ylim": [-0.02, 1.02]}

    elif kind in ("density_overlay", "distribution_row"):
        path, table = loaded[0]
        panel_by = spec.get("panel_by")
        x_col = spec.get("x_column", "x")
        if panel_by and panel_by in table:
            panels = list(dict.fromkeys(table[panel_by]))
        else:
            panels = [None]
        if not panels:
            raise RenderError("no panels to draw")
        layout = spec.get("layout", [1, len(panels)])
        nrows, ncols = int(layout[0]), int(layout[1])
        if nrows * ncols < len(panels):
            nrows, ncols = 1, len(panels)
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.4 * ncols, 2.8 * nrows),
                                 squeeze=False)
        labels_col = np.array(table[panel_by]) if panels != [None] else None
        for ax, panel in zip(axes.ravel(), panels):
            sel_panel = labels_col == panel if panel is not None else \
                np.ones(len(table[x_col]), dtype=bool)
            for i, (label, sel_series) in enumerate(
                    _series_groups(table, spec.get("series_by"))):
                sel = sel_panel & sel_series
                if not sel.any():
                    continue
                xs = numeric(table, x_col, path)[sel]
                ys = apply_clip(numeric(table, value_column, path), clip)[sel]
                order = np.argsort(xs)
                ax.plot(xs[order], ys[order],
                        color=style["palette"][i % len(style["palette"])],
                        label=label)
            ax.set_title("" if panel is None else str(panel), fontsize=9)
            ax.legend(fontsize=7)
        for ax in axes.ravel()[len(panels):]:
            ax.axis("off")
        scale_meta = {"palette": style["palette"]}

    if "title" in spec:
        fig.suptitle(spec["title"], fontsize=11)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    meta = {"kind": kind, "clip": clip, "tables": [str(t) for t in spec["tables"]],
            "scale": scale_meta}
    Path(str(out_path) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out_path


def render_spec_file(path: str | Path) -> Path:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RenderError(f"cannot read figure spec {path}: {exc}") from exc
    return render_spec(spec, path.parent)
