"""Figure-spec emission: declarative descriptions of the paper-style figures.

``ncsim report`` converts a validate run directory into small JSON files, one
per figure, pointing at the CSV tables that hold the numbers. The rendering
itself lives in the separate ``ncsplots`` package, which consumes these specs
(``ncs-plots --spec X.json``); nothing numerical is recomputed downstream.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

FIGURE_KINDS = ("field_panel", "density_overlay", "chi_curve", "heatmap",
                "distribution_row")
BR_CLIP = (-2.0, 6.0)


def _table_columns(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    return header.split(",") if header else []


def _spec(run: Path, kind: str, tables: list[str], out_name: str, **extra) -> dict:
    spec = {"kind": kind, "tables": tables, "out": out_name,
            "layout": extra.pop("layout", [1, 1]), "clip": extra.pop("clip", None)}
    spec.update(extra)
    return spec


def emit_figure_specs(run: Path, cfg) -> list[Path]:
    """Write one FigureSpec JSON per available table; returns the spec paths."""
    run = Path(run)
    fig_dir = run / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    is_br = cfg.section("process")["kind"] == "brown_resnick"
    clip = list(BR_CLIP) if is_br else None
    specs: list[dict] = []

    if (run / "chi.csv").exists():
        specs.append(_spec(run, "chi_curve", ["../chi.csv"], "chi.png",
                           series_by="fields", x_column="h_mean",
                           value_column="chi", title="Extremal correlation"))
    if (run / "summaries.csv").exists():
        specs.append(_spec(run, "distribution_row", ["../summaries.csv"],
                           "summaries.png", layout=[1, 3], panel_by="stat",
                           series_by="fields", x_column="x",
                           value_column="density",
                           title="Spatial minimum / maximum / absolute sum"))
    if (run / "cond_mean.csv").exists():
        specs.append(_spec(run, "heatmap", ["../cond_mean.csv"], "cond_mean.png",
                           clip=clip, value_column="value",
                           title="Conditional mean field"))
    if (run / "pcc.csv").exists():
        specs.append(_spec(run, "heatmap", ["../pcc.csv"], "pcc.png",
                           clip=[-1.0, 1.0], value_column="value",
                           title="Conditional correlation"))
    if (run / "cond_density.csv").exists():
        specs.append(_spec(run, "density_overlay", ["../cond_density.csv"],
                           "cond_density.png", panel_by="pixel",
                           x_column="x", value_column="density",
                           title="Predictive densities at probe pixels"))
    if (run / "reference_field.csv").exists():
        specs.append(_spec(run, "field_panel", ["../reference_field.csv"],
                           "reference_field.png", clip=clip,
                           value_column="value", title="Reference field"))
    if (run / "ks_per_pixel.csv").exists():
        specs.append(_spec(run, "heatmap", ["../ks_per_pixel.csv"], "ks.png",
                           clip=[0.0, 0.2], value_column="ks",
                           title="Per-pixel KS statistic"))

    paths = []
    for spec in specs:
        for table in spec["tables"]:
            cols = _table_columns((fig_dir / table).resolve())
            for needed in ("x_column", "value_column", "series_by", "panel_by"):
                if needed in spec and spec[needed] not in cols:
                    raise ValueError(
                        f"table {table} lacks column {spec[needed]!r} for "
                        f"{spec['kind']}")
        path = fig_dir / (Path(spec["out"]).stem + ".json")
        path.write_text(json.dumps(spec, sort_keys=True, indent=2) + "\n")
        paths.append(path)
    return paths
