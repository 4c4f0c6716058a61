import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ncsplots.cli import main as cli_main
from ncsplots.render import (RenderError, _grid_image, apply_clip, load_table,
                             render_spec, render_spec_file)

CONFIG = """
[grid]
side = 8

[process]
kind = "gaussian"
length_scale = 3.0
variance = 1.5

[schedule]
steps = 30
beta0 = 0.002
beta_t = 0.3

[mask]
law = "bernoulli"
rho = 0.2

[eval]
m = 40
metrics = ["chi", "summaries", "ks", "energy", "cond_mean", "pcc", "densities"]
bins = 8
permutations = 10

[io]
seed = 7
"""


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    """Reference report tables produced by the primary CLI (external surface)."""
    tmp = tmp_path_factory.mktemp("refrun")
    cfg = tmp / "exp.toml"
    cfg.write_text(CONFIG)
    out = tmp / "run"
    for verb in (["validate", "--oracle"], ["report"]):
        proc = subprocess.run(
            [sys.executable, "-m", "ncsim.cli", "--config", str(cfg),
             "--out", str(out)] + verb,
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    return out


def write_field_csv(path: Path, side: int, values, observed=None):
    rows = ["index,row,col,value,observed"]
    for i, v in enumerate(values):
        obs = 0 if observed is None else int(observed[i])
        rows.append(f"{i},{i // side},{i % side},{v},{obs}")
    path.write_text("\n".join(rows) + "\n")


class TestReferenceFigures:
    def test_all_five_kinds_render(self, reference_run):
        figs = reference_run / "figures"
        specs = sorted(p for p in figs.glob("*.json")
                       if p.name != "manifest.json"
                       and not p.name.endswith(".meta.json"))
        kinds = set()
        for spec_path in specs:
            out = render_spec_file(spec_path)
            assert out.exists() and out.stat().st_size > 0
            kinds.add(json.loads(spec_path.read_text())["kind"])
            meta = json.loads(Path(str(out) + ".meta.json").read_text())
            assert meta["kind"] in kinds
        assert kinds == {"field_panel", "density_overlay", "chi_curve",
                         "heatmap", "distribution_row"}

    def test_cli_renders_and_reports_paths(self, reference_run):
        figs = reference_run / "figures"
        spec = str(figs / "chi.json")
        assert cli_main(["--spec", spec]) == 0

    def test_rerender_is_byte_identical(self, reference_run):
        figs = reference_run / "figures"
        spec = figs / "cond_mean.json"
        out = render_spec_file(spec)
        first = out.read_bytes()
        out2 = render_spec_file(spec)
        assert out2.read_bytes() == first


class TestClipping:
    def test_values_outside_range_replaced_with_closest(self, tmp_path):
        vals = np.array([-5.0, -2.0, 0.0, 6.0, 9.0, 1.0, 2.0, 3.0, 4.0,
                         -1.0, 5.0, 2.5, 0.5, -0.5, 1.5, 2.2])
        write_field_csv(tmp_path / "f.csv", 4, vals)
        table = load_table(tmp_path / "f.csv")
        img = _grid_image(table, "value", [-2.0, 6.0], tmp_path / "f.csv")
        assert np.nanmin(img) == -2.0
        assert np.nanmax(img) == 6.0
        assert img[0, 0] == -2.0  # -5 clipped up
        assert img[1, 0] == 6.0   # 9 clipped down

    def test_default_brown_resnick_clip_in_specs(self):
        # the primary emits [-2, 6] for Brown-Resnick field panels; the
        # renderer applies whatever the spec says
        assert apply_clip(np.array([-3.0, 7.0]), (-2.0, 6.0)).tolist() == [-2.0, 6.0]

    def test_observed_pixels_masked_distinctly(self, tmp_path):
        vals = np.arange(16.0)
        observed = np.zeros(16); observed[3] = 1
        write_field_csv(tmp_path / "f.csv", 4, vals, observed)
        table = load_table(tmp_path / "f.csv")
        img = _grid_image(table, "value", None, tmp_path / "f.csv")
        assert np.isnan(img[0, 3])
        assert not np.isnan(img[0, 2])

    def test_render_smoke_with_clip(self, tmp_path):
        vals = np.linspace(-5, 10, 16)
        write_field_csv(tmp_path / "f.csv", 4, vals)
        spec = {"kind": "field_panel", "tables": ["f.csv"], "out": "f.png",
                "clip": [-2.0, 6.0], "value_column": "value", "layout": [1, 1]}
        out = render_spec(spec, tmp_path)
        assert out.exists()
        meta = json.loads((tmp_path / "f.png.meta.json").read_text())
        assert meta["clip"] == [-2.0, 6.0]
        assert meta["scale"]["vmin"] == -2.0


class TestErrors:
    def test_missing_table_fails_without_output(self, tmp_path):
        spec_path = tmp_path / "s.json"
        spec_path.write_text(json.dumps({
            "kind": "density_overlay", "tables": ["absent.csv"],
            "out": "x.png", "x_column": "x", "value_column": "density"}))
        with pytest.raises(RenderError):
            render_spec_file(spec_path)
        assert not (tmp_path / "x.png").exists()
        assert cli_main(["--spec", str(spec_path)]) == 1

    def test_empty_density_table_rejected(self, tmp_path):
        (tmp_path / "d.csv").write_text("pixel,x,density\n")
        spec_path = tmp_path / "s.json"
        spec_path.write_text(json.dumps({
            "kind": "density_overlay", "tables": ["d.csv"], "out": "d.png",
            "panel_by": "pixel", "x_column": "x", "value_column": "density"}))
        with pytest.raises(RenderError):
            render_spec_file(spec_path)
        assert not (tmp_path / "d.png").exists()

    def test_unknown_kind_rejected(self, tmp_path):
        (tmp_path / "t.csv").write_text("a,b\n1,2\n")
        with pytest.raises(RenderError):
            render_spec(
                {"kind": "mystery", "tables": ["t.csv"], "out": "o.png"}, tmp_path)

    def test_missing_required_column(self, tmp_path):
        (tmp_path / "t.csv").write_text("index,value\n0,1.0\n")
        spec = {"kind": "heatmap", "tables": ["t.csv"], "out": "o.png",
                "value_column": "value"}
        with pytest.raises(RenderError):
            render_spec(spec, tmp_path)
