import json
import textwrap
from pathlib import Path

import numpy as np
import pytest

from ncsim.cli import main
from ncsim.grid import load_field, load_mask

BASE_GAUSS = """
[grid]
side = 8

[process]
kind = "gaussian"
length_scale = 3.0
variance = 1.5

[schedule]
steps = 40
beta0 = 0.002
beta_t = 0.3

[mask]
law = "bernoulli"
rho = 0.2

[net]
base_width = 4
depth = 2
fourier_features = 8

[train]
mode = "fixed"
r = 1
p = 1
s = 8
m = 8
val_s = 2
val_m = 4
draws = 1
epochs = 2
batch_size = 16
learning_rate = 5e-3
rho = 0.2

[eval]
m = 60
metrics = ["chi", "ks", "cond_mean"]
bins = 8
permutations = 20

[io]
seed = 99
"""


def write_config(tmp_path, old=None, new=None, body=BASE_GAUSS):
    text = body if old is None else body.replace(old, new)
    path = tmp_path / "exp.toml"
    path.write_text(text)
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_writes_fields_and_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["--config", str(cfg), "--out", str(out1), "simulate",
                     "--count", "5", "--masks", "--csv"]) == 0
        assert main(["--config", str(cfg), "--out", str(out2), "simulate",
                     "--count", "5", "--masks", "--csv"]) == 0
        t1, t2 = tree_bytes(out1), tree_bytes(out2)
        assert set(t1) == set(t2)
        for name in t1:
            assert t1[name] == t2[name], name
        assert len([n for n in t1 if n.startswith("field_") and
                    n.endswith(".bin")]) == 5
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["seed"] == 99
        f = load_field(out1 / "field_00000.bin")
        assert f.n == 64

    def test_different_seed_changes_fields(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        main(["--config", str(cfg), "--out", str(out1), "simulate"])
        main(["--config", str(cfg), "--out", str(out2), "--seed", "123",
              "simulate"])
        a = load_field(out1 / "field_00000.bin")
        b = load_field(out2 / "field_00000.bin")
        assert not np.array_equal(a.values, b.values)

    def test_invalid_config_exits_2_without_files(self, tmp_path):
        cfg = write_config(tmp_path, "rho = 0.2", "rho = 1.5")
        out = tmp_path / "bad"
        assert main(["--config", str(cfg), "--out", str(out), "simulate"]) == 2
        assert not out.exists() or not any(out.iterdir())

    def test_unknown_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "[grid]\nside = 8",
                           "[grid]\nside = 8\nbogus = 1")
        assert main(["--config", str(cfg), "--out", str(tmp_path / "x"),
                     "simulate"]) == 2

    @pytest.mark.slow
    def test_brown_resnick_fields_pass_marginal_check(self, tmp_path):
        body = BASE_GAUSS.replace('kind = "gaussian"', 'kind = "brown_resnick"') \
                         .replace("side = 8", "side = 16")
        cfg = write_config(tmp_path, body=body)
        out = tmp_path / "br"
        assert main(["--config", str(cfg), "--out", str(out), "simulate",
                     "--count", "5000"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["scale"] == "gumbel"
        vals = np.stack([load_field(out / f"field_{i:05d}.bin").values
                         for i in range(5000)])
        # Gumbel scale: P(G <= 0) = exp(-1)
        p0 = (vals <= 0.0).mean(axis=0)
        assert np.abs(p0 - np.exp(-1)).max() < 0.025


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_train")
    cfg = write_config(tmp)
    out = tmp / "train_out"
    code = main(["--config", str(cfg), "--out", str(out), "train"])
    assert code == 0
    return cfg, out


class TestTrain:
    def test_outputs_exist(self, trained_run):
        _, out = trained_run
        assert (out / "checkpoint.bin").exists()
        curve = (out / "training_curve.csv").read_text().splitlines()
        assert curve[0] == "draw,epoch,train_loss,val_loss"
        assert len(curve) == 3

    def test_rerun_is_byte_identical(self, trained_run, tmp_path):
        cfg, out = trained_run
        out2 = tmp_path / "again"
        assert main(["--config", str(cfg), "--out", str(out2), "train"]) == 0
        assert (out / "checkpoint.bin").read_bytes() == \
            (out2 / "checkpoint.bin").read_bytes()
        assert (out / "training_curve.csv").read_bytes() == \
            (out2 / "training_curve.csv").read_bytes()

    def test_zero_draw_resume_reemits_checkpoint(self, trained_run, tmp_path):
        cfg, out = trained_run
        cfg0 = write_config(tmp_path, "draws = 1", "draws = 0")
        out2 = tmp_path / "resumed"
        assert main(["--config", str(cfg0), "--out", str(out2), "train",
                     "--resume", str(out / "checkpoint.bin")]) == 0
        assert (out / "checkpoint.bin").read_bytes() == \
            (out2 / "checkpoint.bin").read_bytes()


class TestSample:
    def test_all_ones_mask_returns_input(self, trained_run, tmp_path):
        import numpy as np
        from ncsim.grid import Field, Mask, save_field, save_mask
        cfg, out = trained_run
        gen = np.random.default_rng(5)
        field = Field(gen.standard_normal(64))
        save_field(tmp_path / "obs.bin", field)
        save_mask(tmp_path / "m.bin", Mask(np.ones(64, dtype=np.uint8)))
        sout = tmp_path / "samp"
        assert main(["--config", str(cfg), "--out", str(sout), "sample",
                     "--checkpoint", str(out / "checkpoint.bin"),
                     "--obs", str(tmp_path / "obs.bin"),
                     "--mask", str(tmp_path / "m.bin"), "--count", "2"]) == 0
        for i in range(2):
            got = load_field(sout / f"completion_{i:05d}.bin")
            assert np.array_equal(got.values, field.values)

    def test_observed_pixels_preserved_and_rerun_identical(self, trained_run,
                                                           tmp_path):
        import numpy as np
        from ncsim.grid import Field, Mask, save_field, save_mask
        cfg, out = trained_run
        gen = np.random.default_rng(6)
        field = Field(gen.standard_normal(64))
        bits = (gen.random(64) < 0.3).astype(np.uint8)
        save_field(tmp_path / "obs.bin", field)
        save_mask(tmp_path / "m.bin", Mask(bits))
        s1, s2 = tmp_path / "s1", tmp_path / "s2"
        for sout in (s1, s2):
            assert main(["--config", str(cfg), "--out", str(sout), "sample",
                         "--checkpoint", str(out / "checkpoint.bin"),
                         "--obs", str(tmp_path / "obs.bin"),
                         "--mask", str(tmp_path / "m.bin"), "--count", "3"]) == 0
        for i in range(3):
            a = load_field(s1 / f"completion_{i:05d}.bin")
            b = load_field(s2 / f"completion_{i:05d}.bin")
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.values[bits == 1], field.values[bits == 1])

    def test_schedule_fingerprint_mismatch_rejected(self, trained_run, tmp_path):
        import numpy as np
        from ncsim.grid import Field, Mask, save_field, save_mask
        cfg, out = trained_run
        other = write_config(tmp_path, "beta_t = 0.3", "beta_t = 0.29")
        gen = np.random.default_rng(7)
        save_field(tmp_path / "obs.bin", Field(gen.standard_normal(64)))
        save_mask(tmp_path / "m.bin", Mask(np.ones(64, dtype=np.uint8)))
        code = main(["--config", str(other), "--out", str(tmp_path / "x"),
                     "sample", "--checkpoint", str(out / "checkpoint.bin"),
                     "--obs", str(tmp_path / "obs.bin"),
                     "--mask", str(tmp_path / "m.bin")])
        assert code == 2


class TestValidate:
    def test_oracle_self_test_tables(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "val"
        assert main(["--config", str(cfg), "--out", str(out), "validate",
                     "--oracle"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["tables"]) == {"chi.csv", "ks_per_pixel.csv",
                                           "cond_mean.csv",
                                           "reference_field.csv"}
        ks_lines = (out / "ks_per_pixel.csv").read_text().splitlines()
        header = ks_lines[0].split(",")
        ks_col = header.index("ks")
        ks = np.array([float(l.split(",")[ks_col]) for l in ks_lines[1:]])
        crit = 1.36 * np.sqrt(2 / 60)
        assert (ks <= crit * 1.3).mean() >= 0.9  # tiny m, loose gate

    def test_empty_metrics_manifest_only(self, tmp_path):
        cfg = write_config(tmp_path, 'metrics = ["chi", "ks", "cond_mean"]',
                           "metrics = []")
        out = tmp_path / "val0"
        assert main(["--config", str(cfg), "--out", str(out), "validate",
                     "--oracle"]) == 0
        assert {p.name for p in out.iterdir()} == {"manifest.json"}

    def test_oracle_on_brown_resnick_rejected(self, tmp_path):
        cfg = write_config(tmp_path, 'kind = "gaussian"',
                           'kind = "brown_resnick"')
        assert main(["--config", str(cfg), "--out", str(tmp_path / "v"),
                     "validate", "--oracle"]) == 2

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        o1, o2 = tmp_path / "v1", tmp_path / "v2"
        for out in (o1, o2):
            assert main(["--config", str(cfg), "--out", str(out), "validate",
                         "--oracle"]) == 0
        t1, t2 = tree_bytes(o1), tree_bytes(o2)
        assert t1 == t2


class TestReport:
    def test_emits_figure_specs(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "val"
        assert main(["--config", str(cfg), "--out", str(out), "validate",
                     "--oracle"]) == 0
        assert main(["--config", str(cfg), "--out", str(out), "report"]) == 0
        figs = out / "figures"
        spec_names = {p.name for p in figs.glob("*.json")} - {"manifest.json"}
        assert {"chi.json", "ks.json", "cond_mean.json",
                "reference_field.json"} <= spec_names
        spec = json.loads((figs / "chi.json").read_text())
        assert spec["kind"] == "chi_curve"
        assert spec["tables"] == ["../chi.csv"]

    def test_report_requires_validate_output(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["--config", str(cfg), "--out", str(tmp_path / "none"),
                     "report"]) == 4
