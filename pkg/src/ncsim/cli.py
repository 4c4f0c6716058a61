"""Config-driven experiment orchestration.

Verbs: ``simulate | train | sample | validate | report``. Every command is
deterministic given identical config + seed: outputs are byte-identical
across re-runs, inputs are never mutated, and everything lands under the
configured output directory. Exit codes: 0 success, 2 config error,
3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, NcsimError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _limit_threads(n: int) -> None:
    if n <= 0:
        return
    os.environ["OMP_NUM_THREADS"] = str(n)
    os.environ["OPENBLAS_NUM_THREADS"] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _write_manifest(out_dir: Path, payload: dict) -> None:
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _base_manifest(cfg, command: str, **extra) -> dict:
    # the output directory is where the manifest lives; echoing it would make
    # otherwise-identical runs to different directories differ byte-wise
    config_echo = {name: dict(section) for name, section in cfg.raw.items()}
    config_echo["io"].pop("out_dir")
    payload = {"command": command, "config": config_echo, "seed": cfg.seed}
    payload.update(extra)
    return payload


def cmd_simulate(cfg, count: int, with_masks: bool, emit_csv: bool) -> int:
    import numpy as np
    from .grid import Field, RngStream, field_to_csv, save_field, save_mask
    from .validation import simulate_eval_fields

    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.process_model()
    rng = RngStream(cfg.seed, 0x51)
    fields, scale = simulate_eval_fields(model, rng, count)
    mask_law = cfg.mask_law() if with_masks else None
    files = []
    for i in range(count):
        field = Field(fields[i], scale)
        path = out / f"field_{i:05d}.bin"
        save_field(path, field)
        files.append(path.name)
        if emit_csv:
            field_to_csv(out / f"field_{i:05d}.csv", model.grid, field)
        if mask_law is not None:
            mask = mask_law(RngStream(cfg.seed, 0x52).child(i))
            save_mask(out / f"mask_{i:05d}.bin", mask)
            files.append(f"mask_{i:05d}.bin")
    _write_manifest(out, _base_manifest(
        cfg, "simulate", count=count, scale=scale.name.lower(), files=files))
    return EXIT_OK


def cmd_train(cfg, resume_path: str | None) -> int:
    from .grid import RngStream
    from .scorenet import load_checkpoint, save_checkpoint
    from .training import train

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.train_spec()
    net_cfg = cfg.net_config()
    sched = cfg.schedule()
    resume = load_checkpoint(resume_path) if resume_path else None
    print(f"training: mode={spec.mode} draws={spec.draws} epochs={spec.epochs} "
          f"batch={spec.batch_size}", file=sys.stderr)
    ckpt = train(spec, net_cfg, sched, RngStream(cfg.seed, 0x7E),
                 curve_path=out / "training_curve.csv", resume=resume,
                 log=lambda line: print(line, file=sys.stderr))
    save_checkpoint(ckpt, out / "checkpoint.bin")
    _write_manifest(out, _base_manifest(
        cfg, "train", schedule_fingerprint=ckpt.schedule_fingerprint,
        train_meta=ckpt.train_meta,
        files=["checkpoint.bin", "training_curve.csv"]))
    print(f"checkpoint written to {out / 'checkpoint.bin'}", file=sys.stderr)
    return EXIT_OK


def cmd_sample(cfg, checkpoint_path: str, obs_path: str, mask_path: str,
               count: int) -> int:
    from .grid import RngStream, load_field, load_mask, merge_field, save_field
    from .scorenet import load_checkpoint
    from .validation import DiffusionSampler

    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    obs = load_field(obs_path)
    mask = load_mask(mask_path)
    if obs.n != mask.n:
        raise ConfigError("observation field and mask have different lengths")
    g = cfg.grid()
    if obs.n != g.n:
        raise ConfigError(f"observations have {obs.n} values, config grid has {g.n}")
    ckpt = load_checkpoint(checkpoint_path, expected_grid_side=g.side)
    sched = cfg.schedule()
    if ckpt.schedule_fingerprint != sched.fingerprint():
        raise ConfigError(
            "checkpoint schedule fingerprint does not match the config schedule")
    theta = None
    if ckpt.config.conditioning == "theta_scaled_mask":
        theta = cfg.process_params()[0]
    sampler = DiffusionSampler.from_checkpoint(
        ckpt, sched, theta=theta,
        final_step_noise=cfg.section("schedule")["final_step_noise"])
    completions = sampler.sample(obs, mask, count, RngStream(cfg.seed, 0x5A))
    files = []
    for i in range(count):
        merged = merge_field(mask, obs.values[mask.observed_idx], completions[i],
                             obs.scale)
        path = out / f"completion_{i:05d}.bin"
        save_field(path, merged)
        files.append(path.name)
    _write_manifest(out, _base_manifest(
        cfg, "sample", count=count, checkpoint_fingerprint=ckpt.schedule_fingerprint,
        files=files))
    return EXIT_OK


def cmd_validate(cfg, checkpoint_path: str | None, oracle: bool) -> int:
    import numpy as np
    from .grid import RngStream
    from .scorenet import load_checkpoint
    from .validation import (DiffusionSampler, ExactGaussianSampler, SummaryReport,
                             build_cond_eval, build_uncond_eval,
                             conditional_mean_field, default_distance_bins,
                             energy_permutation_null, extremal_correlation,
                             field_table_rows, kde_1d, pcc_heatmap,
                             summary_distributions, two_sample_distances)

    if oracle == (checkpoint_path is not None):
        raise ConfigError("pass exactly one of --oracle or --checkpoint")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.process_model()
    sched = cfg.schedule()
    eval_cfg = cfg.section("eval")
    metrics = list(eval_cfg["metrics"])
    rng = RngStream(cfg.seed, 0xEA)

    if oracle:
        if model.kind != "gaussian":
            raise ConfigError("the exact conditional oracle exists only for the "
                              "Gaussian process")
        sampler = ExactGaussianSampler(model)
        fingerprint = "oracle"
    else:
        ckpt = load_checkpoint(checkpoint_path, expected_grid_side=model.grid.side)
        if ckpt.schedule_fingerprint != sched.fingerprint():
            raise ConfigError(
                "checkpoint schedule fingerprint does not match the config schedule")
        theta = None
        if ckpt.config.conditioning == "theta_scaled_mask":
            theta = cfg.process_params()[0]
        sampler = DiffusionSampler.from_checkpoint(
            ckpt, sched, theta=theta,
            final_step_noise=cfg.section("schedule")["final_step_noise"])
        fingerprint = ckpt.schedule_fingerprint

    report = SummaryReport()
    report.manifest = _base_manifest(cfg, "validate",
                                     checkpoint_fingerprint=fingerprint,
                                     m=eval_cfg["m"], metrics=metrics)
    m = int(eval_cfg["m"])
    mask_law = cfg.mask_law()
    label = {"process": model.kind, "source": sampler.tag}

    uncond_metrics = {"chi", "summaries", "ks", "energy"} & set(metrics)
    if uncond_metrics:
        ues = build_uncond_eval(sampler, model, mask_law, m, rng.child(1),
                                config=label)
        if "chi" in metrics:
            edges = default_distance_bins(model.grid, int(eval_cfg["bins"]))
            rows = extremal_correlation(ues.merged, model.grid, edges,
                                        config={**label, "fields": sampler.tag})
            rows += extremal_correlation(ues.true, model.grid, edges,
                                         config={**label, "fields": "true"})
            report.add("chi", rows)
        if "summaries" in metrics:
            rows = summary_distributions(ues.merged,
                                         config={**label, "fields": sampler.tag})
            rows += summary_distributions(ues.true,
                                          config={**label, "fields": "true"})
            report.add("summaries", rows)
        if "ks" in metrics or "energy" in metrics:
            ts = two_sample_distances(ues.merged, ues.true)
            if "ks" in metrics:
                rows = []
                for i, stat in enumerate(ts.ks_per_pixel):
                    rows.append({"index": i, "row": i // model.grid.side,
                                 "col": i % model.grid.side, "ks": float(stat),
                                 **label})
                report.add("ks_per_pixel", rows)
            if "energy" in metrics:
                observed, null = energy_permutation_null(
                    ues.merged, ues.true, int(eval_cfg["permutations"]),
                    rng.child(2))
                report.add("energy", [{
                    "energy": float(observed),
                    "null_q50": float(np.quantile(null, 0.50)),
                    "null_q95": float(np.quantile(null, 0.95)),
                    "null_q99": float(np.quantile(null, 0.99)),
                    "permutations": int(eval_cfg["permutations"]), **label}])

    cond_metrics = {"cond_mean", "pcc", "densities"} & set(metrics)
    if cond_metrics:
        ces = build_cond_eval(sampler, model, mask_law, m, rng.child(3),
                              config=label)
        if "cond_mean" in metrics:
            report.add("cond_mean", field_table_rows(
                model.grid, conditional_mean_field(ces), ces.mask, config=label))
        if "pcc" in metrics:
            anchor = eval_cfg["anchor"]
            if anchor is None:
                anchor = int(ces.mask.unobserved_idx[0])
            report.add("pcc", field_table_rows(
                model.grid, pcc_heatmap(ces, anchor), ces.mask,
                config={**label, "anchor": anchor}))
        if "densities" in metrics:
            ui = ces.mask.unobserved_idx
            n_probe = min(int(eval_cfg["probes"]), ui.size)
            probes = ui[np.linspace(0, ui.size - 1, n_probe).astype(int)]
            rows = []
            for pix in probes:
                col = np.flatnonzero(ui == pix)[0]
                xs, dens = kde_1d(ces.completions[:, col])
                for x, dn in zip(xs, dens):
                    rows.append({"pixel": int(pix), "x": float(x),
                                 "density": float(dn), **label})
            report.add("cond_density", rows)
        report.add("reference_field", field_table_rows(
            model.grid, ces.reference.values, ces.mask, config=label))

    report.write(out)
    return EXIT_OK


def cmd_report(cfg, run_dir: str | None) -> int:
    from .report import emit_figure_specs

    out = cfg.out_dir
    run = Path(run_dir) if run_dir else out
    if not (run / "manifest.json").exists():
        raise FormatError(f"{run} does not contain a validate manifest")
    specs = emit_figure_specs(run, cfg)
    rendered = []
    try:
        from ncsplots.render import render_spec_file
    except ImportError:
        render_spec_file = None
        print("ncsplots is not installed; figure specs written without rendering",
              file=sys.stderr)
    if render_spec_file is not None:
        for spec in specs:
            rendered.append(str(render_spec_file(spec)))
    _write_manifest(run / "figures", _base_manifest(
        cfg, "report", specs=[p.name for p in specs], rendered=rendered))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncsim",
        description="Conditional simulation of spatial fields with masked "
                    "score-based diffusion")
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override io.seed (env: NCSIM_SEED)")
    parser.add_argument("--out", default=None,
                        help="override io.out_dir")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads (env: NCSIM_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw unconditional fields")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--masks", action="store_true", help="also draw masks")
    p.add_argument("--csv", action="store_true", help="emit CSV next to binaries")

    p = sub.add_parser("train", help="train the score network")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("sample", help="conditional completions for observations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--obs", required=True, help="observation Field file")
    p.add_argument("--mask", required=True, help="Mask file")
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("validate", help="build evaluation sets and metric tables")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", default=None)
    group.add_argument("--oracle", action="store_true",
                       help="use the exact Gaussian conditional")

    p = sub.add_parser("report", help="emit figure specs from validate output")
    p.add_argument("--run", default=None, help="validate output dir (default: io.out_dir)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    seed = args.seed
    if seed is None and os.environ.get("NCSIM_SEED"):
        seed = int(os.environ["NCSIM_SEED"])
    threads = args.threads
    if threads is None and os.environ.get("NCSIM_THREADS"):
        threads = int(os.environ["NCSIM_THREADS"])
    _limit_threads(threads or 0)

    try:
        from .config import load_config
        cfg = load_config(args.config, seed_override=seed, out_override=args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.count, args.masks, args.csv)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "sample":
            return cmd_sample(cfg, args.checkpoint, args.obs, args.mask, args.count)
        if args.command == "validate":
            return cmd_validate(cfg, args.checkpoint, args.oracle)
        if args.command == "report":
            return cmd_report(cfg, args.run)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except NcsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
