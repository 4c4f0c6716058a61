"""Evaluation-dataset builders and the summary statistics behind every report.

Two dataset shapes drive validation: a conditional set (one reference field,
one mask, many completions) for low-dimensional diagnostics, and an
"unconditional" set (fresh field + fresh mask + one completion, merged) whose
law should match the true unconditional law whenever the conditional sampler
is exact. All statistics are pure functions over these immutable datasets;
emission writes plain CSV tables plus a JSON manifest.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .diffusion import Schedule, reverse_conditional_paths_hetero
from .errors import ConfigError
from .grid import Field, GridSpec, Mask, RngStream, Scale, merge_field
from .processes import GaussianProcessModel, chol_with_jitter
from .scorenet import Checkpoint, ScoreNet

SOURCE_NCS = "ncs"
SOURCE_EXACT = "exact_gaussian"


def simulate_eval_fields(model, rng: RngStream, count: int) -> tuple[np.ndarray, Scale]:
    """Unconditional fields on the evaluation scale (Gumbel for Brown-Resnick)."""
    arr = model.simulate(rng, count)
    if model.kind == "brown_resnick":
        return np.log(arr), Scale.GUMBEL
    return arr, Scale.RAW


# ---------------------------------------------------------------------------
# Conditional samplers
# ---------------------------------------------------------------------------


class ExactGaussianSampler:
    """Draws from the kriging conditional law; the validation oracle."""

    tag = SOURCE_EXACT

    def __init__(self, model: GaussianProcessModel):
        self.model = model

    def sample(self, obs: Field, mask: Mask, count: int, rng: RngStream) -> np.ndarray:
        cond = self.model.exact_conditional(obs, mask)
        if cond.dim == 0:
            return np.zeros((count, 0))
        chol = chol_with_jitter(cond.cov)
        z = rng.generator().standard_normal((count, cond.dim))
        return cond.mean + z @ chol.T


class DiffusionSampler:
    """Runs the reverse chain with a trained network (or any score function)."""

    tag = SOURCE_NCS

    def __init__(self, score, sched: Schedule, theta: float | None = None,
                 final_step_noise: bool = True, chunk: int = 256):
        self.score = score
        self.sched = sched
        self.theta = theta
        self.final_step_noise = final_step_noise
        self.chunk = chunk

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, sched: Schedule,
                        eval_dtype=np.float32, **kw) -> "DiffusionSampler":
        """Sampling evaluates the network in float32 by default: scores are
        O(1) and the chain noise dominates any 1e-7 rounding, while the
        matmuls and activations run about twice as fast."""
        if ckpt.schedule_fingerprint != sched.fingerprint():
            raise ConfigError("checkpoint was trained on a different schedule")
        return cls(ScoreNet(ckpt.config, ckpt.params, dtype=eval_dtype), sched, **kw)

    @property
    def supports_hetero(self) -> bool:
        return hasattr(self.score, "raw_scores")

    def sample(self, obs: Field, mask: Mask, count: int, rng: RngStream) -> np.ndarray:
        from .diffusion import reverse_conditional_paths
        ui = mask.unobserved_idx
        out = np.empty((count, ui.size))
        for i, lo in enumerate(range(0, count, self.chunk)):
            hi = min(lo + self.chunk, count)
            paths = reverse_conditional_paths(
                obs, mask, self.theta, self.sched, self.score, rng.child(i),
                count=hi - lo, final_step_noise=self.final_step_noise)
            out[lo:hi] = paths[:, ui]
        return out

    def sample_hetero(self, obs_values: np.ndarray, mask_bits: np.ndarray,
                      rng: RngStream) -> np.ndarray:
        """One completion per row, each row with its own mask; returns merged fields."""
        rows = obs_values.shape[0]
        net = self.score
        theta = None if self.theta is None else np.full(rows, self.theta)

        def batch_score(x, bits, th, t):
            scores, _ = net.raw_scores(x, bits.astype(np.float64),
                                       None if th is None else th,
                                       np.full(x.shape[0], t, dtype=np.int64))
            return scores

        out = np.empty_like(obs_values)
        for i, lo in enumerate(range(0, rows, self.chunk)):
            hi = min(lo + self.chunk, rows)
            th = None if theta is None else theta[lo:hi]
            out[lo:hi] = reverse_conditional_paths_hetero(
                obs_values[lo:hi], mask_bits[lo:hi], th, self.sched, batch_score,
                rng.child(i), final_step_noise=self.final_step_noise)
        return out


# ---------------------------------------------------------------------------
# Evaluation datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CondEvalSet:
    """One partially observed reference field and m conditional completions."""

    grid: GridSpec
    reference: Field
    mask: Mask
    completions: np.ndarray  # (m, n_unobserved)
    source: str
    config: dict

    def __post_init__(self):
        if self.completions.ndim != 2 or \
                self.completions.shape[1] != self.mask.unobserved_idx.size:
            raise ConfigError("completions must have shape (m, |unobserved|)")

    @property
    def m(self) -> int:
        return self.completions.shape[0]


@dataclass(frozen=True, eq=False)
class UncondEvalSet:
    """Merged (observation + completion) fields paired with true fields."""

    grid: GridSpec
    merged: np.ndarray   # (m, n)
    true: np.ndarray     # (m, n)
    masks: np.ndarray    # (m, n) uint8
    scale: Scale
    config: dict

    def __post_init__(self):
        if self.merged.shape != self.true.shape or self.merged.shape != self.masks.shape:
            raise ConfigError("merged/true/mask arrays must share shape (m, n)")

    @property
    def m(self) -> int:
        return self.merged.shape[0]


def build_cond_eval(sampler, model, mask_source, m: int, rng: RngStream,
                    config: dict | None = None) -> CondEvalSet:
    """One reference field, one mask, m completions from the given sampler."""
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    fields, scale = simulate_eval_fields(model, rng.child(0), 1)
    reference = Field(fields[0], scale)
    mask = mask_source(rng.child(1)) if callable(mask_source) else mask_source
    completions = sampler.sample(reference, mask, m, rng.child(2))
    cfg = dict(config or {})
    cfg.setdefault("m", m)
    cfg.setdefault("source", sampler.tag)
    return CondEvalSet(model.grid, reference, mask, completions, sampler.tag, cfg)


def build_uncond_eval(sampler, model, mask_law, m: int, rng: RngStream,
                      config: dict | None = None) -> UncondEvalSet:
    """Fresh field + fresh mask + one completion per replicate, merged,
    paired with m independently drawn true fields."""
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    g = model.grid
    fields, scale = simulate_eval_fields(model, rng.child(0), m)
    true_fields, _ = simulate_eval_fields(model, rng.child(1), m)
    bits = np.empty((m, g.n), dtype=np.uint8)
    for i in range(m):
        bits[i] = mask_law(rng.child(100 + i)).bits

    if getattr(sampler, "supports_hetero", False):
        merged = sampler.sample_hetero(np.where(bits == 1, fields, 0.0), bits,
                                       rng.child(2))
    else:
        merged = np.empty_like(fields)
        for i in range(m):
            mask = Mask(bits[i])
            ref = Field(fields[i], scale)
            comp = sampler.sample(ref, mask, 1, rng.child(3).child(i))[0]
            merged[i] = merge_field(mask, ref.values[mask.observed_idx], comp,
                                    scale).values
    cfg = dict(config or {})
    cfg.setdefault("m", m)
    cfg.setdefault("source", sampler.tag)
    return UncondEvalSet(g, merged, true_fields, bits, scale, cfg)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _uniform_ranks(fields: np.ndarray) -> np.ndarray:
    """Columnwise ranks mapped to (0, 1); ties broken by index (values are
    continuous so ties have measure zero)."""
    m = fields.shape[0]
    order = np.argsort(fields, axis=0, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(1, m + 1)[:, None]
    np.put_along_axis(ranks, order, np.broadcast_to(rows, fields.shape), axis=0)
    return ranks / (m + 1.0)


def default_distance_bins(g: GridSpec, bins: int = 30) -> np.ndarray:
    """Equal-width bin edges from 0 to half the domain diagonal."""
    half_diag = 0.5 * np.sqrt(2.0) * (g.upper - g.lower)
    return np.linspace(0.0, half_diag, bins + 1)


def extremal_correlation(fields: np.ndarray, g: GridSpec,
                         bin_edges: np.ndarray | int = 30,
                         config: dict | None = None) -> list[dict]:
    """Binned extremal correlation chi(h) = 2 - zeta(h), F-madogram estimator.

    The madogram nu = E|F(Z(s)) - F(Z(s'))| / 2 is estimated from ranks,
    pooled over all pixel pairs falling in each distance bin, then mapped
    through zeta = (1 + 2 nu) / (1 - 2 nu). Rank-based, so the result is
    invariant under any common strictly increasing marginal transform.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 2 or fields.shape[0] < 2:
        raise ConfigError("need at least two fields with shape (m, n)")
    if fields.shape[1] != g.n:
        raise ConfigError("fields do not match the grid size")
    if isinstance(bin_edges, (int, np.integer)):
        bin_edges = default_distance_bins(g, int(bin_edges))
    ranks = _uniform_ranks(fields)
    loc = g.locations
    ii, jj = np.triu_indices(g.n)
    d = np.sqrt(((loc[ii] - loc[jj]) ** 2).sum(axis=1))
    which = np.digitize(d, bin_edges) - 1
    cfg = dict(config or {})
    cfg.setdefault("m", fields.shape[0])
    rows = []
    for b in range(len(bin_edges) - 1):
        sel = np.flatnonzero(which == b)
        if sel.size == 0:
            warnings.warn(f"distance bin [{bin_edges[b]:.3g}, {bin_edges[b + 1]:.3g}) "
                          "contains no pixel pairs; omitted")
            continue
        nu = 0.0
        for lo in range(0, sel.size, 4096):
            part = sel[lo:lo + 4096]
            nu += np.abs(ranks[:, ii[part]] - ranks[:, jj[part]]).sum()
        nu /= 2.0 * fields.shape[0] * sel.size
        zeta = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu)
        chi = float(np.clip(2.0 - zeta, 0.0, 1.0))
        rows.append({"h_lo": bin_edges[b], "h_hi": bin_edges[b + 1],
                     "h_mean": float(d[sel].mean()), "chi": chi,
                     "n_pairs": int(sel.size), **cfg})
    return rows


def scott_bandwidth(samples: np.ndarray, dims: int) -> np.ndarray:
    """Per-axis Scott's-rule bandwidth: std * m^(-1/(d+4))."""
    samples = np.atleast_2d(samples.T).T
    m = samples.shape[0]
    if m < 2:
        raise ConfigError("kernel density estimation needs at least 2 samples")
    std = samples.std(axis=0, ddof=1)
    if np.any(std == 0.0):
        raise ConfigError("zero sample standard deviation; KDE undefined")
    return std * m ** (-1.0 / (dims + 4))


def kde_1d(samples: np.ndarray, xs: np.ndarray | None = None,
           gridsize: int = 256, pad: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density on a grid; bandwidth by Scott's rule."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    bw = float(scott_bandwidth(samples, 1)[0])
    if xs is None:
        lo, hi = samples.min() - pad * bw, samples.max() + pad * bw
        xs = np.linspace(lo, hi, gridsize)
    z = (xs[:, None] - samples[None, :]) / bw
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (samples.size * bw * np.sqrt(2 * np.pi))
    return xs, dens


def kde_2d(samples: np.ndarray, gridsize: int = 64,
           quantile_box: tuple[float, float] = (0.01, 0.99)):
    """Product-kernel 2-d density over the samples' quantile box."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ConfigError("2-d KDE expects samples with shape (m, 2)")
    bw = scott_bandwidth(samples, 2)
    lo = np.quantile(samples, quantile_box[0], axis=0)
    hi = np.quantile(samples, quantile_box[1], axis=0)
    xs = np.linspace(lo[0], hi[0], gridsize)
    ys = np.linspace(lo[1], hi[1], gridsize)
    zx = (xs[:, None] - samples[None, :, 0]) / bw[0]
    zy = (ys[:, None] - samples[None, :, 1]) / bw[1]
    kx = np.exp(-0.5 * zx * zx)
    ky = np.exp(-0.5 * zy * zy)
    dens = (kx[:, None, :] * ky[None, :, :]).mean(axis=2) / (2 * np.pi * bw[0] * bw[1])
    return xs, ys, dens.T  # dens[y, x]


FIELD_STATS = ("min", "max", "abs_sum")


def field_statistics(fields: np.ndarray) -> dict[str, np.ndarray]:
    """Spatial minimum, maximum, and absolute sum of each field."""
    fields = np.asarray(fields, dtype=np.float64)
    return {"min": fields.min(axis=1), "max": fields.max(axis=1),
            "abs_sum": np.abs(fields).sum(axis=1)}


def summary_distributions(fields: np.ndarray, gridsize: int = 256,
                          config: dict | None = None) -> list[dict]:
    """Empirical CDF and KDE rows for min/max/abs-sum of each field."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 2 or fields.shape[0] < 2:
        raise ConfigError("need at least two fields with shape (m, n)")
    cfg = dict(config or {})
    cfg.setdefault("m", fields.shape[0])
    rows = []
    for stat, vals in field_statistics(fields).items():
        if vals.std(ddof=1) == 0.0:
            warnings.warn(f"summary statistic {stat!r} is constant; KDE skipped")
            continue
        xs, dens = kde_1d(vals, gridsize=gridsize)
        sorted_vals = np.sort(vals)
        ecdf = np.searchsorted(sorted_vals, xs, side="right") / vals.size
        for x, e, dn in zip(xs, ecdf, dens):
            rows.append({"stat": stat, "x": float(x), "ecdf": float(e),
                         "density": float(dn), **cfg})
    return rows


def conditional_mean_field(ces: CondEvalSet) -> np.ndarray:
    """Pixelwise mean of the completions; observed pixels are NaN-masked."""
    out = np.full(ces.grid.n, np.nan)
    out[ces.mask.unobserved_idx] = ces.completions.mean(axis=0)
    return out


def pcc_heatmap(ces: CondEvalSet, anchor: int) -> np.ndarray:
    """Pearson correlation of every unobserved pixel with the anchor pixel."""
    ui = ces.mask.unobserved_idx
    pos = np.flatnonzero(ui == anchor)
    if pos.size == 0:
        raise ConfigError(f"anchor {anchor} is not an unobserved pixel")
    if ces.m < 3:
        raise ConfigError("Pearson correlations need at least 3 completions")
    comp = ces.completions
    centered = comp - comp.mean(axis=0)
    sd = centered.std(axis=0, ddof=1)
    a = int(pos[0])
    if sd[a] == 0.0:
        raise ConfigError("anchor pixel has zero variance across completions")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (centered * centered[:, [a]]).sum(axis=0) / \
            ((ces.m - 1) * sd * sd[a])
    corr[a] = 1.0
    out = np.full(ces.grid.n, np.nan)
    out[ui] = corr
    return out


def ks_statistic_normal(x: np.ndarray, mean: float, std: float) -> float:
    """One-sample Kolmogorov-Smirnov statistic against N(mean, std^2)."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    n = xs.size
    cdf = ndtr((xs - mean) / std)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max(np.abs(cdf - hi).max(), np.abs(cdf - lo).max()))


def ks_statistic_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


@dataclass(frozen=True)
class TwoSampleResult:
    ks_per_pixel: np.ndarray
    energy: float


def _pairwise_distances(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix via the Gram identity (no (m, m, n) tensor)."""
    sq = (np.einsum("ij,ij->i", u, u)[:, None]
          + np.einsum("ij,ij->i", v, v)[None, :] - 2.0 * (u @ v.T))
    return np.sqrt(np.clip(sq, 0.0, None))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Szekely-Rizzo energy distance between two samples of field vectors."""
    return float(2.0 * _pairwise_distances(a, b).mean()
                 - _pairwise_distances(a, a).mean()
                 - _pairwise_distances(b, b).mean())


def two_sample_distances(a: np.ndarray, b: np.ndarray) -> TwoSampleResult:
    """Per-pixel KS statistics plus the pooled energy distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError("need two nonempty sets on the same grid")
    ks = np.array([ks_statistic_two_sample(a[:, j], b[:, j])
                   for j in range(a.shape[1])])
    return TwoSampleResult(ks, energy_distance(a, b))


def energy_permutation_null(a: np.ndarray, b: np.ndarray, n_perm: int,
                            rng: RngStream):
    """Observed energy distance and its permutation null distribution.

    Precomputes the pooled pairwise-distance matrix once, then resplits.
    """
    pooled = np.vstack([a, b])
    n_tot, na = pooled.shape[0], a.shape[0]
    dmat = _pairwise_distances(pooled, pooled)

    def energy_for(idx_a, idx_b):
        cross = dmat[np.ix_(idx_a, idx_b)].mean()
        within_a = dmat[np.ix_(idx_a, idx_a)].mean()
        within_b = dmat[np.ix_(idx_b, idx_b)].mean()
        return 2.0 * cross - within_a - within_b

    all_idx = np.arange(n_tot)
    observed = energy_for(all_idx[:na], all_idx[na:])
    gen = rng.generator()
    null = np.empty(n_perm)
    for k in range(n_perm):
        perm = gen.permutation(n_tot)
        null[k] = energy_for(perm[:na], perm[na:])
    return observed, null


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


@dataclass
class SummaryReport:
    """Named tables plus the manifest data that ties them to a run."""

    tables: dict[str, list[dict]] = dc_field(default_factory=dict)
    manifest: dict = dc_field(default_factory=dict)

    def add(self, name: str, rows: list[dict]) -> None:
        self.tables[name] = rows

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.tables):
            path = out_dir / f"{name}.csv"
            write_table(path, self.tables[name])
            written.append(path)
        manifest = dict(self.manifest)
        manifest["tables"] = [p.name for p in written]
        mpath = out_dir / "manifest.json"
        mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        written.append(mpath)
        return written


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path: str | Path, rows: list[dict]) -> None:
    """CSV with a one-line schema header; deterministic formatting."""
    if not rows:
        Path(path).write_text("")
        return
    columns = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in columns])


def field_table_rows(g: GridSpec, values: np.ndarray, mask: Mask | None = None,
                     config: dict | None = None) -> list[dict]:
    """(index, row, col, value, observed) rows; NaN-masked pixels stay NaN."""
    cfg = dict(config or {})
    rows = []
    bits = mask.bits if mask is not None else np.zeros(g.n, dtype=np.uint8)
    for i in range(g.n):
        rows.append({"index": i, "row": i // g.side, "col": i % g.side,
                     "value": float(values[i]), "observed": int(bits[i]), **cfg})
    return rows
