"""On-the-fly training-data generation and the score-network training loop.

Every outer "draw" simulates a fresh dataset (fields, masks, timesteps,
noise), then runs a fixed number of epochs of minibatch Adam on it. Fresh
data per draw keeps the network from overfitting any finite dataset and
needs no storage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import Schedule, TrainingBatch, dsm_loss_terms
from .errors import ConfigError, DivergenceError
from .grid import GridSpec, RngStream
from .processes import (BRParams, BrownResnickModel, GaussianProcessModel,
                        GPParams, StoppingConfig)
from .scorenet import Checkpoint, ModelParams, NetConfig, ScoreNet, init_params

AMORTIZATION_MODES = ("fixed", "proportion", "parameter", "small_set")


@dataclass(frozen=True)
class Counts:
    """Per-draw dataset sizes: r mask-law draws, p parameter draws, s fields
    per parameter, m (mask, timestep) pairs per field."""

    r: int = 1
    p: int = 1
    s: int = 1
    m: int = 1

    def __post_init__(self):
        if min(self.r, self.p, self.s, self.m) < 1:
            raise ConfigError("all counts must be positive")


@dataclass(frozen=True)
class TrainSpec:
    """Everything the training loop needs besides the architecture."""

    grid: GridSpec
    process_kind: str               # "gaussian" | "brown_resnick"
    base_params: tuple[float, float]  # (length_scale, variance) or (range, smoothness)
    mode: str                       # amortization mode
    counts: Counts
    val_counts: Counts
    draws: int
    epochs: int
    batch_size: int
    learning_rate: float = 1e-3
    seed: int = 0
    rho: float = 0.05               # fixed observation proportion
    rho_range: tuple[float, float] = (0.01, 0.525)
    theta_range: tuple[float, float] = (0.5, 5.5)
    obs_range: tuple[int, int] = (1, 10)
    lr_patience: int = 5
    lr_decay: float = 0.5
    min_lr: float = 1e-5
    stopping: StoppingConfig | None = None
    precision: str = "float64"  # float32 roughly halves the wall time per step

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.mode not in AMORTIZATION_MODES:
            raise ConfigError(f"unknown amortization mode {self.mode!r}")
        if self.process_kind not in ("gaussian", "brown_resnick"):
            raise ConfigError(f"unknown process kind {self.process_kind!r}")
        if self.draws < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("draws must be >= 0, epochs and batch_size >= 1")
        if self.mode == "proportion" and not self.rho_range[0] < self.rho_range[1]:
            raise ConfigError("rho_range must be a nonempty interval")
        if self.mode == "parameter" and not self.theta_range[0] < self.theta_range[1]:
            raise ConfigError("theta_range must be a nonempty interval")
        if self.mode == "small_set":
            lo, hi = self.obs_range
            if not (1 <= lo <= hi <= self.grid.n):
                raise ConfigError(f"obs_range {self.obs_range} invalid for n={self.grid.n}")


def make_process_model(kind: str, grid: GridSpec, theta1: float, theta2: float,
                       stopping: StoppingConfig | None = None):
    if kind == "gaussian":
        return GaussianProcessModel(grid, GPParams(theta1, theta2))
    if kind == "brown_resnick":
        return BrownResnickModel(grid, BRParams(theta1, theta2), stopping)
    raise ConfigError(f"unknown process kind {kind!r}")


def _simulate_training_fields(model, rng: RngStream, count: int) -> np.ndarray:
    """Unconditional fields on the training scale (Gumbel for Brown-Resnick)."""
    fields = model.simulate(rng, count)
    if model.kind == "brown_resnick":
        fields = np.log(fields)
    return fields


def generate_training_batch(spec: TrainSpec, sched: Schedule, rng: RngStream,
                            counts: Counts | None = None) -> TrainingBatch:
    """One draw's dataset of {assembled field, mask, theta, t, eps} samples.

    Proportion mode resamples the Bernoulli probability per group, parameter
    mode resamples theta1 (the mask channel is then theta1-scaled downstream),
    and small-set mode sweeps fixed observation counts; timesteps are uniform
    on {1, ..., T}.
    """
    counts = counts or spec.counts
    n = spec.grid.n
    gen = rng.generator()

    groups: list[tuple[float | None, np.ndarray, str, float | int]] = []
    if spec.mode == "small_set":
        lo, hi = spec.obs_range
        for k in range(lo, hi + 1):
            model = make_process_model(spec.process_kind, spec.grid,
                                       *spec.base_params, spec.stopping)
            fields = _simulate_training_fields(model, rng.child(10_000 + k), counts.s)
            groups.append((None, fields, "count", k))
    else:
        for i in range(counts.r):
            if spec.mode == "proportion":
                rho_i = float(gen.uniform(*spec.rho_range))
            else:
                rho_i = spec.rho
            for j in range(counts.p):
                if spec.mode == "parameter":
                    theta1 = float(gen.uniform(*spec.theta_range))
                else:
                    theta1 = spec.base_params[0]
                model = make_process_model(spec.process_kind, spec.grid, theta1,
                                           spec.base_params[1], spec.stopping)
                fields = _simulate_training_fields(
                    model, rng.child(i * counts.p + j), counts.s)
                theta_out = theta1 if spec.mode == "parameter" else None
                groups.append((theta_out, fields, "bernoulli", rho_i))

    total = sum(f.shape[0] * counts.m for _, f, _, _ in groups)
    x_t = np.empty((total, n))
    mask_bits = np.empty((total, n), dtype=np.uint8)
    eps = np.zeros((total, n))
    t_steps = np.empty(total, dtype=np.int64)
    thetas = np.empty(total) if spec.mode == "parameter" else None

    row = 0
    for theta1, fields, law, law_arg in groups:
        for x0 in fields:
            stop = row + counts.m
            if law == "bernoulli":
                bits = (gen.random((counts.m, n)) < law_arg).astype(np.uint8)
            else:
                bits = np.zeros((counts.m, n), dtype=np.uint8)
                for b in range(counts.m):
                    bits[b, gen.choice(n, size=law_arg, replace=False)] = 1
            ts = gen.integers(1, sched.horizon + 1, size=counts.m)
            noise = gen.standard_normal((counts.m, n)) * (1 - bits)
            a_bar = sched.alpha_bar[ts][:, None]
            sig = sched.sigma_bar[ts][:, None]
            diffused = np.sqrt(a_bar) * x0 + sig * noise
            x_t[row:stop] = np.where(bits == 1, x0, diffused)
            mask_bits[row:stop] = bits
            eps[row:stop] = noise
            t_steps[row:stop] = ts
            if thetas is not None:
                thetas[row:stop] = theta1
            row = stop
    return TrainingBatch(x_t, mask_bits, t_steps, eps, thetas)


def subset_batch(batch: TrainingBatch, idx: np.ndarray) -> TrainingBatch:
    theta = None if batch.theta is None else batch.theta[idx]
    return TrainingBatch(batch.x_t[idx], batch.mask_bits[idx], batch.t[idx],
                         batch.eps[idx], theta)


def evaluate_loss(net: ScoreNet, batch: TrainingBatch, sched: Schedule,
                  chunk: int = 512) -> float:
    """Forward-only mean DSM loss, evaluated in bounded-memory chunks."""
    total = 0.0
    for lo in range(0, batch.size, chunk):
        sub = subset_batch(batch, np.arange(lo, min(lo + chunk, batch.size)))
        scores = net.scores_for_batch(sub)
        total += float(dsm_loss_terms(scores, sub, sched).sum())
    return total / batch.size


class Adam:
    """Bias-corrected first-order optimizer over the flat parameter vector."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, flat: np.ndarray, grad: np.ndarray, lr: float,
               trainable: np.ndarray) -> None:
        g = np.where(trainable, grad, 0.0)
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        flat -= lr * mhat / (np.sqrt(vhat) + self.eps)


def zero_score_baseline(spec: TrainSpec) -> float:
    """Expected DSM loss of the identically-zero score: E|unobserved set|.

    With zero output each sample contributes ||eps||^2 over its unobserved
    entries, whose expectation is the unobserved count.
    """
    n = spec.grid.n
    if spec.mode == "proportion":
        rho = 0.5 * (spec.rho_range[0] + spec.rho_range[1])
    elif spec.mode == "small_set":
        return n - 0.5 * (spec.obs_range[0] + spec.obs_range[1])
    else:
        rho = spec.rho
    return n * (1.0 - rho)


def train(spec: TrainSpec, cfg: NetConfig, sched: Schedule,
          rng: RngStream | None = None, curve_path: str | Path | None = None,
          resume: Checkpoint | None = None, log=None) -> Checkpoint:
    """Run ``spec.draws`` data draws of ``spec.epochs`` epochs each.

    Returns a checkpoint carrying the parameters, optimizer state, schedule
    fingerprint, and training metadata. With ``resume`` given and zero draws
    the input checkpoint is returned unchanged (a no-op resume).
    """
    if cfg.grid_side != spec.grid.side:
        raise ConfigError(f"network grid side {cfg.grid_side} != grid {spec.grid.side}")
    if cfg.time_horizon != sched.horizon:
        raise ConfigError("network time_horizon must match the schedule horizon")
    needs_theta = spec.mode == "parameter"
    if needs_theta != (cfg.conditioning == "theta_scaled_mask"):
        raise ConfigError("parameter mode requires theta_scaled_mask conditioning "
                          "(and only parameter mode may use it)")

    rng = rng if rng is not None else RngStream(spec.seed)
    if resume is not None:
        if resume.schedule_fingerprint != sched.fingerprint():
            raise ConfigError("resume checkpoint was trained on a different schedule")
        if resume.config != cfg:
            raise ConfigError("resume checkpoint has a different architecture")
        params = resume.params.copy()
        opt = Adam(params.flat.size)
        opt.m, opt.v = resume.opt_m.copy(), resume.opt_v.copy()
        opt.step = int(resume.train_meta["adam_step"])
        lr = float(resume.train_meta["learning_rate"])
        start_draw = int(resume.train_meta["draws_done"])
        samples_seen = int(resume.train_meta["samples_seen"])
    else:
        params = init_params(cfg, rng.child(0))
        opt = Adam(params.flat.size)
        lr = spec.learning_rate
        start_draw = 0
        samples_seen = 0

    dtype = np.float32 if spec.precision == "float32" else np.float64
    trainable = params.trainable_mask()
    curve: list[tuple[int, int, float, float]] = []
    best_val = np.inf
    stall = 0
    train_loss = val_loss = float("nan")

    for draw in range(start_draw, start_draw + spec.draws):
        drng = rng.child(1 + draw)
        data = generate_training_batch(spec, sched, drng.child(0))
        val_data = generate_training_batch(spec, sched, drng.child(1),
                                           counts=spec.val_counts)
        for epoch in range(spec.epochs):
            perm = drng.child(2 + epoch).generator().permutation(data.size)
            losses = []
            for lo in range(0, data.size, spec.batch_size):
                sub = subset_batch(data, perm[lo:lo + spec.batch_size])
                # float32 parameter snapshots go stale after each update, so
                # the compute net is rebuilt per step (float64 nets hold views)
                net = ScoreNet(cfg, params, dtype=dtype)
                try:
                    loss, grad = net.loss_and_gradient(sub, sched)
                except DivergenceError as exc:
                    raise DivergenceError(
                        f"training diverged at draw {draw}, epoch {epoch}: {exc}"
                    ) from exc
                opt.update(params.flat, grad, lr, trainable)
                losses.append(loss)
                samples_seen += sub.size
            train_loss = float(np.mean(losses))
            val_loss = evaluate_loss(ScoreNet(cfg, params, dtype=dtype), val_data,
                                     sched)
            curve.append((draw, epoch, train_loss, val_loss))
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                stall = 0
            else:
                stall += 1
                if stall >= spec.lr_patience:
                    lr = max(lr * spec.lr_decay, spec.min_lr)
                    stall = 0
        if log is not None:
            log(f"draw {draw + 1}/{start_draw + spec.draws}: "
                f"train={train_loss:.3f} val={val_loss:.3f} lr={lr:.2e}")

    if curve_path is not None:
        write_training_curve(curve_path, curve)

    if resume is not None and spec.draws == 0:
        meta = dict(resume.train_meta)
    else:
        meta = {
            "draws_done": start_draw + spec.draws,
            "epochs_per_draw": spec.epochs,
            "batch_size": spec.batch_size,
            "learning_rate": lr,
            "adam_step": opt.step,
            "samples_seen": samples_seen,
            "final_train_loss": train_loss,
            "final_val_loss": val_loss,
            "seed": spec.seed,
            "mode": spec.mode,
            "process_kind": spec.process_kind,
        }
    return Checkpoint(cfg, params, sched.fingerprint(), meta, opt.m, opt.v)


def write_training_curve(path: str | Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["draw", "epoch", "train_loss", "val_loss"])
        for draw, epoch, tr, vl in curve:
            writer.writerow([draw, epoch, repr(float(tr)), repr(float(vl))])
