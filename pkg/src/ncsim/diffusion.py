"""Variance-preserving noise schedule, forward kernel, reverse sampler, loss.

The continuous SDEs only ever appear through their discretizations:

* forward single step:  x_{t+1} = sqrt(1 - beta_{t+1}) x_t + sqrt(beta_{t+1}) eps
* direct kernel:        x_t | x_0 ~ N(sqrt(abar_t) x_0, (1 - abar_t) I)
* reverse step:         x_{t-1} = (1 - beta_t)^{-1/2} (x_t + beta_t * score) + sqrt(beta_t) eps

with abar_t = prod_{s=1..t} (1 - beta_s). Only unobserved coordinates are
diffused; observed entries are pinned to their data values throughout.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import ConfigError, ContractViolationError, DivergenceError
from .grid import Field, Mask, RngStream, Scale, merge_field

# A score function maps (assembled field(s), mask, optional theta, step t) to
# full-length score values that are exactly zero at observed indices. Inputs
# of shape (n,) or (batch, n) must be supported, with matching output shape.
ScoreFunction = Callable[[np.ndarray, Mask, Optional[float], int], np.ndarray]


@dataclass(frozen=True)
class Schedule:
    """Discretized VPSDE noise schedule, arrays indexed 0..T."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConfigError("schedule needs betas for steps 0..T with T >= 1")
        if beta.min() <= 0.0 or beta.max() >= 1.0:
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ConfigError("betas must be nondecreasing")
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.empty_like(beta)
        alpha_bar[0] = 1.0
        alpha_bar[1:] = np.cumprod(alpha[1:])
        alpha.flags.writeable = False
        alpha_bar.flags.writeable = False
        sigma_bar = np.sqrt(1.0 - alpha_bar)
        sigma_bar.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma_bar", sigma_bar)

    @property
    def horizon(self) -> int:
        """T: the number of diffusion steps."""
        return self.beta.size - 1

    def weight(self, t) -> np.ndarray:
        """Loss weighting lambda(t) = 1 - alpha_bar_t."""
        return 1.0 - self.alpha_bar[t]

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.beta.tobytes()).hexdigest()
        return f"T{self.horizon}-{digest[:16]}"


def build_schedule(horizon: int, beta0: float, betaT: float) -> Schedule:
    """Linear beta schedule: beta_t = beta0 + (betaT - beta0) * t / T."""
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    if not (0.0 < beta0 <= betaT < 1.0):
        raise ConfigError(f"need 0 < beta0 <= betaT < 1, got ({beta0}, {betaT})")
    t = np.arange(horizon + 1, dtype=np.float64)
    return Schedule(beta0 + (betaT - beta0) * (t / horizon))


def forward_transition_sample(x0_unobs: np.ndarray, t: int, sched: Schedule,
                              rng: RngStream) -> np.ndarray:
    """Sample from the direct kernel: sqrt(abar_t) x_0 + sigma_bar_t * eps."""
    if not 1 <= t <= sched.horizon:
        raise ConfigError(f"step {t} outside [1, {sched.horizon}]")
    x0_unobs = np.asarray(x0_unobs, dtype=np.float64)
    eps = rng.generator().standard_normal(x0_unobs.shape)
    return np.sqrt(sched.alpha_bar[t]) * x0_unobs + sched.sigma_bar[t] * eps


def forward_single_step(x_prev: np.ndarray, t: int, sched: Schedule,
                        rng: RngStream) -> np.ndarray:
    """One forward Euler-Maruyama step from x_{t-1} to x_t."""
    if not 1 <= t <= sched.horizon:
        raise ConfigError(f"step {t} outside [1, {sched.horizon}]")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = rng.generator().standard_normal(x_prev.shape)
    b = sched.beta[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


def _reverse_engine(full: np.ndarray, unobs: np.ndarray, sched: Schedule,
                    batch_score, gen: np.random.Generator,
                    final_step_noise: bool) -> None:
    """Shared reverse-chain loop over rows of ``full`` (modified in place).

    ``unobs`` is a float (rows, n) indicator of unobserved entries;
    ``batch_score(x, t)`` must return (rows, n) scores, zero at observed.
    """
    obs = unobs == 0.0
    full[:, :] = np.where(obs, full, gen.standard_normal(full.shape))
    for t in range(sched.horizon, 0, -1):
        s = np.asarray(batch_score(full, t), dtype=np.float64)
        if s.shape != full.shape:
            raise ContractViolationError(
                f"score returned shape {s.shape}, expected {full.shape}")
        if np.any(s[obs] != 0.0):
            raise ContractViolationError(
                f"score is nonzero at an observed index at step {t}")
        b = sched.beta[t]
        x = (full + b * s) / np.sqrt(1.0 - b)
        if t > 1 or final_step_noise:
            x += np.sqrt(b) * gen.standard_normal(full.shape) * unobs
        if not np.all(np.isfinite(x[~obs])):
            raise DivergenceError(f"non-finite state in reverse chain at step {t}",
                                  step=t)
        full[:, :] = np.where(obs, full, x)


def reverse_conditional_paths(obs: Field, mask: Mask, theta: float | None,
                              sched: Schedule, score: ScoreFunction,
                              rng: RngStream, count: int = 1,
                              final_step_noise: bool = True) -> np.ndarray:
    """Run ``count`` independent reverse chains; returns (count, n) fields.

    Observed entries of the assembled field equal the data at every step,
    bit-exactly. The chain starts from a standard normal on the unobserved
    coordinates and applies the discretized reverse update for t = T..1;
    ``final_step_noise=False`` suppresses the added noise at t = 1.
    """
    if obs.n != mask.n:
        raise ConfigError(f"field length {obs.n} != mask length {mask.n}")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    full = np.tile(obs.values, (count, 1))
    if mask.unobserved_idx.size == 0:
        return full  # fully observed: nothing to simulate
    unobs = np.tile((1.0 - mask.bits).astype(np.float64), (count, 1))
    _reverse_engine(full, unobs, sched,
                    lambda x, t: score(x, mask, theta, t),
                    rng.generator(), final_step_noise)
    return full


def reverse_conditional_paths_hetero(obs_values: np.ndarray, mask_bits: np.ndarray,
                                     theta: np.ndarray | None, sched: Schedule,
                                     batch_score, rng: RngStream,
                                     final_step_noise: bool = True) -> np.ndarray:
    """Reverse chains with a different mask (and optional theta) per row.

    ``batch_score(x, bits, theta, t)`` must return per-row scores; used by
    evaluation-dataset builders where every replicate conditions on its own
    observation pattern.
    """
    obs_values = np.asarray(obs_values, dtype=np.float64)
    if obs_values.shape != mask_bits.shape:
        raise ConfigError("observations and mask bits must share shape (rows, n)")
    full = obs_values.copy()
    unobs = (1.0 - mask_bits).astype(np.float64)
    _reverse_engine(full, unobs, sched,
                    lambda x, t: batch_score(x, mask_bits, theta, t),
                    rng.generator(), final_step_noise)
    return full


def reverse_conditional_sample(obs: Field, mask: Mask, theta: float | None,
                               sched: Schedule, score: ScoreFunction,
                               rng: RngStream, final_step_noise: bool = True,
                               scale: Scale | None = None) -> Field:
    """One conditional draw assembled back into a full Field."""
    paths = reverse_conditional_paths(obs, mask, theta, sched, score, rng,
                                      count=1, final_step_noise=final_step_noise)
    out_scale = obs.scale if scale is None else scale
    return merge_field(mask, obs.values[mask.observed_idx],
                       paths[0, mask.unobserved_idx], out_scale)


@dataclass(frozen=True)
class TrainingBatch:
    """On-the-fly training examples for the masked denoising loss.

    ``x_t`` holds assembled fields (observed entries at their data values,
    unobserved entries diffused to step ``t``); ``eps`` holds the noise used
    by the forward kernel, zero at observed indices.
    """

    x_t: np.ndarray       # (B, n)
    mask_bits: np.ndarray  # (B, n) uint8
    t: np.ndarray          # (B,) int
    eps: np.ndarray        # (B, n)
    theta: np.ndarray | None = None  # (B,) or None

    def __post_init__(self):
        if self.x_t.ndim != 2 or self.x_t.shape != self.eps.shape \
                or self.x_t.shape != self.mask_bits.shape:
            raise ConfigError("batch arrays must share shape (B, n)")
        if self.t.shape != (self.x_t.shape[0],):
            raise ConfigError("t must have one entry per batch element")

    @property
    def size(self) -> int:
        return self.x_t.shape[0]


def dsm_target(batch: TrainingBatch, sched: Schedule) -> np.ndarray:
    """Transition-kernel score target -eps / sigma_bar_t (zero at observed)."""
    sig = sched.sigma_bar[batch.t][:, None]
    return -batch.eps / sig


def dsm_loss_terms(scores: np.ndarray, batch: TrainingBatch,
                   sched: Schedule) -> np.ndarray:
    """Per-sample weighted losses ||sigma_bar_t * s + eps||^2 over unobserved.

    Algebraically identical to lambda(t) ||s - (-eps/sigma_bar_t)||^2 with
    lambda(t) = 1 - alpha_bar_t; this form avoids the 1/sigma division.
    """
    if np.any(batch.t < 1) or np.any(batch.t > sched.horizon):
        raise ConfigError("all steps must lie in [1, T]; t = 0 has no noise target")
    sig = sched.sigma_bar[batch.t][:, None]
    resid = (sig * scores + batch.eps) * (1 - batch.mask_bits)
    return np.einsum("bi,bi->b", resid, resid)


def batch_scores(batch: TrainingBatch, score: ScoreFunction) -> np.ndarray:
    """Evaluate a score function on every batch element.

    Score objects may expose ``scores_for_batch(batch)`` to vectorize over
    heterogeneous masks/steps (the neural network does); plain callables are
    evaluated row by row.
    """
    hook = getattr(score, "scores_for_batch", None)
    if hook is not None:
        return np.asarray(hook(batch), dtype=np.float64)
    thetas = batch.theta
    scores = np.empty_like(batch.x_t)
    for r in range(batch.size):
        theta_r = None if thetas is None else float(thetas[r])
        scores[r] = score(batch.x_t[r], Mask(batch.mask_bits[r]), theta_r,
                          int(batch.t[r]))
    return scores


def dsm_loss(batch: TrainingBatch, score: ScoreFunction, sched: Schedule) -> float:
    """Batch-mean masked denoising score-matching loss."""
    return float(dsm_loss_terms(batch_scores(batch, score), batch, sched).mean())
