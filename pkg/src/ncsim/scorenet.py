"""Trainable conditional score network: a small U-shaped conv encoder-decoder.

Two input channels (diffused state with observed entries frozen, and the mask
or theta-scaled mask), Gaussian Fourier time features injected additively
into every residual block, and a zero-initialized output head whose result is
multiplied by (1 - mask) so observed locations score exactly zero.

Parameters live in one flat float64 vector with a named layout table, which
keeps checkpointing, the optimizer, and finite-difference gradient checks
trivially exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .diffusion import Schedule, TrainingBatch, dsm_loss_terms
from .errors import ConfigError, DivergenceError, FormatError
from .grid import Mask

CONDITIONING_MODES = ("mask_only", "theta_scaled_mask")


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; ``depth`` counts down/up block pairs."""

    grid_side: int
    base_width: int = 16
    depth: int = 2
    fourier_features: int = 64
    conditioning: str = "mask_only"
    time_horizon: int = 1000
    in_channels: int = 2
    fourier_scale: float = 16.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.grid_side % (1 << self.depth) != 0:
            raise ConfigError(
                f"grid side {self.grid_side} not divisible by 2^{self.depth}")
        if self.base_width < 1 or self.fourier_features < 1:
            raise ConfigError("widths must be positive")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning mode {self.conditioning!r}")
        if self.in_channels != 2:
            raise ConfigError("the network takes exactly 2 input channels")
        if self.time_horizon < 1:
            raise ConfigError("time_horizon must be >= 1")

    @property
    def embed_dim(self) -> int:
        return 2 * self.fourier_features

    def width(self, level: int) -> int:
        return self.base_width << level


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]
    trainable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def net_layout(cfg: NetConfig) -> tuple[LayoutEntry, ...]:
    """Deterministic name -> slice table for the flat parameter vector."""
    f, e = cfg.fourier_features, cfg.embed_dim
    entries: list[tuple[str, tuple[int, ...], bool]] = [
        ("temb.freq", (f,), False),
        ("temb.l1.w", (e, 2 * f), True), ("temb.l1.b", (e,), True),
        ("temb.l2.w", (e, e), True), ("temb.l2.b", (e,), True),
        ("stem.w", (cfg.width(0), cfg.in_channels, 3, 3), True),
        ("stem.b", (cfg.width(0),), True),
    ]

    def resblock(name: str, width: int):
        entries.extend([
            (f"{name}.c1.w", (width, width, 3, 3), True),
            (f"{name}.c1.b", (width,), True),
            (f"{name}.emb.w", (width, e), True),
            (f"{name}.emb.b", (width,), True),
            (f"{name}.c2.w", (width, width, 3, 3), True),
            (f"{name}.c2.b", (width,), True),
        ])

    resblock("enc0", cfg.width(0))
    for i in range(1, cfg.depth + 1):
        entries.append((f"down{i}.w", (cfg.width(i), cfg.width(i - 1), 3, 3), True))
        entries.append((f"down{i}.b", (cfg.width(i),), True))
        resblock(f"enc{i}", cfg.width(i))
    for i in range(cfg.depth, 0, -1):
        entries.append(
            (f"up{i}.w", (cfg.width(i - 1), cfg.width(i) + cfg.width(i - 1), 3, 3), True))
        entries.append((f"up{i}.b", (cfg.width(i - 1),), True))
        resblock(f"dec{i - 1}", cfg.width(i - 1))
    entries.append(("head.w", (1, cfg.width(0), 3, 3), True))
    entries.append(("head.b", (1,), True))

    out, offset = [], 0
    for name, shape, trainable in entries:
        out.append(LayoutEntry(name, offset, shape, trainable))
        offset += int(np.prod(shape))
    return tuple(out)


@dataclass(eq=False)
class ModelParams:
    """Flat parameter vector plus its layout table."""

    flat: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        total = sum(e.size for e in self.layout)
        if self.flat.size != total:
            raise ConfigError(f"flat vector has {self.flat.size} entries, "
                              f"layout sums to {total}")
        if not np.all(np.isfinite(self.flat)):
            raise ConfigError("parameters must be finite")
        self._index = {e.name: e for e in self.layout}

    def view(self, name: str) -> np.ndarray:
        e = self._index[name]
        return self.flat[e.offset:e.offset + e.size].reshape(e.shape)

    def trainable_mask(self) -> np.ndarray:
        m = np.zeros(self.flat.size, dtype=bool)
        for e in self.layout:
            if e.trainable:
                m[e.offset:e.offset + e.size] = True
        return m

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.layout)


def init_params(cfg: NetConfig, rng) -> ModelParams:
    """Fan-in-scaled uniform init; zeroed head so the initial score is 0."""
    layout = net_layout(cfg)
    flat = np.zeros(sum(e.size for e in layout))
    params = ModelParams(flat, layout)
    gen = rng.generator()
    for e in layout:
        v = params.view(e.name)
        if e.name == "temb.freq":
            v[...] = gen.standard_normal(e.shape) * cfg.fourier_scale
        elif e.name.startswith("head."):
            v[...] = 0.0
        elif e.name.endswith(".w"):
            fan_in = int(np.prod(e.shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            v[...] = gen.uniform(-bound, bound, e.shape)
        else:  # bias: bound from the matching weight's fan-in
            w_shape = params._index[e.name[:-2] + ".w"].shape
            bound = 1.0 / np.sqrt(int(np.prod(w_shape[1:])))
            v[...] = gen.uniform(-bound, bound, e.shape)
    return params


class ScoreNet:
    """Callable score surrogate over a fixed (config, parameters) pair.

    Implements the ScoreFunction protocol: ``net(x_full, mask, theta1, t)``
    with x of shape (n,) or (batch, n). ``scores_for_batch`` handles
    heterogeneous masks/steps/thetas, and ``loss_and_gradient`` backpropagates
    the masked denoising loss through the whole network.
    """

    max_eval_batch = 512  # chunk size for cache-free evaluation

    def __init__(self, cfg: NetConfig, params: ModelParams, dtype=np.float64):
        self.cfg = cfg
        self.params = params
        self.dtype = np.dtype(dtype)
        if self.dtype == np.float64:
            self._p = params.view  # live views: training updates flow through
        else:
            cast = {e.name: params.view(e.name).astype(self.dtype)
                    for e in params.layout}
            self._p = cast.__getitem__

    # -- forward ------------------------------------------------------------

    def _images(self, x_t: np.ndarray, mask_bits: np.ndarray,
                theta: np.ndarray | None) -> np.ndarray:
        g = self.cfg.grid_side
        b = x_t.shape[0]
        chan2 = mask_bits.astype(self.dtype)
        if self.cfg.conditioning == "theta_scaled_mask":
            if theta is None:
                raise ConfigError("theta_scaled_mask conditioning needs theta1")
            chan2 = chan2 * np.asarray(theta, dtype=self.dtype)[:, None]
        # channels-last layout: (B, G, G, 2)
        img = np.stack([x_t.reshape(b, g, g), chan2.reshape(b, g, g)], axis=3)
        return img

    def _forward(self, img: np.ndarray, tau: np.ndarray, want_cache: bool):
        p = self._p
        cache: dict | None = {} if want_cache else None

        feats, f_cache = nn.fourier_time_features(tau, p("temb.freq"))
        u1, _ = nn.linear_forward(feats, p("temb.l1.w"), p("temb.l1.b"))
        a1, sig1 = nn.silu_forward(u1)
        emb, _ = nn.linear_forward(a1, p("temb.l2.w"), p("temb.l2.b"))

        x, stem_cache = nn.conv3x3_forward(img, p("stem.w"), p("stem.b"))
        if want_cache:
            cache["temb"] = (f_cache, feats, u1, sig1, a1)
            cache["stem"] = stem_cache

        skips = []
        x = self._resblock("enc0", x, emb, cache)
        for i in range(1, self.cfg.depth + 1):
            skips.append(x)
            x, dcache = nn.conv3x3_forward(x, p(f"down{i}.w"), p(f"down{i}.b"),
                                           stride=2)
            if want_cache:
                cache[f"down{i}"] = dcache
            x = self._resblock(f"enc{i}", x, emb, cache)
        for i in range(self.cfg.depth, 0, -1):
            up = nn.upsample2_forward(x)
            skip = skips.pop()
            cat = np.concatenate([up, skip], axis=3)
            x, ucache = nn.conv3x3_forward(cat, p(f"up{i}.w"), p(f"up{i}.b"))
            if want_cache:
                cache[f"up{i}"] = (ucache, up.shape[3])
            x = self._resblock(f"dec{i - 1}", x, emb, cache)

        a_head, sig_head = nn.silu_forward(x)
        out, head_cache = nn.conv3x3_forward(a_head, p("head.w"), p("head.b"))
        if want_cache:
            cache["head"] = (head_cache, x, sig_head)
            cache["emb"] = emb
        return out, cache

    def _resblock(self, name: str, x: np.ndarray, emb: np.ndarray, cache):
        p = self._p
        a0, sig0 = nn.silu_forward(x)
        h1, c1_cache = nn.conv3x3_forward(a0, p(f"{name}.c1.w"), p(f"{name}.c1.b"))
        proj, _ = nn.linear_forward(emb, p(f"{name}.emb.w"), p(f"{name}.emb.b"))
        h1 += proj[:, None, None, :]
        a1, sig1 = nn.silu_forward(h1)
        h2, c2_cache = nn.conv3x3_forward(a1, p(f"{name}.c2.w"), p(f"{name}.c2.b"))
        if cache is not None:
            cache[name] = (x, sig0, c1_cache, h1, sig1, c2_cache)
        return x + h2

    def raw_scores(self, x_t: np.ndarray, mask_bits: np.ndarray,
                   theta: np.ndarray | None, t: np.ndarray,
                   want_cache: bool = False):
        """(B, n) masked scores for per-row masks/steps; optionally caching."""
        x_t = np.asarray(x_t, dtype=self.dtype)
        tau = np.asarray(t, dtype=self.dtype) / self.cfg.time_horizon
        img = self._images(x_t, mask_bits, theta)
        out, cache = self._forward(img, tau, want_cache)
        unobs = (1.0 - mask_bits).astype(self.dtype, copy=False)
        scores = out.reshape(x_t.shape[0], -1) * unobs
        scores = scores.astype(np.float64, copy=False)
        if want_cache:
            cache["unobs"] = unobs
        return scores, cache

    def scores_for_batch(self, batch: TrainingBatch) -> np.ndarray:
        scores, _ = self.raw_scores(batch.x_t, batch.mask_bits, batch.theta, batch.t)
        return scores

    def __call__(self, x_full: np.ndarray, mask: Mask, theta1, t: int) -> np.ndarray:
        x_full = np.asarray(x_full, dtype=np.float64)
        batched = x_full.ndim == 2
        x2d = np.atleast_2d(x_full)
        if x2d.shape[1] != self.cfg.grid_side ** 2:
            raise ConfigError(f"state length {x2d.shape[1]} != grid size "
                              f"{self.cfg.grid_side ** 2}")
        if not 0 <= t <= self.cfg.time_horizon:
            raise ConfigError(f"step {t} outside [0, {self.cfg.time_horizon}]")
        b = x2d.shape[0]
        out = np.empty_like(x2d)
        bits = np.broadcast_to(mask.bits, x2d.shape[:1] + mask.bits.shape)
        theta = None if theta1 is None else np.full(b, float(theta1))
        for lo in range(0, b, self.max_eval_batch):
            hi = min(lo + self.max_eval_batch, b)
            th = None if theta is None else theta[lo:hi]
            out[lo:hi], _ = self.raw_scores(
                x2d[lo:hi], bits[lo:hi].astype(np.float64), th,
                np.full(hi - lo, t, dtype=np.int64))
        return out if batched else out[0]

    # -- backward -----------------------------------------------------------

    def backward(self, dscore: np.ndarray, cache: dict) -> np.ndarray:
        """Backpropagate d(loss)/d(score) to a flat float64 parameter gradient.

        Runs in the network dtype (float32 nets give float32 arithmetic, cast
        on return); the float64 default is exact for the finite-difference
        gradient contract.
        """
        p = self._p
        grads = {e.name: np.zeros(e.shape, dtype=self.dtype)
                 for e in self.params.layout}
        g = self.cfg.grid_side
        b = dscore.shape[0]

        dscore = np.asarray(dscore, dtype=self.dtype)
        dout = (dscore * cache["unobs"]).reshape(b, g, g, 1)
        head_cache, x_pre_head, sig_head = cache["head"]
        da_head, grads["head.w"], grads["head.b"] = nn.conv3x3_backward(
            dout, p("head.w"), head_cache)
        dx = nn.silu_backward(da_head, x_pre_head, sig_head)
        demb = np.zeros_like(cache["emb"])

        for i in range(1, self.cfg.depth + 1):
            dx, de = self._resblock_backward(f"dec{i - 1}", dx, grads, cache)
            demb += de
            ucache, up_channels = cache[f"up{i}"]
            dcat, grads[f"up{i}.w"], grads[f"up{i}.b"] = nn.conv3x3_backward(
                dx, p(f"up{i}.w"), ucache)
            dup, dskip = dcat[..., :up_channels], dcat[..., up_channels:]
            dx = nn.upsample2_backward(dup)
            cache[f"skip{i}"] = dskip  # gradient flowing into the encoder skip

        for i in range(self.cfg.depth, 0, -1):
            dx, de = self._resblock_backward(f"enc{i}", dx, grads, cache)
            demb += de
            dx, grads[f"down{i}.w"], grads[f"down{i}.b"] = nn.conv3x3_backward(
                dx, p(f"down{i}.w"), cache[f"down{i}"])
            dx += cache.pop(f"skip{i}")
        dx, de = self._resblock_backward("enc0", dx, grads, cache)
        demb += de

        _, grads["stem.w"], grads["stem.b"] = nn.conv3x3_backward(
            dx, p("stem.w"), cache["stem"])

        f_cache, feats, u1, sig1, a1 = cache["temb"]
        da1, grads["temb.l2.w"], grads["temb.l2.b"] = nn.linear_backward(
            demb, p("temb.l2.w"), a1)
        du1 = nn.silu_backward(da1, u1, sig1)
        dfeats, grads["temb.l1.w"], grads["temb.l1.b"] = nn.linear_backward(
            du1, p("temb.l1.w"), feats)
        grads["temb.freq"] = nn.fourier_time_backward(dfeats, p("temb.freq"), f_cache)

        flat = np.empty_like(self.params.flat)
        for e in self.params.layout:
            flat[e.offset:e.offset + e.size] = grads[e.name].ravel()
        return flat

    def _resblock_backward(self, name: str, dout: np.ndarray, grads: dict, cache):
        p = self._p
        x, sig0, c1_cache, h1, sig1, c2_cache = cache[name]
        da1, grads[f"{name}.c2.w"], grads[f"{name}.c2.b"] = nn.conv3x3_backward(
            dout, p(f"{name}.c2.w"), c2_cache)
        dh1 = nn.silu_backward(da1, h1, sig1)
        dproj = dh1.sum(axis=(1, 2))
        de, grads[f"{name}.emb.w"], grads[f"{name}.emb.b"] = nn.linear_backward(
            dproj, p(f"{name}.emb.w"), cache["emb"])
        da0, grads[f"{name}.c1.w"], grads[f"{name}.c1.b"] = nn.conv3x3_backward(
            dh1, p(f"{name}.c1.w"), c1_cache)
        dx = dout + nn.silu_backward(da0, x, sig0)
        return dx, de

    # -- loss ---------------------------------------------------------------

    def loss_and_gradient(self, batch: TrainingBatch,
                          sched: Schedule) -> tuple[float, np.ndarray]:
        """Mean masked DSM loss over the batch and its exact parameter gradient."""
        scores, cache = self.raw_scores(batch.x_t, batch.mask_bits, batch.theta,
                                        batch.t, want_cache=True)
        terms = dsm_loss_terms(scores, batch, sched)
        bad = np.flatnonzero(~np.isfinite(terms))
        if bad.size:
            raise DivergenceError(
                f"non-finite loss for batch sample {bad[0]}", step=int(bad[0]))
        sig = sched.sigma_bar[batch.t][:, None]
        resid = (sig * scores + batch.eps) * (1 - batch.mask_bits)
        dscore = 2.0 * sig * resid / batch.size
        return float(terms.mean()), self.backward(dscore, cache)


def score_forward(params: ModelParams, cfg: NetConfig, x_t: np.ndarray,
                  mask: Mask, theta1=None, t: int = 1) -> np.ndarray:
    """Evaluate the network once; returns length-n scores, zero at observed."""
    return ScoreNet(cfg, params)(x_t, mask, theta1, t)


def gradient(params: ModelParams, cfg: NetConfig, batch: TrainingBatch,
             sched: Schedule) -> np.ndarray:
    """Exact gradient of the batch DSM loss with respect to every parameter."""
    return ScoreNet(cfg, params).loss_and_gradient(batch, sched)[1]


# ---------------------------------------------------------------------------
# Checkpointing: one self-describing binary with a JSON header and raw
# float64 payloads (parameters, then optimizer moments).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NCSC"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHQ")


@dataclass(eq=False)
class Checkpoint:
    config: NetConfig
    params: ModelParams
    schedule_fingerprint: str
    train_meta: dict
    opt_m: np.ndarray
    opt_v: np.ndarray
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = {
        "format_version": ckpt.format_version,
        "config": asdict(ckpt.config),
        "layout": [[e.name, e.offset, list(e.shape), e.trainable]
                   for e in ckpt.params.layout],
        "schedule_fingerprint": ckpt.schedule_fingerprint,
        "train_meta": ckpt.train_meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(blob)))
        fh.write(blob)
        fh.write(ckpt.params.flat.astype("<f8").tobytes())
        fh.write(ckpt.opt_m.astype("<f8").tobytes())
        fh.write(ckpt.opt_v.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, expected_grid_side: int | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise FormatError("checkpoint file shorter than its header")
    magic, version, _, blob_len = _CKPT_HEAD.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + blob_len])
    cfg = NetConfig(**header["config"])
    if expected_grid_side is not None and cfg.grid_side != expected_grid_side:
        raise FormatError(f"checkpoint was trained on a {cfg.grid_side}-side grid, "
                          f"expected {expected_grid_side}")
    layout = net_layout(cfg)
    stored = [[e.name, e.offset, list(e.shape), e.trainable] for e in layout]
    if stored != header["layout"]:
        raise FormatError("checkpoint layout does not match its config")
    total = sum(e.size for e in layout)
    offset = _CKPT_HEAD.size + blob_len
    expect = offset + 3 * 8 * total
    if len(raw) != expect:
        raise FormatError(f"checkpoint has {len(raw)} bytes, expected {expect}")
    arrays = np.frombuffer(raw, dtype="<f8", offset=offset, count=3 * total)
    flat, m, v = (arrays[:total].copy(), arrays[total:2 * total].copy(),
                  arrays[2 * total:].copy())
    return Checkpoint(cfg, ModelParams(flat, layout),
                      header["schedule_fingerprint"], header["train_meta"], m, v,
                      header["format_version"])
