"""Grid geometry, observation masks, field values, and the seedable RNG contract.

Everything downstream (simulators, the diffusion sampler, the score network)
works on flattened row-major fields over a square grid, with a binary mask
marking observed locations. All types are immutable values; operations are
pure given an :class:`RngStream`.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

_U64 = (1 << 64) - 1


def _mix64(a: int, b: int) -> int:
    """SplitMix64-style avalanche of two integers into one 64-bit id."""
    x = ((a & _U64) * 0x9E3779B97F4A7C15 + (b & _U64) * 0xBF58476D1CE4E5B9 + 1) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible randomness source.

    Identical ``(seed, stream)`` pairs yield identical draw sequences;
    distinct stream ids yield statistically independent sequences. Each call
    to :meth:`generator` starts the sequence from the beginning, so repeating
    an operation with the same stream reproduces its output bit-exactly.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & _U64, spawn_key=(self.stream & _U64,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, k: int) -> "RngStream":
        """Derive an independent substream, e.g. one per replicate or worker."""
        return RngStream(self.seed, _mix64(self.stream, k))


class Scale(enum.Enum):
    """Marginal scale tag carried by every field."""

    RAW = 0
    FRECHET = 1
    GUMBEL = 2


@dataclass(frozen=True)
class GridSpec:
    """A side x side regular grid on [lower, upper]^2, endpoints included.

    Locations are enumerated row-major; ``location(i)`` is (x, y) with
    x varying fastest along a row. For side > 1 the spacing is
    (upper - lower) / (side - 1).
    """

    side: int
    lower: float
    upper: float

    def __post_init__(self):
        if self.side < 1:
            raise ConfigError(f"grid side must be >= 1, got {self.side}")
        if not self.lower < self.upper:
            raise ConfigError(f"need lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def n(self) -> int:
        return self.side * self.side

    @property
    def spacing(self) -> float:
        if self.side == 1:
            return 0.0
        return (self.upper - self.lower) / (self.side - 1)

    @cached_property
    def locations(self) -> np.ndarray:
        """(n, 2) array of coordinates in row-major index order."""
        if self.side == 1:
            axis = np.array([self.lower])
        else:
            axis = self.lower + self.spacing * np.arange(self.side)
        xx, yy = np.meshgrid(axis, axis, indexing="xy")
        out = np.column_stack([xx.ravel(), yy.ravel()])
        out.flags.writeable = False
        return out

    def location(self, i: int) -> tuple[float, float]:
        if not 0 <= i < self.n:
            raise ConfigError(f"index {i} outside [0, {self.n})")
        return tuple(self.locations[i])


def build_grid(side: int, lower: float, upper: float) -> GridSpec:
    """Build a square grid; rejects side = 0 and degenerate bounds."""
    return GridSpec(side=side, lower=float(lower), upper=float(upper))


def pairwise_distance(g: GridSpec, i: int, j: int) -> float:
    """Euclidean distance between grid locations i and j."""
    if not (0 <= i < g.n and 0 <= j < g.n):
        raise ConfigError(f"indices ({i}, {j}) outside [0, {g.n})")
    d = g.locations[i] - g.locations[j]
    return float(math.hypot(d[0], d[1]))


def distance_matrix(g: GridSpec) -> np.ndarray:
    """(n, n) matrix of all pairwise distances; shared by covariance builders."""
    loc = g.locations
    diff = loc[:, None, :] - loc[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary observation indicator over a grid: 1 = observed, 0 = unobserved."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ConfigError("mask bits must be one-dimensional")
        if bits.size and bits.max() > 1:
            raise ConfigError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", _freeze(bits))

    @property
    def n(self) -> int:
        return self.bits.size

    @property
    def observed_count(self) -> int:
        return int(self.bits.sum())

    @cached_property
    def observed_idx(self) -> np.ndarray:
        return _freeze(np.flatnonzero(self.bits == 1))

    @cached_property
    def unobserved_idx(self) -> np.ndarray:
        return _freeze(np.flatnonzero(self.bits == 0))

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


def full_mask(n: int) -> Mask:
    return Mask(np.ones(n, dtype=np.uint8))


def empty_mask(n: int) -> Mask:
    return Mask(np.zeros(n, dtype=np.uint8))


def sample_bernoulli_mask(g: GridSpec, rho: float, rng: RngStream) -> Mask:
    """Each location observed independently with probability rho."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    gen = rng.generator()
    return Mask((gen.random(g.n) < rho).astype(np.uint8))


def sample_fixed_count_mask(g: GridSpec, k: int, rng: RngStream) -> Mask:
    """Exactly k observed locations, uniform over all size-k subsets."""
    if not 0 <= k <= g.n:
        raise ConfigError(f"k must lie in [0, {g.n}], got {k}")
    gen = rng.generator()
    idx = gen.choice(g.n, size=k, replace=False)
    bits = np.zeros(g.n, dtype=np.uint8)
    bits[idx] = 1
    return Mask(bits)


@dataclass(frozen=True, eq=False)
class Field:
    """Flattened row-major field values with a marginal-scale tag."""

    values: np.ndarray
    scale: Scale = Scale.RAW

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ConfigError("field values must be one-dimensional")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("field values must be finite")
        if self.scale is Scale.FRECHET and vals.size and vals.min() <= 0.0:
            raise ConfigError("Frechet-scale values must be strictly positive")
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def n(self) -> int:
        return self.values.size

    def __eq__(self, other):
        return (
            isinstance(other, Field)
            and self.scale is other.scale
            and np.array_equal(self.values, other.values)
        )


def split_field(field: Field, mask: Mask) -> tuple[np.ndarray, np.ndarray]:
    """Restrict a field through a mask: (observed values, unobserved values)."""
    if field.n != mask.n:
        raise ConfigError(f"field length {field.n} != mask length {mask.n}")
    return field.values[mask.observed_idx], field.values[mask.unobserved_idx]


def merge_field(mask: Mask, observed: np.ndarray, completion: np.ndarray,
                scale: Scale = Scale.RAW) -> Field:
    """Reassemble a full field from observed values and a completion on the rest."""
    observed = np.asarray(observed, dtype=np.float64)
    completion = np.asarray(completion, dtype=np.float64)
    if observed.size + completion.size != mask.n:
        raise ConfigError(
            f"parts of size {observed.size} + {completion.size} != {mask.n} locations"
        )
    if observed.size != mask.observed_count:
        raise ConfigError(
            f"observed part has {observed.size} values for {mask.observed_count} observed bits"
        )
    values = np.empty(mask.n, dtype=np.float64)
    values[mask.observed_idx] = observed
    values[mask.unobserved_idx] = completion
    return Field(values, scale)


# ---------------------------------------------------------------------------
# Serialization: 16-byte header {magic, version, G, scale tag} + payload.
# Fields are little-endian float64; masks are one byte (0/1) per location.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIB5x")
_FIELD_MAGIC = b"NCSF"
_MASK_MAGIC = b"NCSM"
FORMAT_VERSION = 1
_MASK_SCALE_TAG = 255


def _grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"length {n} is not a perfect square")
    return side


def save_field(path: str | Path, field: Field) -> None:
    header = _HEADER.pack(_FIELD_MAGIC, FORMAT_VERSION, _grid_side(field.n),
                          field.scale.value)
    payload = field.values.astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_field(path: str | Path) -> Field:
    raw = Path(path).read_bytes()
    magic, version, side, tag = _unpack_header(raw, _FIELD_MAGIC, "field")
    expect = _HEADER.size + 8 * side * side
    if len(raw) != expect:
        raise FormatError(f"field file has {len(raw)} bytes, expected {expect}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).copy()
    return Field(values, Scale(tag))


def save_mask(path: str | Path, mask: Mask) -> None:
    header = _HEADER.pack(_MASK_MAGIC, FORMAT_VERSION, _grid_side(mask.n),
                          _MASK_SCALE_TAG)
    Path(path).write_bytes(header + mask.bits.tobytes())


def load_mask(path: str | Path) -> Mask:
    raw = Path(path).read_bytes()
    magic, version, side, tag = _unpack_header(raw, _MASK_MAGIC, "mask")
    expect = _HEADER.size + side * side
    if len(raw) != expect:
        raise FormatError(f"mask file has {len(raw)} bytes, expected {expect}")
    return Mask(np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).copy())


def _unpack_header(raw: bytes, magic: bytes, kind: str):
    if len(raw) < _HEADER.size:
        raise FormatError(f"{kind} file shorter than its header")
    got_magic, version, side, tag = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"bad {kind} magic {got_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} format version {version}")
    return got_magic, version, side, tag


def field_to_csv(path: str | Path, g: GridSpec, field: Field) -> None:
    """Emit (index, row, col, value) rows for the plotting component."""
    if field.n != g.n:
        raise ConfigError(f"field length {field.n} != grid size {g.n}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "row", "col", "value"])
        for i, v in enumerate(field.values):
            writer.writerow([i, i // g.side, i % g.side, repr(float(v))])
