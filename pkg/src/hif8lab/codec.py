"""Bit-accurate HiF8 fake-quantization codec.

HiF8 is an 8-bit floating-point format with tiered mantissa precision:
small magnitudes get more mantissa bits, large magnitudes fewer.  The
representable grid is derived from the tier table

    |x| <= 8      -> 3 mantissa bits
    |x| <= 128    -> 2 mantissa bits
    |x| <= 32768  -> 1 mantissa bit

by stepping each binade [2^e, 2^(e+1)) at 2^(e - m), where m is the
mantissa width of the tier the binade falls in.  Below the smallest
normal binade the grid continues linearly (subnormals), and zero is
always representable.

Values are assumed to be pre-scaled by the caller (see `scaling`);
this module only rounds, clips, and counts saturations.  The clip bound
`max_val` itself is kept as the top representable point so that clipping
and round-to-nearest agree and quantization is idempotent.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, NonFiniteError, OutOfRangeError, PrecisionError

__all__ = [
    "TierSpec",
    "CodecParams",
    "QuantResult",
    "TIERS",
    "tier_of",
    "representable_grid",
    "signed_grid",
    "fake_quantize",
    "Hif8Encoder",
]


@dataclass(frozen=True)
class TierSpec:
    """One row of the precision table: a magnitude bound and its mantissa width."""

    magnitude_bound: float
    mantissa_bits: int


# Bounds strictly increasing, mantissa bits strictly decreasing.
TIERS: tuple[TierSpec, ...] = (
    TierSpec(8.0, 3),
    TierSpec(128.0, 2),
    TierSpec(32768.0, 1),
)

_TOP_BOUND = TIERS[-1].magnitude_bound
_TOP_EXP = 15  # log2 of the largest tier bound


@dataclass(frozen=True)
class CodecParams:
    """Codec knobs: the clip bound and the smallest normal binade exponent.

    `max_val` is the saturation threshold in the scaled domain.  The
    default 15 follows the reference recipe.  `min_normal_exponent` is
    the exponent of the smallest normal binade; below it the grid is
    linear with the same step as that binade would use.  The default -10
    keeps the total code space within 8 bits.
    """

    max_val: float = 15.0
    min_normal_exponent: int = -10

    def __post_init__(self):
        if not np.isfinite(self.max_val) or self.max_val <= 0:
            raise ConfigError(f"max_val must be positive and finite, got {self.max_val}")
        if self.max_val > _TOP_BOUND:
            raise ConfigError(
                f"max_val must not exceed the largest tier bound {_TOP_BOUND}, got {self.max_val}"
            )
        if self.min_normal_exponent > 3:
            raise ConfigError(
                f"min_normal_exponent must be <= 3 so the grid is non-empty below 8, "
                f"got {self.min_normal_exponent}"
            )
        if self.min_normal_exponent < -1000:
            raise ConfigError("min_normal_exponent below -1000 underflows double precision")


@dataclass
class QuantResult:
    """Fake-quantized values plus saturation counters for telemetry."""

    values: np.ndarray
    saturated_count: int
    total_count: int


def tier_of(magnitude: float) -> TierSpec:
    """Return the first tier whose bound covers `magnitude`.

    Zero maps to the highest-precision tier.  Magnitudes above the top
    bound are a caller error: clip before asking for a tier.
    """
    if not np.isfinite(magnitude) or magnitude < 0:
        raise NonFiniteError(f"magnitude must be a finite non-negative real, got {magnitude}")
    for tier in TIERS:
        if magnitude <= tier.magnitude_bound:
            return tier
    raise OutOfRangeError(f"magnitude {magnitude} exceeds the largest tier bound {_TOP_BOUND}")


def _binade_mantissa_bits(e: int) -> int:
    """Mantissa width of the tier containing the binade [2^e, 2^(e+1))."""
    if e + 1 <= 3:
        return 3
    if e + 1 <= 7:
        return 2
    if e + 1 <= _TOP_EXP:
        return 1
    raise OutOfRangeError(f"binade exponent {e} lies beyond the top tier")


@lru_cache(maxsize=32)
def _grid_magnitudes(params: CodecParams) -> tuple[float, ...]:
    emin = params.min_normal_exponent
    sub_step = 2.0 ** (emin - _binade_mantissa_bits(emin))
    points: list[float] = []

    # Subnormals: linear spacing up to (but excluding) the first normal point.
    k = 0
    while k * sub_step < 2.0**emin and k * sub_step <= params.max_val:
        points.append(k * sub_step)
        k += 1

    for e in range(emin, _TOP_EXP):
        base = 2.0**e
        if base > params.max_val:
            break
        m = _binade_mantissa_bits(e)
        step = 2.0 ** (e - m)
        for i in range(1 << m):
            v = base + i * step
            if v > params.max_val:
                break
            points.append(v)

    if 2.0**_TOP_EXP <= params.max_val:
        points.append(2.0**_TOP_EXP)

    # The clip bound itself is representable: clipping a huge value and
    # rounding a value just below max_val must land on the same grid.
    if points[-1] < params.max_val:
        points.append(params.max_val)
    return tuple(points)


def representable_grid(params: CodecParams) -> np.ndarray:
    """All non-negative representable magnitudes, sorted ascending.

    Includes 0, the subnormal ramp, every binade point up to `max_val`,
    and `max_val` itself.  The negative grid is the mirror image.
    """
    return np.array(_grid_magnitudes(params), dtype=np.float64)


def signed_grid(params: CodecParams) -> np.ndarray:
    """The full signed grid: mirrored magnitudes with zero appearing once."""
    mags = representable_grid(params)
    return np.concatenate([-mags[:0:-1], mags])


def fake_quantize(x: np.ndarray, params: CodecParams = CodecParams()) -> QuantResult:
    """Round `x` elementwise to the nearest representable value.

    Elements with |x| > max_val are clipped to sign(x) * max_val and
    counted as saturated.  Everything else rounds to the nearest grid
    magnitude, ties resolved to the even grid index.  Sign symmetry is
    exact: quantizing -x gives the negation of quantizing x.
    """
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    if not finite.all():
        bad = int(np.argmin(finite.ravel()))
        raise NonFiniteError(f"non-finite input element at flat index {bad}: {x.ravel()[bad]}")

    mags = representable_grid(params)
    a = np.abs(x)
    saturated = a > params.max_val

    # Nearest-neighbour by bisection over the magnitude grid.  Distances
    # to both bracketing points are exact doubles here (the neighbours
    # are within a factor of two of |x|), so the tie test is exact.
    hi = np.searchsorted(mags, a)
    hi = np.minimum(hi, len(mags) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = a - mags[lo]
    d_hi = mags[hi] - a
    pick_hi = d_hi < d_lo
    tie = d_hi == d_lo
    # On a tie the two candidates are consecutive indices: exactly one is even.
    pick_hi |= tie & (hi % 2 == 0)
    idx = np.where(pick_hi, hi, lo)

    q = np.where(saturated, params.max_val, mags[idx])
    values = np.where(x < 0, -q, q)
    return QuantResult(
        values=values,
        saturated_count=int(np.count_nonzero(saturated)),
        total_count=int(x.size),
    )


class Hif8Encoder:
    """Integer codes for the representable grid.

    The code is the rank of the value in the full signed grid; the format
    only promises an exact decode(encode(v)) round-trip within at most
    256 code points, so an enumeration code is sufficient and simplest.
    """

    def __init__(self, params: CodecParams = CodecParams()):
        self.params = params
        self._table = signed_grid(params)
        if len(self._table) > 256:
            raise ConfigError(
                f"code space for {params} needs {len(self._table)} points; "
                "an 8-bit code allows at most 256"
            )

    @property
    def code_count(self) -> int:
        return len(self._table)

    def encode(self, value: float) -> int:
        """Return the 8-bit code of a grid value (or a clip point)."""
        if not np.isfinite(value):
            raise NonFiniteError(f"cannot encode non-finite value {value}")
        i = int(np.searchsorted(self._table, value))
        if i == len(self._table) or self._table[i] != value:
            raise PrecisionError(f"{value!r} is not on the representable grid")
        return i

    def decode(self, code: int) -> float:
        """Invert `encode`.  Codes outside the assigned range are an error."""
        if not 0 <= code < len(self._table):
            raise PrecisionError(f"code {code} is unassigned (valid: 0..{len(self._table) - 1})")
        return float(self._table[code])
