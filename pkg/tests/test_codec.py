"""Codec tests: tier lookup, grid enumeration, rounding, encode/decode.

The rounding oracle here is deliberately brute force: distance to every
grid magnitude, ties to the even grid index.  The production path uses
bisection, so agreement is a real cross-check.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hif8lab.codec import (
    CodecParams,
    Hif8Encoder,
    TIERS,
    fake_quantize,
    representable_grid,
    signed_grid,
    tier_of,
)
from hif8lab.errors import ConfigError, NonFiniteError, OutOfRangeError, PrecisionError

from conftest import sample_inputs


def oracle_quantize(x: np.ndarray, params: CodecParams):
    """Brute-force nearest neighbour over the magnitude grid."""
    mags = representable_grid(params)
    a = np.abs(x)
    saturated = a > params.max_val
    d = np.abs(a[:, None] - mags[None, :])
    dmin = d.min(axis=1)
    is_min = d == dmin[:, None]
    # Prefer the even index on ties (candidates are consecutive indices).
    score = is_min * (2 - (np.arange(len(mags)) % 2))
    idx = np.argmax(score, axis=1)
    q = np.where(saturated, params.max_val, mags[idx])
    return np.where(x < 0, -q, q), int(saturated.sum())


class TestTierOf:
    def test_inner_tier(self):
        assert tier_of(4.0) == TIERS[0]
        assert tier_of(4.0).mantissa_bits == 3

    def test_middle_tier(self):
        assert tier_of(100.0) == TIERS[1]
        assert tier_of(100.0).mantissa_bits == 2

    def test_zero_maps_to_highest_precision(self):
        assert tier_of(0.0) == TIERS[0]

    def test_boundaries_are_inclusive(self):
        assert tier_of(8.0).mantissa_bits == 3
        assert tier_of(128.0).mantissa_bits == 2
        assert tier_of(32768.0).mantissa_bits == 1

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            tier_of(32768.1)

    def test_tier_table_shape(self):
        bounds = [t.magnitude_bound for t in TIERS]
        bits = [t.mantissa_bits for t in TIERS]
        assert bounds == sorted(bounds) and len(set(bounds)) == 3
        assert bits == sorted(bits, reverse=True)
        assert bounds == [8.0, 128.0, 32768.0]
        assert bits == [3, 2, 1]


class TestGrid:
    def test_truncated_top_binade(self, params):
        # [8, 16) at 2 mantissa bits steps by 2, cut at max_val.
        grid = set(representable_grid(params).tolist())
        assert {8.0, 10.0, 12.0, 14.0} <= grid
        assert 16.0 not in grid

    def test_three_mantissa_bit_binade(self, params):
        grid = set(representable_grid(params).tolist())
        assert {4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5} <= grid

    def test_contains_zero_once(self, params):
        grid = representable_grid(params)
        assert np.count_nonzero(grid == 0.0) == 1
        assert grid[0] == 0.0

    def test_sorted_and_unique(self, params):
        grid = representable_grid(params)
        assert np.all(np.diff(grid) > 0)

    def test_clip_bound_is_top_point(self, params):
        grid = representable_grid(params)
        assert grid[-1] == params.max_val

    def test_subnormal_ramp(self, params):
        # Below 2^-10 the spacing is uniform at 2^-13.
        grid = representable_grid(params)
        sub = grid[grid < 2.0**-10]
        assert len(sub) == 8
        np.testing.assert_array_equal(sub, np.arange(8) * 2.0**-13)

    def test_signed_grid_mirrors(self, params):
        sg = signed_grid(params)
        np.testing.assert_array_equal(sg, -sg[::-1])
        assert len(sg) == 2 * len(representable_grid(params)) - 1

    def test_param_validation(self):
        with pytest.raises(ConfigError):
            CodecParams(max_val=0.0)
        with pytest.raises(ConfigError):
            CodecParams(max_val=40000.0)
        with pytest.raises(ConfigError):
            CodecParams(min_normal_exponent=4)

    def test_full_range_grid(self):
        grid = representable_grid(CodecParams(max_val=32768.0))
        assert grid[-1] == 32768.0


class TestFakeQuantize:
    def test_exact_grid_point(self, params):
        r = fake_quantize(np.array([8.0]), params)
        assert r.values[0] == 8.0 and r.saturated_count == 0

    def test_rounds_to_nearest(self, params):
        r = fake_quantize(np.array([8.6]), params)
        assert r.values[0] == 8.0 and r.saturated_count == 0

    def test_clips_and_counts(self, params):
        r = fake_quantize(np.array([20.0]), params)
        assert r.values[0] == 15.0 and r.saturated_count == 1
        r = fake_quantize(np.array([-20.0]), params)
        assert r.values[0] == -15.0 and r.saturated_count == 1

    def test_clip_bound_not_saturated(self, params):
        r = fake_quantize(np.array([15.0, -15.0]), params)
        np.testing.assert_array_equal(r.values, [15.0, -15.0])
        assert r.saturated_count == 0

    def test_non_finite_rejected(self, params):
        with pytest.raises(NonFiniteError, match="index 1"):
            fake_quantize(np.array([1.0, np.nan, 2.0]), params)
        with pytest.raises(NonFiniteError):
            fake_quantize(np.array([np.inf]), params)

    def test_preserves_shape(self, params):
        x = np.zeros((3, 4, 5))
        r = fake_quantize(x, params)
        assert r.values.shape == x.shape
        assert r.total_count == 60

    def test_matches_oracle(self, params):
        rng = np.random.default_rng(123)
        x = sample_inputs(rng, 2000)
        got = fake_quantize(x, params)
        want, want_sat = oracle_quantize(x, params)
        np.testing.assert_array_equal(got.values, want)
        assert got.saturated_count == want_sat

    @pytest.mark.parametrize("max_val,min_exp", [(15.0, -10), (14.0, -10), (8.5, -6),
                                                 (32768.0, -4), (100.0, 3)])
    def test_matches_oracle_other_params(self, max_val, min_exp):
        params = CodecParams(max_val=max_val, min_normal_exponent=min_exp)
        rng = np.random.default_rng(hash((max_val, min_exp)) % 2**32)
        x = sample_inputs(rng, 1000)
        got = fake_quantize(x, params)
        want, want_sat = oracle_quantize(x, params)
        np.testing.assert_array_equal(got.values, want)
        assert got.saturated_count == want_sat

    def test_tie_goes_to_even_grid_index(self, params):
        grid = representable_grid(params)
        # 9.0 ties between 8.0 and 10.0; index of 8.0 in the magnitude
        # grid is even, so the tie resolves downward here.
        i8 = int(np.searchsorted(grid, 8.0))
        assert i8 % 2 == 0
        assert fake_quantize(np.array([9.0]), params).values[0] == 8.0
        # 14.5 ties between 14.0 (odd index) and 15.0 (even index).
        assert fake_quantize(np.array([14.5]), params).values[0] == 15.0

    @given(st.floats(min_value=-32768.0, max_value=32768.0, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_idempotent(self, x):
        params = CodecParams()
        once = fake_quantize(np.array([x]), params).values
        twice = fake_quantize(once, params).values
        np.testing.assert_array_equal(once, twice)

    @given(st.floats(min_value=-32768.0, max_value=32768.0, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_odd_symmetry(self, x):
        params = CodecParams()
        pos = fake_quantize(np.array([x]), params).values[0]
        neg = fake_quantize(np.array([-x]), params).values[0]
        assert pos == -neg

    @given(st.floats(min_value=-32768.0, max_value=32768.0, allow_nan=False),
           st.floats(min_value=0.0, max_value=65536.0, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, x, delta):
        params = CodecParams()
        y = min(x + delta, 32768.0)
        qx = fake_quantize(np.array([x]), params).values[0]
        qy = fake_quantize(np.array([y]), params).values[0]
        assert qx <= qy

    def test_tier_relative_error_bound(self, params):
        rng = np.random.default_rng(7)
        exponents = rng.uniform(params.min_normal_exponent, np.log2(params.max_val), 5000)
        x = rng.choice([-1.0, 1.0], 5000) * np.exp2(exponents)
        q = fake_quantize(x, params).values
        rel = np.abs(q - x) / np.abs(x)
        bounds = np.array([2.0 ** -(tier_of(abs(v)).mantissa_bits + 1) for v in x])
        assert np.all(rel <= bounds + 2.0**-20)


class TestEncodeDecode:
    def test_zero_round_trip(self, params):
        enc = Hif8Encoder(params)
        assert enc.decode(enc.encode(0.0)) == 0.0

    def test_every_grid_point_round_trips(self, params):
        enc = Hif8Encoder(params)
        for v in signed_grid(params):
            assert enc.decode(enc.encode(float(v))) == v

    def test_clip_points_encodable(self, params):
        enc = Hif8Encoder(params)
        for v in (params.max_val, -params.max_val):
            assert enc.decode(enc.encode(v)) == v

    def test_code_space_fits_8_bits(self, params):
        assert Hif8Encoder(params).code_count <= 256

    def test_non_grid_value_rejected(self, params):
        enc = Hif8Encoder(params)
        with pytest.raises(PrecisionError):
            enc.encode(8.6)

    def test_unassigned_code_rejected(self, params):
        enc = Hif8Encoder(params)
        with pytest.raises(PrecisionError):
            enc.decode(255)
        with pytest.raises(PrecisionError):
            enc.decode(-1)

    def test_codes_are_distinct(self, params):
        enc = Hif8Encoder(params)
        codes = {enc.encode(float(v)) for v in signed_grid(params)}
        assert len(codes) == enc.code_count
