"""Scale-state tests: observation, the four estimators, reset, trace IO."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hif8lab.errors import ConfigError, DomainError, NoHistoryError, NonFiniteError, ParseError
from hif8lab.scaling import (
    Current,
    ExpSmooth,
    MaxWindow,
    MostRecent,
    ScaleManager,
    ScaleState,
    TraceRow,
    algo_name,
    compute_scale,
    group_trace,
    parse_algo,
    read_amax_trace,
    write_amax_trace,
)

positive_amax = st.floats(min_value=1e-6, max_value=1e6, allow_nan=False, allow_infinity=False)


class TestObserve:
    def test_first_insertion(self):
        s = ScaleState(MostRecent(), capacity=8)
        s.observe(3.0)
        assert list(s.history) == [3.0]
        assert s.steps_observed == 1

    def test_ring_eviction(self):
        s = ScaleState(MostRecent(), capacity=2)
        for v in (1.0, 2.0, 3.0):
            s.observe(v)
        assert list(s.history) == [2.0, 3.0]
        assert s.steps_observed == 3

    def test_exp_smooth_carry_update(self):
        s = ScaleState(ExpSmooth(alpha=0.9), capacity=8)
        s.smooth_carry = 20.0
        s.observe(10.0)
        assert s.smooth_carry == pytest.approx(11.0, rel=1e-12)

    def test_exp_smooth_first_observation_seeds_carry(self):
        s = ScaleState(ExpSmooth(alpha=0.5), capacity=8)
        s.observe(4.0)
        assert s.smooth_carry == 4.0

    def test_rejects_bad_observations(self):
        s = ScaleState(MostRecent(), capacity=4)
        for bad in (0.0, -1.0, float("nan"), float("inf")):
            with pytest.raises(NonFiniteError):
                s.observe(bad)

    def test_capacity_validation(self):
        with pytest.raises(ConfigError):
            ScaleState(MostRecent(), capacity=0)
        with pytest.raises(ConfigError):
            ScaleState(MaxWindow(10), capacity=5)


class TestEstimate:
    def test_most_recent(self):
        s = ScaleState(MostRecent(), capacity=8)
        s.observe(4.0)
        s.observe(7.0)
        assert s.estimate() == 7.0

    def test_max_window(self):
        s = ScaleState(MaxWindow(64), capacity=64)
        for v in (1.0, 5.0, 3.0):
            s.observe(v)
        assert s.estimate() == 5.0

    def test_max_window_restricts_to_window(self):
        s = ScaleState(MaxWindow(2), capacity=8)
        for v in (9.0, 1.0, 2.0):
            s.observe(v)
        assert s.estimate() == 2.0

    def test_current_is_identity(self):
        s = ScaleState(MostRecent(), capacity=8)
        assert s.estimate(Current(), current_amax=2.5) == 2.5

    def test_current_requires_amax(self):
        s = ScaleState(MostRecent(), capacity=8)
        with pytest.raises(DomainError):
            s.estimate(Current())

    def test_empty_history_is_an_error(self):
        s = ScaleState(MostRecent(), capacity=8)
        with pytest.raises(NoHistoryError):
            s.estimate()

    def test_exp_smooth_uses_carry(self):
        s = ScaleState(ExpSmooth(alpha=0.9), capacity=8)
        s.observe(10.0)
        s.observe(20.0)
        assert s.estimate() == pytest.approx(0.9 * 20.0 + 0.1 * 10.0, rel=1e-12)

    @given(st.lists(positive_amax, min_size=1, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_conservatism_ordering(self, values):
        """Max-window estimates never fall below most-recent ones."""
        s = ScaleState(MaxWindow(64), capacity=64)
        for v in values:
            s.observe(v)
        assert s.estimate(MaxWindow(64)) >= s.estimate(MostRecent())

    @given(st.lists(positive_amax, min_size=2, max_size=40),
           st.floats(min_value=0.05, max_value=0.95))
    @settings(max_examples=200, deadline=None)
    def test_exp_smooth_is_convex_combination(self, values, alpha):
        s = ScaleState(ExpSmooth(alpha=alpha), capacity=64)
        s.observe(values[0])
        for v in values[1:]:
            prev = s.smooth_carry
            s.observe(v)
            lo, hi = min(v, prev), max(v, prev)
            assert lo * (1 - 1e-12) <= s.smooth_carry <= hi * (1 + 1e-12)


class TestComputeScale:
    def test_identity_case(self):
        assert compute_scale(15.0, 15.0) == 1.0

    def test_direct_evaluation(self):
        assert compute_scale(30.0, 15.0) == 0.5

    def test_windowed_history_example(self):
        s = ScaleState(MaxWindow(64), capacity=64)
        for v in (7.5, 2.0, 1.0):
            s.observe(v)
        assert compute_scale(s.estimate(), 15.0) == 2.0

    def test_never_overshoots(self):
        rng = np.random.default_rng(5)
        for a in np.exp(rng.uniform(np.log(1e-6), np.log(1e6), 5000)):
            s = compute_scale(float(a), 15.0)
            assert a * s <= 15.0

    def test_identity_within_ulps(self):
        rng = np.random.default_rng(6)
        tol = 4 * np.spacing(15.0)
        for a in np.exp(rng.uniform(np.log(1e-6), np.log(1e6), 5000)):
            s = compute_scale(float(a), 15.0)
            assert abs(a * s - 15.0) <= tol

    def test_domain_errors(self):
        for bad in (0.0, -2.0, float("nan"), float("inf")):
            with pytest.raises(DomainError):
                compute_scale(bad, 15.0)
            with pytest.raises(DomainError):
                compute_scale(15.0, bad)


class TestManager:
    def test_reset_all_empties_everything(self):
        m = ScaleManager()
        for layer in ("a", "b", "c"):
            st_ = m.state_for(layer, "activation", MostRecent(), 8)
            st_.observe(1.0)
            st_.observe(2.0)
        m.reset_all()
        for state in m.states().values():
            assert len(state.history) == 0
            assert state.smooth_carry is None
            assert state.steps_observed == 0

    def test_reset_then_observe(self):
        m = ScaleManager()
        s = m.state_for("a", "weight", MostRecent(), 8)
        s.observe(1.0)
        m.reset_all()
        s.observe(5.0)
        assert s.estimate() == 5.0

    def test_reset_then_estimate_is_error(self):
        m = ScaleManager()
        s = m.state_for("a", "weight", MostRecent(), 8)
        s.observe(1.0)
        m.reset_all()
        with pytest.raises(NoHistoryError):
            s.estimate()

    def test_states_are_shared_per_key(self):
        m = ScaleManager()
        s1 = m.state_for("a", "weight", MostRecent(), 8)
        s2 = m.state_for("a", "weight", MostRecent(), 8)
        assert s1 is s2
        assert m.state_for("a", "gradient", MostRecent(), 8) is not s1

    def test_unknown_role_rejected(self):
        with pytest.raises(ConfigError):
            ScaleManager().state_for("a", "bias", MostRecent(), 8)


class TestAlgoParsing:
    def test_round_trip_names(self):
        for name in ("most_recent", "exp_smooth", "max", "current"):
            assert algo_name(parse_algo(name, history_len=64)) == name

    def test_max_defaults_window_to_history(self):
        algo = parse_algo("max", history_len=30)
        assert algo == MaxWindow(30)

    def test_explicit_window_wins(self):
        assert parse_algo("max", window=16, history_len=64) == MaxWindow(16)

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            parse_algo("median", history_len=8)

    def test_alpha_validation(self):
        with pytest.raises(ConfigError):
            ExpSmooth(alpha=1.0)
        with pytest.raises(ConfigError):
            ExpSmooth(alpha=0.0)


class TestTraceIO:
    def test_round_trip(self, tmp_path):
        rows = [
            TraceRow(1, "block0.gate_proj", "weight", 1.5),
            TraceRow(1, "block0.gate_proj", "activation", 2.5),
            TraceRow(2, "block0.gate_proj", "weight", 1.25),
        ]
        path = tmp_path / "trace.csv"
        write_amax_trace(str(path), rows)
        assert read_amax_trace(str(path)) == rows

    def test_grouping_sorts_by_step(self):
        rows = [
            TraceRow(2, "a", "weight", 2.0),
            TraceRow(1, "a", "weight", 1.0),
            TraceRow(1, "b", "weight", 3.0),
        ]
        series = group_trace(rows)
        assert [r.step for r in series[("a", "weight")]] == [1, 2]
        assert set(series) == {("a", "weight"), ("b", "weight")}

    def test_bad_header(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("step,layer,role,amax\n1,a,weight,1.0\n")
        with pytest.raises(ParseError, match="row 1"):
            read_amax_trace(str(path))

    def test_bad_row_reports_line_number(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("step,layer_id,role,amax\n1,a,weight,1.0\n2,a,weight,oops\n")
        with pytest.raises(ParseError, match="row 3"):
            read_amax_trace(str(path))

    def test_nonpositive_amax_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("step,layer_id,role,amax\n1,a,weight,-3.0\n")
        with pytest.raises(ParseError, match="row 2"):
            read_amax_trace(str(path))

    def test_unknown_role_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("step,layer_id,role,amax\n1,a,bias,1.0\n")
        with pytest.raises(ParseError, match="row 2"):
            read_amax_trace(str(path))

    def test_no_temp_files_left(self, tmp_path):
        path = tmp_path / "trace.csv"
        write_amax_trace(str(path), [TraceRow(1, "a", "weight", 1.0)])
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []
