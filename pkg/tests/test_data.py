import json
import math
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hypercast.data import (
    ChargingSession,
    DataError,
    Station,
    build_windows,
    calendar_features,
    chronological_split,
    impute_missing,
    ingest_sessions,
    make_panel,
    min_panel_length,
    read_panel,
    read_sessions_csv,
    read_stations_csv,
    synthetic_panel,
    window_indices,
    write_panel,
)

COORDS = {"b": (0.5, 0.5), "a": (0.0, 0.0)}


def utc(*args):
    return datetime(*args, tzinfo=timezone.utc)


def line_panel(values, start=date(2022, 3, 1)):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    stations = [Station(f"s{i}", float(i), 0.0) for i in range(len(values))]
    return make_panel(stations, start, values)


class TestIngest:
    def test_same_day_sessions_add(self):
        recs = [ChargingSession("a", utc(2022, 1, 1, 8), 5.0), ChargingSession("a", utc(2022, 1, 1, 20), 3.0)]
        panel, rejected = ingest_sessions(recs, COORDS)
        assert panel.demand[0, 0] == 8.0
        assert rejected == []

    def test_utc_day_boundary(self):
        recs = [
            ChargingSession("a", utc(2022, 1, 1, 23, 59), 1.0),
            ChargingSession("a", utc(2022, 1, 2, 0, 0), 2.0),
            # 01:00 at UTC+2 is still the previous UTC day
            ChargingSession("a", datetime(2022, 1, 2, 1, 0, tzinfo=timezone(timedelta(hours=2))), 4.0),
        ]
        panel, _ = ingest_sessions(recs, COORDS)
        assert panel.dates[0] == date(2022, 1, 1)
        np.testing.assert_array_equal(panel.demand[0], [5.0, 2.0])

    def test_unknown_station_rejected_panel_unaffected(self):
        good = [ChargingSession("a", utc(2022, 1, 1), 2.0), ChargingSession("b", utc(2022, 1, 3), 1.0)]
        stray = ChargingSession("zzz", utc(2022, 1, 2), 9.0)
        panel, rejected = ingest_sessions(good + [stray], COORDS)
        base, _ = ingest_sessions(good, COORDS)
        assert rejected == [stray]
        np.testing.assert_array_equal(panel.demand, base.demand)

    def test_ordering_and_zero_fill(self):
        recs = [ChargingSession("b", utc(2022, 1, 1), 2.0), ChargingSession("a", utc(2022, 1, 4), 1.0)]
        panel, _ = ingest_sessions(recs, COORDS)
        assert panel.station_ids == ["a", "b"]
        assert panel.n_days == 4
        np.testing.assert_array_equal(panel.demand, [[0, 0, 0, 1], [2, 0, 0, 0]])

    def test_empty_input_errors(self):
        with pytest.raises(DataError):
            ingest_sessions([], COORDS)

    def test_session_validation(self):
        with pytest.raises(DataError):
            ChargingSession("a", utc(2022, 1, 1), -1.0)
        with pytest.raises(DataError):
            ChargingSession("", utc(2022, 1, 1), 1.0)


class TestImpute:
    def test_interior_interpolation(self):
        panel = line_panel([2.0, 0.0, 6.0])
        out = impute_missing(panel, [[False, True, False]])
        np.testing.assert_array_equal(out.demand[0], [2.0, 4.0, 6.0])

    def test_leading_fill(self):
        out = impute_missing(line_panel([0.0, 5.0, 7.0]), [[True, False, False]])
        np.testing.assert_array_equal(out.demand[0], [5.0, 5.0, 7.0])

    def test_no_mask_returns_same_panel(self):
        panel = line_panel([1.0, 2.0, 3.0])
        assert impute_missing(panel, np.zeros((1, 3), bool)) is panel

    def test_fully_missing_station_named(self):
        panel = line_panel([[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(DataError, match="s1"):
            impute_missing(panel, [[False, False], [True, True]])

    def test_features_follow_imputed_demand(self):
        out = impute_missing(line_panel([2.0, 0.0, 6.0]), [[False, True, False]])
        np.testing.assert_array_equal(out.features[:, :, 0], out.demand)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=3, max_size=30), st.data())
    def test_idempotent(self, values, data):
        mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(values), max_size=len(values))))
        assume(not mask.all())
        panel = line_panel(values)
        once = impute_missing(panel, mask[None])
        twice = impute_missing(once, mask[None])
        np.testing.assert_array_equal(once.demand, twice.demand)
        np.testing.assert_array_equal(once.demand[0, ~mask], np.asarray(values)[~mask])


class TestCalendar:
    def test_unit_circle(self):
        days = [date(2020, 1, 1) + timedelta(days=i) for i in range(800)]
        f = calendar_features(days)
        for k in range(3):
            np.testing.assert_allclose(f[:, 2 * k] ** 2 + f[:, 2 * k + 1] ** 2, 1.0, atol=1e-9)

    def test_weekday_periodic(self):
        f = calendar_features([date(2023, 5, 3), date(2023, 5, 10)])
        np.testing.assert_array_equal(f[0, 4:], f[1, 4:])

    def test_monday_is_zero(self):
        f = calendar_features([date(2024, 1, 1)])  # a Monday
        assert f[0, 4] == 0.0 and f[0, 5] == 1.0

    def test_june_vs_december_month_sin(self):
        f = calendar_features([date(2023, 6, 15), date(2023, 12, 15)])
        assert abs(f[0, 0] - math.sin(math.pi)) < 1e-12  # 2*pi*6/12
        assert abs(f[1, 0] - math.sin(2 * math.pi)) < 1e-12
        # floating-point sin(pi) > 0 > sin(2 pi): the month sines have opposite sign
        assert f[0, 0] > 0 > f[1, 0]
        assert f[0, 1] == pytest.approx(-1.0) and f[1, 1] == pytest.approx(1.0)

    def test_june_vs_december_opposite_sign_off_the_crossing(self):
        # one month earlier the sine itself changes sign between the halves of the year
        f = calendar_features([date(2023, 5, 15), date(2023, 11, 15)])
        assert f[0, 0] > 0 > f[1, 0]

    def test_panel_channel_zero_is_demand(self):
        panel = synthetic_panel(1, 3, 70, 1.0)
        np.testing.assert_array_equal(panel.features[:, :, 0], panel.demand)


class TestWindows:
    def test_weekly_indices_example(self):
        _, weekly, _ = window_indices(20, 7, 3, 3)
        assert weekly.tolist() == [6, 13, 20]

    def test_recent_indices_example(self):
        recent, _, target = window_indices(20, 7, 3, 3)
        assert recent.tolist() == list(range(14, 21))
        assert target.tolist() == [21, 22, 23]

    def test_short_panel_errors_with_minimum(self):
        panel = line_panel(np.ones(20))
        need = min_panel_length(7, 4, 1)
        assert need == 23
        with pytest.raises(DataError, match=str(need)):
            build_windows(panel, 7, 4, 1)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([7, 14, 21, 28]), st.sampled_from([1, 2, 3, 4]), st.sampled_from([3, 7]),
           st.integers(0, 15))
    def test_grid_index_arithmetic(self, T_r, T_w, T_f, extra):
        T = min_panel_length(T_r, T_w, T_f) + extra
        # demand value encodes its own day index
        panel = line_panel(np.arange(T, dtype=float))
        samples = build_windows(panel, T_r, T_w, T_f)
        first = max(T_r - 1, 7 * (T_w - 1))
        assert len(samples) == T - T_f - first
        for s in samples:
            t = s.anchor_day
            assert s.recent[0, :, 0].tolist() == list(range(t - T_r + 1, t + 1))
            assert s.weekly[0, :, 0].tolist() == [t - 7 * j for j in range(T_w - 1, -1, -1)]
            assert s.target[0].tolist() == list(range(t + 1, t + T_f + 1))
        anchors = [s.anchor_day for s in samples]
        assert anchors == sorted(anchors)
        assert anchors[0] == first
        assert anchors[-1] == T - T_f - 1


class TestSplit:
    def samples(self, n):
        return build_windows(line_panel(np.arange(n + 9, dtype=float)), 7, 1, 3)[:n]

    def test_eight_two(self):
        s = self.samples(10)
        tr, te = chronological_split(s, 0.8)
        assert len(tr) == 8 and len(te) == 2
        assert max(x.anchor_day for x in tr) < min(x.anchor_day for x in te)

    def test_floor(self):
        tr, te = chronological_split(self.samples(5), 0.8)
        assert (len(tr), len(te)) == (4, 1)

    def test_too_few(self):
        with pytest.raises(DataError):
            chronological_split(self.samples(1))

    @given(st.integers(2, 40), st.floats(0.05, 0.95))
    @settings(max_examples=30, deadline=None)
    def test_preserves_count_and_order(self, n, ratio):
        tr, te = chronological_split(self.samples(n), ratio)
        assert len(tr) + len(te) == n
        days = [s.anchor_day for s in tr + te]
        assert days == sorted(days)


class TestSynthetic:
    def test_noise_free_is_weekly_periodic(self):
        panel = synthetic_panel(4, 5, 84, 0.0)
        np.testing.assert_allclose(panel.demand[:, 7:], panel.demand[:, :-7], atol=1e-12)

    def test_deterministic(self):
        a, b = synthetic_panel(9, 4, 60, 1.0), synthetic_panel(9, 4, 60, 1.0)
        np.testing.assert_array_equal(a.demand, b.demand)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_two_spatial_clusters(self):
        c = synthetic_panel(2, 6, 60, 0.0).coords
        assert np.abs(c[0::2]).max() <= 0.01
        assert np.abs(c[1::2] - 1.0).max() <= 0.01

    def test_preconditions(self):
        with pytest.raises(DataError):
            synthetic_panel(0, 1, 60, 0.0)
        with pytest.raises(DataError):
            synthetic_panel(0, 2, 59, 0.0)


class TestFiles:
    def test_sessions_and_stations_csv(self, tmp_path):
        (tmp_path / "s.csv").write_text(
            "station_id,start_iso8601,energy_kwh\na,2022-01-01T10:00:00Z,2.5\nb,2022-01-02T23:30:00+00:00,1\n"
        )
        (tmp_path / "st.csv").write_text("station_id,longitude,latitude\na,1.0,2.0\nb,3.0,4.0\n")
        recs = read_sessions_csv(tmp_path / "s.csv")
        coords = read_stations_csv(tmp_path / "st.csv")
        assert coords == {"a": (1.0, 2.0), "b": (3.0, 4.0)}
        panel, rejected = ingest_sessions(recs, coords)
        np.testing.assert_array_equal(panel.demand, [[2.5, 0.0], [0.0, 1.0]])

    def test_bad_row_reports_line(self, tmp_path):
        (tmp_path / "s.csv").write_text("station_id,start_iso8601,energy_kwh\na,not-a-date,2\n")
        with pytest.raises(DataError, match=":2:"):
            read_sessions_csv(tmp_path / "s.csv")

    def test_panel_roundtrip(self, tmp_path):
        panel = synthetic_panel(3, 3, 61, 0.5)
        sidecar = write_panel(panel, tmp_path / "p.csv")
        meta = json.loads(sidecar.read_text())
        assert meta["feature_layout"][0] == "demand" and len(meta["feature_layout"]) == 7
        back = read_panel(tmp_path / "p.csv")
        np.testing.assert_array_equal(back.demand, panel.demand)
        np.testing.assert_array_equal(back.features, panel.features)
        assert back.dates == panel.dates and back.station_ids == panel.station_ids
