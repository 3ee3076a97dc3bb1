import logging
from pathlib import Path

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedprog import data
from fedprog.data import (
    BatteryTrace,
    CycleRecord,
    SyntheticParams,
    engineer_features,
    generate_synthetic_fleet,
    load_csv,
    normalize,
    split_train_test,
    write_fleet_csv,
)
from fedprog.errors import DataError

import oracles

FIXTURES = Path(__file__).parent / "fixtures"


def make_trace(capacities, battery_id="T", nominal=1.0, t_f=None, extra=None):
    """Build a trace where every non-capacity channel is constant."""
    records = []
    for i, cap in enumerate(capacities):
        channels = {
            "discharge_capacity": float(cap),
            "charge_capacity": float(cap) * 1.01,
            "avg_temp": 30.0,
            "min_temp": 28.0,
            "max_temp": 32.0,
            "internal_resistance": 0.02,
            "charge_time": 12.0,
        }
        if extra:
            channels.update({k: v[i] for k, v in extra.items()})
        records.append(CycleRecord(i + 1, channels))
    if t_f is None:
        t_f = len(capacities)
    return BatteryTrace(battery_id, records, t_f, nominal)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_generate_rejects_tiny_fleets():
    with pytest.raises(DataError):
        generate_synthetic_fleet(n_batteries=0)
    with pytest.raises(DataError):
        generate_synthetic_fleet(n_batteries=1)


def test_linear_fade_failure_time_is_201():
    params = SyntheticParams(
        nominal_capacity=1.1,
        linear_fade=(0.001, 0.001),
        knee_scale=(0.0, 0.0),
        capacity_noise=0.0,
    )
    fleet = generate_synthetic_fleet(
        n_batteries=2, max_cycles=300, seed=1, params=params, activation_cycle=100
    )
    # 1 - 0.001 n < 0.8 first holds at n = 201
    assert all(t.t_f == 201 for t in fleet.traces)


def test_generation_error_names_battery_when_no_crossing():
    params = SyntheticParams(
        linear_fade=(0.0, 0.0), knee_scale=(0.0, 0.0), capacity_noise=0.0
    )
    with pytest.raises(DataError, match="B000"):
        generate_synthetic_fleet(n_batteries=2, max_cycles=300, seed=0, params=params)


def test_generation_is_deterministic():
    a = generate_synthetic_fleet(n_batteries=4, max_cycles=400, seed=9)
    b = generate_synthetic_fleet(n_batteries=4, max_cycles=400, seed=9)
    assert [t.t_f for t in a.traces] == [t.t_f for t in b.traces]
    for ta, tb in zip(a.traces, b.traces):
        assert ta.battery_id == tb.battery_id
        assert np.array_equal(ta.channel("discharge_capacity"),
                              tb.channel("discharge_capacity"))


def test_failure_time_matches_independent_scan():
    fleet = generate_synthetic_fleet(n_batteries=6, max_cycles=450, seed=13)
    for trace in fleet.traces:
        caps = trace.channel("discharge_capacity")
        crossings = [
            i + 1 for i, c in enumerate(caps) if c < 0.8 * trace.nominal_capacity
        ]
        assert trace.t_f == crossings[0]
        # trace stops at failure
        assert len(trace) == trace.t_f


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def test_load_fixture_fleet_known_failure_times():
    fleet = load_csv(FIXTURES / "fleet_manifest.csv")
    assert len(fleet) == 2
    f1 = fleet.by_id("F1")
    f2 = fleet.by_id("F2")
    assert f1.t_f == 4  # first capacity < 0.8 * 1.0 is cycle 4 (0.79)
    assert f2.t_f == 3  # manifest override
    assert f1.nominal_capacity == 1.0
    assert len(f1) == 5


def test_empty_manifest_warns_and_returns_empty(tmp_path, caplog):
    manifest = tmp_path / "m.csv"
    manifest.write_text("path,t_f,nominal_capacity\n")
    with caplog.at_level(logging.WARNING):
        fleet = load_csv(manifest)
    assert len(fleet) == 0
    assert any("empty fleet" in r.message for r in caplog.records)


def test_nan_cell_is_a_parse_error_naming_the_row(tmp_path):
    bad = tmp_path / "bad.csv"
    rows = (FIXTURES / "F1.csv").read_text().splitlines()
    rows[3] = rows[3].replace("30.2", "nan")
    bad.write_text("\n".join(rows) + "\n")
    manifest = tmp_path / "m.csv"
    manifest.write_text("path\nbad.csv\n")
    with pytest.raises(DataError, match=r"bad\.csv:4"):
        load_csv(manifest)


def test_missing_column_is_a_parse_error(tmp_path):
    bad = tmp_path / "bad.csv"
    lines = (FIXTURES / "F1.csv").read_text().splitlines()
    lines[0] = lines[0].replace(",charge_time", "")
    bad.write_text("\n".join(l.rsplit(",", 1)[0] for l in lines) + "\n")
    manifest = tmp_path / "m.csv"
    manifest.write_text("path\nbad.csv\n")
    with pytest.raises(DataError, match="charge_time"):
        load_csv(manifest)


def test_unsorted_cycles_rejected(tmp_path):
    lines = (FIXTURES / "F1.csv").read_text().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    manifest = tmp_path / "m.csv"
    manifest.write_text("path\nbad.csv\n")
    with pytest.raises(DataError, match="contiguous"):
        load_csv(manifest)


def test_write_then_load_round_trips(tmp_path):
    fleet = generate_synthetic_fleet(n_batteries=3, max_cycles=400, seed=4)
    manifest = write_fleet_csv(fleet, tmp_path)
    loaded = load_csv(manifest)
    assert [t.battery_id for t in loaded.traces] == [t.battery_id for t in fleet.traces]
    for orig, back in zip(fleet.traces, loaded.traces):
        assert back.t_f == orig.t_f
        assert back.nominal_capacity == orig.nominal_capacity
        for name in data.CHANNELS:
            assert np.array_equal(back.channel(name), orig.channel(name))


# ---------------------------------------------------------------------------
# feature engineering
# ---------------------------------------------------------------------------


def test_constant_channel_degenerate_moments():
    trace = make_trace([1.0] * 30, t_f=30)
    m = engineer_features(trace, window=5, activation_cycle=10)
    cols = m.columns
    for name in ("var_avg_temp_w5", "skew_avg_temp_w5", "kurt_avg_temp_w5"):
        assert np.allclose(m.values[:, cols.index(name)], 0.0)


def test_window_mean_and_variance_hand_values():
    caps = [1.0] * 30
    rising = {"avg_temp": list(range(1, 31))}  # 1, 2, 3, ...
    trace = make_trace(caps, t_f=30, extra={"avg_temp": [float(v) for v in rising["avg_temp"]]})
    m = engineer_features(trace, window=3, activation_cycle=3)
    # first eligible row is cycle 3: window [1, 2, 3]
    row = m.values[0]
    assert row[m.columns.index("mean_avg_temp_w3")] == pytest.approx(2.0)
    assert row[m.columns.index("var_avg_temp_w3")] == pytest.approx(2.0 / 3.0)


def test_skew_kurtosis_match_textbook_oracle():
    vals = [1.0, 2.0, 3.0, 4.0, 10.0]
    trace = make_trace([1.0] * 5, t_f=5, extra={"avg_temp": vals})
    m = engineer_features(trace, window=5, activation_cycle=5)
    row = m.values[0]
    _, _, skew, kurt = oracles.population_moments(vals)
    assert row[m.columns.index("skew_avg_temp_w5")] == pytest.approx(skew, abs=1e-9)
    assert row[m.columns.index("kurt_avg_temp_w5")] == pytest.approx(kurt, abs=1e-9)
    # scipy agrees too
    assert skew == pytest.approx(scipy.stats.skew(vals, bias=True), abs=1e-12)
    assert kurt == pytest.approx(scipy.stats.kurtosis(vals, fisher=True, bias=True), abs=1e-12)


def test_default_schema_has_40_columns():
    assert len(data.feature_columns()) == 40


def test_features_finite_for_generated_fleet():
    fleet = generate_synthetic_fleet(n_batteries=3, max_cycles=400, seed=2)
    for trace in fleet.traces:
        m = engineer_features(trace)
        assert np.isfinite(m.values).all()
        assert m.values.shape == (trace.t_f - 100 + 1, 40)


def test_rul_targets_strictly_decreasing_by_one():
    fleet = generate_synthetic_fleet(n_batteries=2, max_cycles=400, seed=6)
    m = engineer_features(fleet.traces[0])
    assert np.array_equal(np.diff(m.targets), -np.ones(m.n_rows - 1))
    assert m.targets[-1] == 0.0


def test_short_history_shrinks_window():
    trace = make_trace([1.0] * 10, t_f=10)
    m = engineer_features(trace, window=50, activation_cycle=2)
    assert m.n_rows == 9
    assert np.isfinite(m.values).all()


def test_engineer_features_requires_activation_history():
    trace = make_trace([1.0] * 5, t_f=5)
    with pytest.raises(DataError):
        engineer_features(trace, activation_cycle=10)


# ---------------------------------------------------------------------------
# RUL targets
# ---------------------------------------------------------------------------


def test_rul_target_zero_at_failure():
    trace = make_trace([1.0] * 150, t_f=150)
    targets = data.compute_rul_targets(trace, activation_cycle=100)
    assert targets[-1] == 0.0


def test_rul_targets_count_and_range():
    trace = make_trace([1.0] * 150, t_f=150)
    targets = data.compute_rul_targets(trace, activation_cycle=100)
    assert targets.shape == (51,)
    assert targets[0] == 50.0


def test_rul_targets_empty_when_failed_before_activation(caplog):
    trace = make_trace([1.0] * 90, t_f=90)
    with caplog.at_level(logging.WARNING):
        targets = data.compute_rul_targets(trace, activation_cycle=100)
    assert targets.size == 0


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def test_normalize_endpoints_and_midpoint():
    scaled, params = normalize(np.array([[2.0], [4.0], [6.0]]))
    assert scaled[:, 0] == pytest.approx([0.0, 0.5, 1.0])
    assert params.minima[0] == 2.0 and params.maxima[0] == 6.0


def test_normalize_constant_column_maps_to_zero():
    scaled, _ = normalize(np.full((4, 2), 3.3))
    assert np.array_equal(scaled, np.zeros((4, 2)))


def test_normalize_with_stored_params_clamps():
    _, params = normalize(np.array([[0.0], [10.0]]))
    scaled, _ = normalize(np.array([[-20.0], [5.0], [40.0]]), params)
    assert scaled[:, 0] == pytest.approx([-0.5, 0.5, 1.5])


@given(
    arrays(
        np.float64,
        (7, 3),
        elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
    )
)
@settings(max_examples=50, deadline=None)
def test_normalize_denormalize_round_trip(values):
    scaled, params = normalize(values)
    back = data.denormalize(scaled, params)
    span = params.maxima - params.minima
    recovered = back[:, span > 0]
    assert np.allclose(recovered, values[:, span > 0], atol=1e-9 * (1 + np.abs(values).max()))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def test_split_4_batteries_75_25():
    fleet = generate_synthetic_fleet(n_batteries=4, max_cycles=400, seed=3)
    split_train_test(fleet, 0.75, seed=5)
    assert len(fleet.train_traces()) == 3
    assert len(fleet.test_traces()) == 1


def test_split_two_batteries_half():
    fleet = generate_synthetic_fleet(n_batteries=2, max_cycles=400, seed=3)
    split_train_test(fleet, 0.5, seed=5)
    assert len(fleet.train_traces()) == 1
    assert len(fleet.test_traces()) == 1


def test_split_same_seed_same_assignment():
    a = generate_synthetic_fleet(n_batteries=8, max_cycles=400, seed=3)
    b = generate_synthetic_fleet(n_batteries=8, max_cycles=400, seed=3)
    split_train_test(a, 0.75, seed=21)
    split_train_test(b, 0.75, seed=21)
    assert a.split == b.split


def test_split_is_battery_level_partition():
    fleet = generate_synthetic_fleet(n_batteries=9, max_cycles=400, seed=3)
    split_train_test(fleet, 0.6, seed=2)
    train = {t.battery_id for t in fleet.train_traces()}
    test = {t.battery_id for t in fleet.test_traces()}
    assert train.isdisjoint(test)
    assert train | test == {t.battery_id for t in fleet.traces}


def test_split_rejects_bad_inputs():
    fleet = generate_synthetic_fleet(n_batteries=4, max_cycles=400, seed=3)
    with pytest.raises(DataError):
        split_train_test(fleet, 1.5, seed=0)
    tiny = data.Fleet(fleet.traces[:1])
    with pytest.raises(DataError):
        split_train_test(tiny, 0.5, seed=0)
