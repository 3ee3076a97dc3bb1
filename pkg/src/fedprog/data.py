"""Battery fleet data model and feature engineering.

Covers the synthetic knee-shaped degradation generator, CSV ingestion,
per-cycle feature construction (windowed moments, deltas, capacity and
temperature summaries), min-max normalization and the battery-level
train/test split. A battery fails at the first cycle where discharge
capacity drops below 80% of its nominal capacity.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

FAILURE_CAPACITY_FRACTION = 0.8
DEFAULT_ACTIVATION_CYCLE = 100
DEFAULT_WINDOW = 20

# CSV channel columns, in file order.
CHANNELS = (
    "discharge_capacity",
    "charge_capacity",
    "avg_temp",
    "min_temp",
    "max_temp",
    "internal_resistance",
    "charge_time",
)
CSV_HEADER = ("battery_id", "cycle") + CHANNELS

# Channels whose windowed moments enter the default feature schema.
# min/max temperature moments add little beyond avg_temp and are dropped
# so the default schema lands on 40 columns.
MOMENT_CHANNELS = (
    "discharge_capacity",
    "charge_capacity",
    "avg_temp",
    "internal_resistance",
    "charge_time",
)
MOMENT_NAMES = ("mean", "var", "skew", "kurt")


@dataclass(frozen=True)
class CycleRecord:
    cycle_index: int
    raw_channels: dict[str, float]


@dataclass
class BatteryTrace:
    """One battery's per-cycle channel stream plus its failure time."""

    battery_id: str
    records: list[CycleRecord]
    t_f: int
    nominal_capacity: float

    def __post_init__(self):
        if not self.records:
            raise DataError(f"battery {self.battery_id}: trace has no cycles")
        cycles = [r.cycle_index for r in self.records]
        if cycles != list(range(cycles[0], cycles[0] + len(cycles))):
            raise DataError(f"battery {self.battery_id}: cycles must be sorted and contiguous")
        if self.t_f <= 0 or self.t_f > cycles[-1]:
            raise DataError(
                f"battery {self.battery_id}: t_f={self.t_f} outside trace cycles "
                f"[{cycles[0]}, {cycles[-1]}]"
            )
        channel_set = set(self.records[0].raw_channels)
        for rec in self.records:
            if set(rec.raw_channels) != channel_set:
                raise DataError(f"battery {self.battery_id}: channel set varies across cycles")
            for name, value in rec.raw_channels.items():
                if not math.isfinite(value):
                    raise DataError(
                        f"battery {self.battery_id}: non-finite {name} at cycle {rec.cycle_index}"
                    )

    def __len__(self) -> int:
        return len(self.records)

    def channel(self, name: str) -> np.ndarray:
        return np.array([r.raw_channels[name] for r in self.records])


@dataclass
class Fleet:
    traces: list[BatteryTrace]
    split: dict[str, str] = field(default_factory=dict)  # battery_id -> train|test

    def __len__(self) -> int:
        return len(self.traces)

    def by_id(self, battery_id: str) -> BatteryTrace:
        for trace in self.traces:
            if trace.battery_id == battery_id:
                return trace
        raise KeyError(battery_id)

    def train_traces(self) -> list[BatteryTrace]:
        return [t for t in self.traces if self.split.get(t.battery_id) == "train"]

    def test_traces(self) -> list[BatteryTrace]:
        return [t for t in self.traces if self.split.get(t.battery_id) == "test"]


@dataclass
class FeatureMatrix:
    """Engineered features for a battery's eligible cycles.

    One row per cycle in [activation_cycle, t_f]; ``targets`` holds the
    remaining useful life t_f - cycle for each row, ``ages`` the cycle index.
    """

    battery_id: str
    columns: list[str]
    values: np.ndarray  # [n, d]
    targets: np.ndarray  # [n]
    ages: np.ndarray  # [n] cycle indices

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ShapeError("feature values do not match the column list")
        if self.values.shape[0] != self.targets.shape[0] or self.targets.shape != self.ages.shape:
            raise ShapeError("rows, targets and ages must align")
        if self.values.size and not np.isfinite(self.values).all():
            raise DataError(f"battery {self.battery_id}: non-finite feature values")
        if (self.targets < 0).any():
            raise DataError(f"battery {self.battery_id}: negative RUL target")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormalizationParams:
    """Per-feature (min, max) pairs, always computed per client."""

    minima: np.ndarray
    maxima: np.ndarray

    def __post_init__(self):
        if (self.maxima < self.minima).any():
            raise ShapeError("normalization max < min")


# ---------------------------------------------------------------------------
# Synthetic fleet generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticParams:
    """Knee-shaped capacity fade: q(n) = q0 (1 - a n - b exp(c (n - knee))).

    Per-battery (a, b, c, knee) are drawn uniformly from the ranges below.
    Lifetimes are dominated by the knee location, giving a wide spread the
    way real fleets show.
    """

    nominal_capacity: float = 1.1
    linear_fade: tuple[float, float] = (1.0e-4, 3.0e-4)  # a
    knee_scale: tuple[float, float] = (0.010, 0.030)  # b
    knee_rate: tuple[float, float] = (0.030, 0.080)  # c
    knee_fraction: tuple[float, float] = (0.30, 0.80)  # knee as fraction of max_cycles
    # cycles the slowest default knee needs to reach the 80% line; the knee
    # draw is capped at max_cycles minus this so every trace crosses
    knee_headroom: int = 170
    capacity_noise: float = 4.0e-3
    base_resistance: float = 0.016
    base_temp: float = 30.0
    base_charge_time: float = 12.0
    # noise scale of the auxiliary telemetry channels
    distractor_noise: float = 1.0


def generate_synthetic_fleet(
    n_batteries: int = 40,
    max_cycles: int = 500,
    seed: int = 0,
    params: SyntheticParams | None = None,
    activation_cycle: int = DEFAULT_ACTIVATION_CYCLE,
) -> Fleet:
    """Build a seeded fleet of knee-fade traces ending at their failure cycle."""
    if n_batteries < 2:
        raise DataError(f"need at least 2 batteries, got {n_batteries}")
    p = params or SyntheticParams()
    knee_lo = p.knee_fraction[0] * max_cycles
    knee_hi = min(p.knee_fraction[1] * max_cycles, max_cycles - p.knee_headroom)
    if knee_hi <= knee_lo:
        raise DataError(
            f"max_cycles={max_cycles} leaves no room for a knee before the "
            f"failure headroom of {p.knee_headroom} cycles"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    traces = []
    for i in range(n_batteries):
        battery_id = f"B{i:03d}"
        a = rng.uniform(*p.linear_fade)
        b = rng.uniform(*p.knee_scale)
        c = rng.uniform(*p.knee_rate)
        knee = rng.uniform(knee_lo, knee_hi)
        trace = _synthesize_trace(battery_id, p, a, b, c, knee, max_cycles, rng)
        if trace.t_f <= activation_cycle:
            raise DataError(
                f"battery {battery_id}: t_f={trace.t_f} not past activation cycle "
                f"{activation_cycle}; widen knee_fraction or max_cycles"
            )
        traces.append(trace)
    return Fleet(traces)


def _synthesize_trace(
    battery_id: str,
    p: SyntheticParams,
    a: float,
    b: float,
    c: float,
    knee: float,
    max_cycles: int,
    rng: np.random.Generator,
) -> BatteryTrace:
    q0 = p.nominal_capacity
    n = np.arange(1, max_cycles + 1, dtype=np.float64)
    # exponent clipped so b=0 stays finite (0 * exp(huge) would be nan)
    knee_term = b * np.exp(np.minimum(c * (n - knee), 50.0))
    true_capacity = q0 * (1.0 - a * n - knee_term)
    noise = p.capacity_noise * q0 * p.distractor_noise

    # Knees are sharp, so the measured discharge capacity alone gives little
    # advance warning above its own noise. Every channel is an independent
    # noisy observation of the same degradation state, and resistance and
    # temperature respond to the accelerating component before it shows up
    # in capacity, the way they lead capacity loss in real cells. No single
    # channel is clean; fusing them is what buys prediction lead time.
    fade = 1.0 - true_capacity / q0  # grows from ~0 towards 0.2
    onset = knee_term  # the accelerating component
    discharge_capacity = true_capacity + rng.normal(0.0, noise, size=n.size)
    charge_capacity = true_capacity * rng.normal(1.004, 0.003, size=n.size) + rng.normal(
        0.0, noise, size=n.size
    )
    resistance = p.base_resistance * (1.0 + 0.4 * fade + 2.5 * onset) + rng.normal(
        0, 2e-3 * p.distractor_noise, size=n.size
    )
    temp_base = p.base_temp + 2.0 * fade + 25.0 * onset
    temp_noise = 1.2 * p.distractor_noise
    avg_temp = temp_base + rng.normal(0, temp_noise, size=n.size)
    temp_spread = np.abs(rng.normal(2.5, p.distractor_noise, size=n.size)) + 0.5
    min_temp = temp_base - temp_spread + rng.normal(0, temp_noise, size=n.size)
    max_temp = temp_base + temp_spread + rng.normal(0, temp_noise, size=n.size)
    charge_time = p.base_charge_time * (1.0 + 0.2 * fade + 1.5 * onset) + rng.normal(
        0, 0.6 * p.distractor_noise, size=n.size
    )

    below = np.nonzero(discharge_capacity < FAILURE_CAPACITY_FRACTION * q0)[0]
    if below.size == 0:
        raise DataError(
            f"battery {battery_id}: capacity never crossed "
            f"{FAILURE_CAPACITY_FRACTION:.0%} of nominal within {max_cycles} cycles"
        )
    t_f = int(below[0]) + 1

    records = []
    for k in range(t_f):
        records.append(
            CycleRecord(
                cycle_index=k + 1,
                raw_channels={
                    "discharge_capacity": float(discharge_capacity[k]),
                    "charge_capacity": float(charge_capacity[k]),
                    "avg_temp": float(avg_temp[k]),
                    "min_temp": float(min_temp[k]),
                    "max_temp": float(max_temp[k]),
                    "internal_resistance": float(resistance[k]),
                    "charge_time": float(charge_time[k]),
                },
            )
        )
    return BatteryTrace(battery_id, records, t_f, q0)


def recompute_failure_time(trace_capacity: np.ndarray, nominal: float) -> int | None:
    """First cycle (1-based) where capacity < 80% nominal, or None."""
    below = np.nonzero(np.asarray(trace_capacity) < FAILURE_CAPACITY_FRACTION * nominal)[0]
    return int(below[0]) + 1 if below.size else None


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv(manifest_path: str | Path) -> Fleet:
    """Load a fleet from a manifest of per-battery CSV files.

    Manifest columns: ``path`` (required, relative paths resolve against the
    manifest), ``t_f`` (optional override), ``nominal_capacity`` (optional;
    defaults to the first cycle's discharge capacity).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    entries = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames:
            raise DataError(f"{manifest_path}: manifest needs a header with a 'path' column")
        for line_no, row in enumerate(reader, start=2):
            entries.append((line_no, row))
    if not entries:
        log.warning("manifest %s lists no batteries; returning an empty fleet", manifest_path)
        return Fleet([])

    traces = []
    for line_no, row in entries:
        csv_path = Path(row["path"])
        if not csv_path.is_absolute():
            csv_path = manifest_path.parent / csv_path
        t_f_override = _parse_optional_int(row.get("t_f"), manifest_path, line_no, "t_f")
        nominal = _parse_optional_float(
            row.get("nominal_capacity"), manifest_path, line_no, "nominal_capacity"
        )
        traces.append(_load_battery_csv(csv_path, t_f_override, nominal))
    return Fleet(traces)


def _parse_optional_int(raw, path, line_no, name) -> int | None:
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{path}:{line_no}: {name} must be an integer, got {raw!r}") from None


def _parse_optional_float(raw, path, line_no, name) -> float | None:
    if raw is None or raw.strip() == "":
        return None
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"{path}:{line_no}: {name} must be a number, got {raw!r}") from None


def _load_battery_csv(path: Path, t_f_override: int | None, nominal: float | None) -> BatteryTrace:
    if not path.exists():
        raise DataError(f"battery CSV not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: file is empty") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        col = {name: header.index(name) for name in CSV_HEADER}

        battery_id = None
        records = []
        prev_cycle = 0
        for line_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if battery_id is None:
                battery_id = cells[col["battery_id"]]
            elif cells[col["battery_id"]] != battery_id:
                raise DataError(f"{path}:{line_no}: multiple battery_ids in one file")
            try:
                cycle = int(cells[col["cycle"]])
                channels = {name: float(cells[col[name]]) for name in CHANNELS}
            except (ValueError, IndexError):
                raise DataError(f"{path}:{line_no}: non-numeric or missing cell") from None
            for name, value in channels.items():
                if not math.isfinite(value):
                    raise DataError(f"{path}:{line_no}: non-finite {name}")
            if cycle != prev_cycle + 1:
                raise DataError(
                    f"{path}:{line_no}: cycles must be contiguous ascending from 1, got {cycle}"
                )
            prev_cycle = cycle
            records.append(CycleRecord(cycle, channels))

    if not records:
        raise DataError(f"{path}: no cycle rows")
    if battery_id is None or battery_id == "":
        raise DataError(f"{path}: blank battery_id")
    capacity = np.array([r.raw_channels["discharge_capacity"] for r in records])
    if nominal is None:
        nominal = float(capacity[0])
    t_f = t_f_override
    if t_f is None:
        t_f = recompute_failure_time(capacity, nominal)
        if t_f is None:
            raise DataError(
                f"{path}: capacity never crossed {FAILURE_CAPACITY_FRACTION:.0%} of nominal "
                f"{nominal}; add a t_f override to the manifest"
            )
    return BatteryTrace(battery_id, records, t_f, nominal)


def write_fleet_csv(fleet: Fleet, out_dir: str | Path) -> Path:
    """Write one CSV per battery plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "fleet_manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as mf:
        writer = csv.writer(mf, lineterminator="\n")
        writer.writerow(["path", "t_f", "nominal_capacity"])
        for trace in fleet.traces:
            name = f"{trace.battery_id}.csv"
            with open(out_dir / name, "w", newline="", encoding="utf-8") as bf:
                bwriter = csv.writer(bf, lineterminator="\n")
                bwriter.writerow(CSV_HEADER)
                for rec in trace.records:
                    bwriter.writerow(
                        [trace.battery_id, rec.cycle_index]
                        + [repr(rec.raw_channels[c]) for c in CHANNELS]
                    )
            writer.writerow([name, trace.t_f, repr(trace.nominal_capacity)])
    return manifest_path


# ---------------------------------------------------------------------------
# Feature engineering
# ---------------------------------------------------------------------------


def _moments(window: np.ndarray) -> tuple[float, float, float, float]:
    """Population mean/variance, skewness g1 and excess kurtosis g2.

    Skewness and kurtosis degenerate to 0 when the variance underflows.
    """
    mean = float(window.mean())
    centered = window - mean
    m2 = float(np.mean(centered ** 2))
    if m2 < 1e-12:
        return mean, m2, 0.0, 0.0
    m3 = float(np.mean(centered ** 3))
    m4 = float(np.mean(centered ** 4))
    return mean, m2, m3 / m2 ** 1.5, m4 / m2 ** 2 - 3.0


def feature_columns(windows: tuple[int, ...] = (DEFAULT_WINDOW,)) -> list[str]:
    """Feature schema, in matrix order.

    The single-window default yields 40 columns; extra windows add their
    mean/variance/slope per moment channel, multi-scale style, up to the
    70-odd columns real fleets use. The first window carries the full four
    moments.
    """
    cols = [f"raw_{c}" for c in CHANNELS]
    cols += [f"delta_{c}" for c in CHANNELS]
    base, *extra = windows
    for c in MOMENT_CHANNELS:
        cols += [f"{m}_{c}_w{base}" for m in MOMENT_NAMES]
    for w in extra:
        for c in MOMENT_CHANNELS:
            cols += [f"mean_{c}_w{w}", f"var_{c}_w{w}"]
    cols += [
        "cycle_index",
        "capacity_fade",
        "min_discharge_capacity",
        "temp_range",
        "coulombic_ratio",
    ]
    cols += [f"capacity_slope_w{w}" for w in windows]
    return cols


def engineer_features(
    trace: BatteryTrace,
    window: int | tuple[int, ...] = DEFAULT_WINDOW,
    activation_cycle: int = DEFAULT_ACTIVATION_CYCLE,
) -> FeatureMatrix:
    """Per-cycle features for cycles in [activation_cycle, t_f].

    ``window`` may be a single lookback or a tuple of them (multi-scale).
    Windows shorter than the available history shrink to the prefix; deltas
    at cycle 1 are 0.
    """
    windows = (window,) if isinstance(window, int) else tuple(window)
    if not windows or any(w < 1 for w in windows):
        raise DataError(f"bad window spec {windows}")
    if len(trace) < activation_cycle:
        raise DataError(
            f"battery {trace.battery_id}: trace length {len(trace)} is shorter than "
            f"activation cycle {activation_cycle}"
        )
    channels = {name: trace.channel(name) for name in CHANNELS}
    first_cycle = trace.records[0].cycle_index
    last = min(trace.t_f, trace.records[-1].cycle_index)
    eligible = [k for k in range(activation_cycle, last + 1)]
    if not eligible:
        log.warning("battery %s: no eligible cycles (t_f < activation)", trace.battery_id)

    base, *extra = windows
    columns = feature_columns(windows)
    rows = np.empty((len(eligible), len(columns)))
    dc = channels["discharge_capacity"]
    running_min = np.minimum.accumulate(dc)
    for r, k in enumerate(eligible):
        i = k - first_cycle  # array index of cycle k
        vals = [channels[c][i] for c in CHANNELS]
        vals += [channels[c][i] - channels[c][i - 1] if i > 0 else 0.0 for c in CHANNELS]
        lo_base = max(0, i - base + 1)
        for c in MOMENT_CHANNELS:
            vals.extend(_moments(channels[c][lo_base : i + 1]))
        for w in extra:
            lo = max(0, i - w + 1)
            for c in MOMENT_CHANNELS:
                seg = channels[c][lo : i + 1]
                mean = float(seg.mean())
                vals += [mean, float(np.mean((seg - mean) ** 2))]
        vals += [
            float(k),
            dc[i] / trace.nominal_capacity,
            float(running_min[i]),
            channels["max_temp"][i] - channels["min_temp"][i],
            dc[i] / max(channels["charge_capacity"][i], 1e-12),
        ]
        for w in windows:
            lo = max(0, i - w + 1)
            vals.append((dc[i] - dc[lo]) / max(1, i - lo))
        rows[r] = vals

    ages = np.array(eligible, dtype=np.int64)
    targets = (trace.t_f - ages).astype(np.float64)
    return FeatureMatrix(trace.battery_id, columns, rows, targets, ages)


def compute_rul_targets(trace: BatteryTrace, activation_cycle: int) -> np.ndarray:
    """RUL targets t_f - k for activation_cycle <= k <= t_f."""
    if activation_cycle < 1:
        raise DataError(f"activation cycle must be >= 1, got {activation_cycle}")
    if trace.t_f < activation_cycle:
        log.warning(
            "battery %s fails at %d before activation cycle %d; empty targets",
            trace.battery_id, trace.t_f, activation_cycle,
        )
        return np.empty(0)
    ages = np.arange(activation_cycle, trace.t_f + 1)
    return (trace.t_f - ages).astype(np.float64)


# ---------------------------------------------------------------------------
# Normalization and splits
# ---------------------------------------------------------------------------

CLAMP_LO = -0.5
CLAMP_HI = 1.5


def normalize(
    values: np.ndarray, params: NormalizationParams | None = None
) -> tuple[np.ndarray, NormalizationParams]:
    """Min-max scale each feature to [0, 1] using per-client statistics.

    Constant features map to 0. When ``params`` is supplied (test-time reuse
    of stored statistics), scaled values are clamped to [-0.5, 1.5].
    """
    values = np.asarray(values, dtype=np.float64)
    fitted = params is None
    if params is None:
        params = NormalizationParams(values.min(axis=0), values.max(axis=0))
    span = params.maxima - params.minima
    safe_span = np.where(span > 0.0, span, 1.0)
    scaled = (values - params.minima) / safe_span
    scaled = np.where(span > 0.0, scaled, 0.0)
    if not fitted:
        scaled = np.clip(scaled, CLAMP_LO, CLAMP_HI)
    return scaled, params


def denormalize(scaled: np.ndarray, params: NormalizationParams) -> np.ndarray:
    span = params.maxima - params.minima
    return scaled * span + params.minima


def split_train_test(fleet: Fleet, ratio: float, seed: int) -> Fleet:
    """Battery-level split: round(ratio * n) batteries train, rest test."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(fleet) < 2:
        raise DataError("cannot split a fleet with fewer than 2 batteries")
    ids = sorted(t.battery_id for t in fleet.traces)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5911]))
    order = rng.permutation(len(ids))
    n_train = int(math.floor(ratio * len(ids) + 0.5))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = {ids[i] for i in order[:n_train]}
    fleet.split = {bid: ("train" if bid in train_ids else "test") for bid in ids}
    return fleet
