"""Replacement-policy economics.

Pure functions over immutable inputs: per-cycle prediction error, the
predictive replacement trigger, long-run average cost rate, the age-based
periodic trigger optimization, unused life, unavailable days and the fleet
aggregation that feeds the comparison tables. Conventions:

* preventive replacement requires ``t* + t_c < t_f`` (strict); everything
  else, including "never triggered", is corrective at cost ``c_f / t_f``;
* unused life follows the literal formula ``t_f - (t* + t_c + t_m)`` and may
  go negative when the replacement window straddles the failure;
* a zero replacement age (``t* + t_c == 0``) has infinite cost rate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, DataError

DEFAULT_DELTA_CANDIDATES = (10.0, 25.0, 50.0, 100.0)


@dataclass(frozen=True)
class ReplacementEconomics:
    replace_cost: float = 10.0  # c_r, early replacement
    failure_cost: float = 50.0  # c_f, catastrophic failure
    crew_delay: int = 5  # t_c, periods until the crew arrives
    replace_duration: int = 2  # t_m, periods a replacement takes
    delta_candidates: tuple[float, ...] = DEFAULT_DELTA_CANDIDATES
    alpha: float = 1.0  # retraining cost-rate threshold

    def __post_init__(self):
        if not self.replace_cost > 0:
            raise DataError("replace_cost must be positive")
        if self.failure_cost < self.replace_cost:
            raise DataError("failure_cost must be >= replace_cost")
        if self.crew_delay < 0 or self.replace_duration < 0:
            raise DataError("crew_delay and replace_duration must be >= 0")
        if any(d < 0 for d in self.delta_candidates):
            raise DataError("delta candidates must be >= 0")
        if not self.alpha > 0:
            raise DataError("alpha must be positive")


@dataclass(frozen=True)
class BatteryOutcome:
    battery_id: str
    trigger_time: int | None
    kind: str  # preventive | corrective
    cost_rate: float
    unused_life: float | None  # preventive only
    unavailable_days: float


@dataclass
class FleetReport:
    """Aggregated policy outcomes for one fleet evaluation."""

    policy: str  # "predictive" | "periodic"
    trigger_time: int | None  # fixed age for periodic, None for predictive
    threshold: float | None  # delta for predictive, None for periodic
    n_preventive: int
    n_corrective: int
    mean_unused_life: float | None  # over replaced batteries only
    mean_unavailable_days: float
    mean_cost_rate: float
    outcomes: list[BatteryOutcome] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "trigger_time": self.trigger_time,
            "n_preventive": self.n_preventive,
            "n_corrective": self.n_corrective,
            "mean_unused_life": self.mean_unused_life,
            "mean_unavailable_days": self.mean_unavailable_days,
            "mean_cost_rate": self.mean_cost_rate,
            "threshold": self.threshold,
        }


REPORT_COLUMNS = (
    "trigger_time",
    "n_preventive",
    "n_corrective",
    "mean_unused_life",
    "mean_unavailable_days",
    "mean_cost_rate",
    "threshold",
)


def prediction_error(predicted_rul: float, age: float, t_f: float) -> float:
    """Relative deviation of the implied failure time: ((p + t) - t_f) / t_f.

    Positive values overestimate the failure time, negative underestimate.
    """
    if t_f <= 0:
        raise DataError(f"failure time must be positive, got {t_f}")
    return ((predicted_rul + age) - t_f) / t_f


def predictive_trigger_time(predictions, ages, delta: float) -> int | None:
    """Smallest age whose RUL prediction is at or below ``delta``."""
    if len(predictions) != len(ages):
        raise DataError("predictions and ages must align")
    for p, t in zip(predictions, ages):
        if p <= delta:
            return int(t)
    return None


def cost_rate(
    trigger_time: int | None, t_f: int, econ: ReplacementEconomics
) -> tuple[float, str]:
    """Long-run average cost rate and replacement kind for one battery."""
    if t_f <= 0:
        raise DataError(f"failure time must be positive, got {t_f}")
    if trigger_time is not None and trigger_time + econ.crew_delay < t_f:
        age = trigger_time + econ.crew_delay
        return (econ.replace_cost / age if age > 0 else math.inf), "preventive"
    return econ.failure_cost / t_f, "corrective"


def unused_life(trigger_time: int, t_f: int, econ: ReplacementEconomics) -> float:
    """Periods of life given up by a preventive replacement.

    Literal formula; negative when the replacement itself overlaps failure.
    """
    if not trigger_time + econ.crew_delay < t_f:
        raise ContractError("unused_life is defined for preventive replacements only")
    return t_f - (trigger_time + econ.crew_delay + econ.replace_duration)


def unavailable_days(
    trigger_time: int | None, t_f: int, econ: ReplacementEconomics
) -> float:
    """Periods a battery is out of service around its replacement."""
    t_c, t_m = econ.crew_delay, econ.replace_duration
    if trigger_time is not None and trigger_time + t_c < t_f:
        return t_m
    if trigger_time is not None and trigger_time < t_f:
        return (t_c + t_m) - (t_f - trigger_time)
    return t_c + t_m


def battery_outcome(
    battery_id: str, trigger_time: int | None, t_f: int, econ: ReplacementEconomics
) -> BatteryOutcome:
    rate, kind = cost_rate(trigger_time, t_f, econ)
    e_i = unused_life(trigger_time, t_f, econ) if kind == "preventive" else None
    u_i = unavailable_days(trigger_time, t_f, econ)
    return BatteryOutcome(battery_id, trigger_time, kind, rate, e_i, u_i)


def optimal_periodic_trigger(
    failure_times, candidates, econ: ReplacementEconomics
) -> int:
    """Fixed replacement age minimizing the summed cost rate over a fleet.

    Ties break toward the smaller candidate.
    """
    failure_times = list(failure_times)
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise DataError("no candidate trigger times")
    if not failure_times:
        raise DataError("no training failure times")
    best_t, best_cost = None, math.inf
    for t_star in candidates:
        total = sum(cost_rate(t_star, t_f, econ)[0] for t_f in failure_times)
        if total < best_cost:
            best_t, best_cost = t_star, total
    return best_t


def aggregate_outcomes(
    outcomes: list[BatteryOutcome],
    policy: str,
    trigger_time: int | None,
    threshold: float | None,
) -> FleetReport:
    preventive = [o for o in outcomes if o.kind == "preventive"]
    mean_unused = (
        sum(o.unused_life for o in preventive) / len(preventive) if preventive else None
    )
    mean_unavailable = sum(o.unavailable_days for o in outcomes) / len(outcomes)
    mean_cost = sum(o.cost_rate for o in outcomes) / len(outcomes)
    return FleetReport(
        policy=policy,
        trigger_time=trigger_time,
        threshold=threshold,
        n_preventive=len(preventive),
        n_corrective=len(outcomes) - len(preventive),
        mean_unused_life=mean_unused,
        mean_unavailable_days=mean_unavailable,
        mean_cost_rate=mean_cost,
        outcomes=outcomes,
    )


def evaluate_policy(
    fleet_predictions: dict[str, tuple[list[float], list[int]]],
    failure_times: dict[str, int],
    delta: float,
    econ: ReplacementEconomics,
) -> FleetReport:
    """Apply the predictive policy battery by battery and aggregate.

    ``fleet_predictions`` maps battery_id to (per-cycle RUL predictions,
    matching ages); every battery in ``failure_times`` must be present.
    """
    missing = sorted(set(failure_times) - set(fleet_predictions))
    if missing:
        raise DataError(f"predictions missing for batteries: {missing}")
    outcomes = []
    for battery_id in sorted(failure_times):
        preds, ages = fleet_predictions[battery_id]
        t_star = predictive_trigger_time(preds, ages, delta)
        outcomes.append(battery_outcome(battery_id, t_star, failure_times[battery_id], econ))
    return aggregate_outcomes(outcomes, "predictive", None, delta)


def evaluate_periodic_policy(
    failure_times: dict[str, int], trigger_time: int, econ: ReplacementEconomics
) -> FleetReport:
    """Apply one fixed replacement age to every battery and aggregate."""
    outcomes = [
        battery_outcome(bid, trigger_time, t_f, econ)
        for bid, t_f in sorted(failure_times.items())
    ]
    return aggregate_outcomes(outcomes, "periodic", trigger_time, None)


def select_delta(
    fleet_predictions: dict[str, tuple[list[float], list[int]]],
    failure_times: dict[str, int],
    econ: ReplacementEconomics,
    candidates=None,
) -> float:
    """Threshold minimizing the mean cost rate; ties toward the smaller delta."""
    candidates = sorted(set(candidates if candidates is not None else econ.delta_candidates))
    if not candidates:
        raise DataError("no delta candidates")
    best_delta, best_cost = None, math.inf
    for delta in candidates:
        report = evaluate_policy(fleet_predictions, failure_times, delta, econ)
        if report.mean_cost_rate < best_cost:
            best_delta, best_cost = delta, report.mean_cost_rate
    return best_delta


def retraining_trigger(report: FleetReport, alpha: float) -> bool:
    """True when the fleet's mean cost rate strictly exceeds ``alpha``."""
    if not alpha > 0:
        raise DataError("alpha must be positive")
    return report.mean_cost_rate > alpha


def write_report_json(report: FleetReport, path: str | Path,
                      alpha: float | None = None) -> None:
    payload = report.row()
    payload["policy"] = report.policy
    if alpha is not None:
        payload["alpha"] = alpha
        payload["retraining_triggered"] = retraining_trigger(report, alpha)
    payload["outcomes"] = [
        {
            "battery_id": o.battery_id,
            "trigger_time": o.trigger_time,
            "kind": o.kind,
            "cost_rate": o.cost_rate,
            "unused_life": o.unused_life,
            "unavailable_days": o.unavailable_days,
        }
        for o in report.outcomes
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(reports: list[FleetReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            row = report.row()
            writer.writerow(["" if row[c] is None else row[c] for c in REPORT_COLUMNS])


def load_report_json(path: str | Path) -> FleetReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    outcomes = [
        BatteryOutcome(
            battery_id=o["battery_id"],
            trigger_time=o["trigger_time"],
            kind=o["kind"],
            cost_rate=o["cost_rate"],
            unused_life=o["unused_life"],
            unavailable_days=o["unavailable_days"],
        )
        for o in payload.get("outcomes", [])
    ]
    return FleetReport(
        policy=payload["policy"],
        trigger_time=payload["trigger_time"],
        threshold=payload["threshold"],
        n_preventive=payload["n_preventive"],
        n_corrective=payload["n_corrective"],
        mean_unused_life=payload["mean_unused_life"],
        mean_unavailable_days=payload["mean_unavailable_days"],
        mean_cost_rate=payload["mean_cost_rate"],
        outcomes=outcomes,
    )
