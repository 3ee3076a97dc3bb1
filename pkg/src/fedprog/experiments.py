"""End-to-end experiment orchestration and report emission.

Reads an INI-style config, builds or loads a fleet, trains every requested
pipeline variant on the identical train/test split, evaluates the predictive
policy across the threshold candidates against the optimized age-based
periodic baseline, and writes the report bundle:

    report_<variant>.json / .csv   policy outcomes (one CSV row per threshold)
    buckets_<variant>.csv          prediction error by degradation decile
    messages_<variant>.jsonl       the audited message log
    comparison.csv                 side-by-side table with cost-rate improvement
    resolved_config.ini            the exact configuration that ran
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import federation, policy
from .data import (
    DEFAULT_ACTIVATION_CYCLE,
    DEFAULT_WINDOW,
    FeatureMatrix,
    Fleet,
    engineer_features,
    generate_synthetic_fleet,
    load_csv,
    split_train_test,
)
from .errors import ConfigError, FedprogError, StageError
from .federation import FederationSchedule, NetworkConfig, TrainedModel
from .policy import FleetReport, ReplacementEconomics

COMPARISON_ROWS = (
    "Trigger Time",
    "# Preventive",
    "# Corrective",
    "Unused Life",
    "Unavailable Days",
    "Cost Rate",
)

PAPER_SCALE_ROUNDS = (2000, 7500)


@dataclass
class ExperimentConfig:
    # data
    source: str = "synthetic"
    n_batteries: int = 40
    max_cycles: int = 500
    data_seed: int = 0
    manifest: Path | None = None
    activation_cycle: int = DEFAULT_ACTIVATION_CYCLE
    window: tuple[int, ...] = (DEFAULT_WINDOW,)
    # split
    split_ratio: float = 0.75
    split_seed: int = 0
    # training
    schedule: FederationSchedule = field(default_factory=FederationSchedule)
    net_config: NetworkConfig = field(default_factory=NetworkConfig)
    econ: ReplacementEconomics = field(default_factory=ReplacementEconomics)
    train_seed: int = 0
    # experiment
    variants: tuple[str, ...] = ("fully-federated",)
    cluster_counts: tuple[int, ...] = ()
    output_dir: Path = Path("out")
    paper_scale: bool = False


def _get(parser, section, key, cast, default=None, required=False):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r}: expected {cast.__name__}") from None
    if required:
        raise ConfigError(f"missing required key [{section}] {key}")
    return default


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    source = _get(parser, "data", "source", str, "synthetic")
    if source not in ("synthetic", "csv"):
        raise ConfigError(f"[data] source must be synthetic or csv, got {source!r}")
    manifest = _get(parser, "data", "manifest", str)
    if source == "csv":
        if manifest is None:
            raise ConfigError("csv source needs [data] manifest")
        manifest = Path(manifest)
        if not manifest.is_absolute():
            manifest = path.parent / manifest
        if not manifest.exists():
            raise ConfigError(f"[data] manifest does not exist: {manifest}")
    else:
        manifest = None

    paper_scale = _get(parser, "experiment", "paper_scale", bool, False)
    default_ae, default_rul = (
        PAPER_SCALE_ROUNDS if paper_scale else (
            FederationSchedule.rounds_autoencoder, FederationSchedule.rounds_rul)
    )
    schedule = FederationSchedule(
        rounds_autoencoder=_get(parser, "federation", "rounds_autoencoder", int, default_ae),
        rounds_rul=_get(parser, "federation", "rounds_rul", int, default_rul),
        clients_per_round=_get(parser, "federation", "clients_per_round", int, 10),
        data_ratio=_get(parser, "federation", "data_ratio", float, 0.5),
        epochs=_get(parser, "federation", "epochs", int, 5),
        batch_size=_get(parser, "federation", "batch_size", int, 32),
    )
    net_config = NetworkConfig(
        bottleneck=_get(parser, "network", "bottleneck", int, 30),
        learning_rate=_get(parser, "network", "learning_rate", float, 1e-3),
    )
    thresholds = _get(parser, "economics", "thresholds", str, "10,25,50,100")
    econ = ReplacementEconomics(
        replace_cost=_get(parser, "economics", "replace_cost", float, 10.0),
        failure_cost=_get(parser, "economics", "failure_cost", float, 50.0),
        crew_delay=_get(parser, "economics", "crew_delay", int, 5),
        replace_duration=_get(parser, "economics", "replace_duration", int, 2),
        delta_candidates=tuple(float(x) for x in thresholds.split(",") if x.strip()),
        alpha=_get(parser, "economics", "alpha", float, 1.0),
    )
    variants_raw = _get(parser, "experiment", "variants", str, "fully-federated")
    variants = tuple(v.strip() for v in variants_raw.split(",") if v.strip())
    for v in variants:
        if v not in federation.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; pick from {federation.VARIANTS}")
    clusters_raw = _get(parser, "experiment", "clusters", str, "")
    cluster_counts = tuple(int(c) for c in clusters_raw.split(",") if c.strip())
    if "batch-federated" in variants and not cluster_counts:
        raise ConfigError("batch-federated variant needs [experiment] clusters")

    window_raw = _get(parser, "data", "window", str, str(DEFAULT_WINDOW))
    try:
        window = tuple(int(w) for w in window_raw.split(",") if w.strip())
    except ValueError:
        raise ConfigError(f"[data] window = {window_raw!r}: expected ints") from None

    return ExperimentConfig(
        source=source,
        n_batteries=_get(parser, "data", "batteries", int, 40),
        max_cycles=_get(parser, "data", "max_cycles", int, 500),
        data_seed=_get(parser, "data", "seed", int, required=True),
        manifest=manifest,
        activation_cycle=_get(parser, "data", "activation_cycle", int, DEFAULT_ACTIVATION_CYCLE),
        window=window,
        split_ratio=_get(parser, "split", "ratio", float, 0.75),
        split_seed=_get(parser, "split", "seed", int, required=True),
        schedule=schedule,
        net_config=net_config,
        econ=econ,
        train_seed=_get(parser, "experiment", "seed", int, required=True),
        variants=variants,
        cluster_counts=cluster_counts,
        output_dir=Path(_get(parser, "experiment", "output_dir", str, "out")),
        paper_scale=paper_scale,
    )


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser["data"] = {
        "source": config.source,
        "batteries": str(config.n_batteries),
        "max_cycles": str(config.max_cycles),
        "seed": str(config.data_seed),
        "activation_cycle": str(config.activation_cycle),
        "window": ",".join(str(w) for w in config.window),
    }
    if config.manifest is not None:
        parser["data"]["manifest"] = str(config.manifest)
    parser["split"] = {"ratio": repr(config.split_ratio), "seed": str(config.split_seed)}
    parser["federation"] = {
        "rounds_autoencoder": str(config.schedule.rounds_autoencoder),
        "rounds_rul": str(config.schedule.rounds_rul),
        "clients_per_round": str(config.schedule.clients_per_round),
        "data_ratio": repr(config.schedule.data_ratio),
        "epochs": str(config.schedule.epochs),
        "batch_size": str(config.schedule.batch_size),
    }
    parser["network"] = {
        "bottleneck": str(config.net_config.bottleneck),
        "learning_rate": repr(config.net_config.learning_rate),
    }
    parser["economics"] = {
        "replace_cost": repr(config.econ.replace_cost),
        "failure_cost": repr(config.econ.failure_cost),
        "crew_delay": str(config.econ.crew_delay),
        "replace_duration": str(config.econ.replace_duration),
        "thresholds": ",".join(repr(d) for d in config.econ.delta_candidates),
        "alpha": repr(config.econ.alpha),
    }
    parser["experiment"] = {
        "variants": ",".join(config.variants),
        "clusters": ",".join(str(c) for c in config.cluster_counts),
        "seed": str(config.train_seed),
        "output_dir": str(config.output_dir),
        "paper_scale": str(config.paper_scale).lower(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Degradation-percentile error buckets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BucketStats:
    decile: int
    count: int
    mean_error: float
    median_error: float
    mean_abs_error: float
    q25: float
    q75: float


@dataclass
class DegradationBucketSummary:
    buckets: list[BucketStats]

    def by_decile(self) -> dict[int, BucketStats]:
        return {b.decile: b for b in self.buckets}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["decile", "count", "mean_error", "median_error", "mean_abs_error", "q25", "q75"]
            )
            for b in self.buckets:
                writer.writerow(
                    [b.decile, b.count, b.mean_error, b.median_error,
                     b.mean_abs_error, b.q25, b.q75]
                )


def life_fraction_decile(age: int, t_f: int) -> int:
    """Decile bucket of a cycle: floor(10 k / t_f), clamped to [1, 9]."""
    return min(9, max(1, math.floor(10 * age / t_f)))


def bucket_errors(
    predictions: dict[str, tuple[list[float], list[int]]],
    failure_times: dict[str, int],
) -> DegradationBucketSummary:
    """Group per-cycle prediction errors by life-fraction decile."""
    per_bucket: dict[int, list[float]] = {d: [] for d in range(1, 10)}
    for battery_id in sorted(predictions):
        preds, ages = predictions[battery_id]
        t_f = failure_times[battery_id]
        for p, t in zip(preds, ages):
            err = policy.prediction_error(p, t, t_f)
            per_bucket[life_fraction_decile(t, t_f)].append(err)
    buckets = []
    for decile in range(1, 10):
        errs = np.array(per_bucket[decile])
        if errs.size == 0:
            buckets.append(BucketStats(decile, 0, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        buckets.append(
            BucketStats(
                decile,
                int(errs.size),
                float(errs.mean()),
                float(np.median(errs)),
                float(np.abs(errs).mean()),
                float(np.percentile(errs, 25)),
                float(np.percentile(errs, 75)),
            )
        )
    return DegradationBucketSummary(buckets)


# ---------------------------------------------------------------------------
# Policy comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    labels: list[str]
    rows: list[tuple[str, list]]
    improvements: dict[str, float]  # label -> cost-rate improvement vs first

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric"] + self.labels)
            for name, values in self.rows:
                writer.writerow([name] + ["" if v is None else v for v in values])


def compare_policies(reports: list[FleetReport], labels: list[str]) -> ComparisonTable:
    """Side-by-side table of the six summary metrics plus the percentage
    cost-rate improvement of each policy over the first one."""
    if len(reports) < 2:
        raise FedprogError("need at least two reports to compare")
    if len(reports) != len(labels):
        raise FedprogError("one label per report, please")
    fleets = [frozenset(o.battery_id for o in r.outcomes) for r in reports]
    if any(f != fleets[0] for f in fleets[1:]) or not fleets[0]:
        raise FedprogError("reports cover different test fleets; comparison would be unpaired")

    def trigger_cell(r: FleetReport):
        return r.trigger_time if r.policy == "periodic" else "Predicted"

    rows = [
        ("Trigger Time", [trigger_cell(r) for r in reports]),
        ("# Preventive", [r.n_preventive for r in reports]),
        ("# Corrective", [r.n_corrective for r in reports]),
        ("Unused Life", [r.mean_unused_life for r in reports]),
        ("Unavailable Days", [r.mean_unavailable_days for r in reports]),
        ("Cost Rate", [r.mean_cost_rate for r in reports]),
    ]
    base = reports[0].mean_cost_rate
    improvements = {
        label: (base - r.mean_cost_rate) / base for label, r in zip(labels, reports)
    }
    rows.append(
        (f"Cost Rate Improvement vs {labels[0]} (%)",
         [100.0 * improvements[label] for label in labels])
    )
    return ComparisonTable(list(labels), rows, improvements)


def cost_rate_improvement(base: float, new: float) -> float:
    """Fractional cost-rate improvement: (base - new) / base."""
    return (base - new) / base


# ---------------------------------------------------------------------------
# Model persistence (used by the CLI train/evaluate split)
# ---------------------------------------------------------------------------


def save_model(model: TrainedModel, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = {"rul": (model.rul, federation.STAGE_RUL)}
    if model.encoder is not None:
        parts["encoder"] = (model.encoder, federation.STAGE_AUTOENCODER)
        parts["decoder"] = (model.decoder, federation.STAGE_AUTOENCODER)
    for name, (frozen, stage) in parts.items():
        data = federation.encode_update(
            federation.ModelUpdate("global", stage, (frozen.snapshot,), 0)
        )
        (out_dir / f"{name}.bin").write_bytes(data)
    meta = {
        "mode": model.mode,
        "input_width": model.input_width,
        "bottleneck": model.net_config.bottleneck,
        "rul_hidden": list(model.net_config.rul_hidden),
        "learning_rate": model.net_config.learning_rate,
        "diode_audited": model.diode_audited,
        "checksums": {name: frozen.checksum for name, (frozen, _) in parts.items()},
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out_dir


def load_model(model_dir: str | Path) -> TrainedModel:
    model_dir = Path(model_dir)
    meta_path = model_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"no trained model at {model_dir} (meta.json missing)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    net_config = NetworkConfig(
        bottleneck=meta["bottleneck"],
        rul_hidden=tuple(meta["rul_hidden"]),
        learning_rate=meta["learning_rate"],
    )

    def read_part(name: str) -> federation.FrozenWeights:
        update = federation.decode_update((model_dir / f"{name}.bin").read_bytes())
        frozen = federation.FrozenWeights.freeze(update.snapshots[0])
        if frozen.checksum != meta["checksums"][name]:
            raise ConfigError(f"{model_dir}/{name}.bin does not match its recorded checksum")
        return frozen

    encoder = decoder = None
    if "encoder" in meta["checksums"]:
        encoder = read_part("encoder")
        decoder = read_part("decoder")
    rul = read_part("rul")
    return TrainedModel(
        mode=meta["mode"],
        input_width=meta["input_width"],
        encoder=encoder,
        decoder=decoder,
        rul=rul,
        net_config=net_config,
        message_log=federation.MessageLog(),
        diode_audited=meta["diode_audited"],
    )


# ---------------------------------------------------------------------------
# The experiment runner
# ---------------------------------------------------------------------------


@dataclass
class VariantResult:
    name: str
    model: TrainedModel
    delta_star: float
    reports_by_delta: dict[float, FleetReport]
    buckets: DegradationBucketSummary

    @property
    def chosen_report(self) -> FleetReport:
        return self.reports_by_delta[self.delta_star]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    fleet: Fleet
    periodic_trigger: int
    periodic_report: FleetReport
    variant_results: dict[str, VariantResult]
    comparison: ComparisonTable
    output_dir: Path


def _stage(name: str):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Guard()


def build_fleet(config: ExperimentConfig) -> Fleet:
    if config.source == "csv":
        fleet = load_csv(config.manifest)
    else:
        fleet = generate_synthetic_fleet(
            n_batteries=config.n_batteries,
            max_cycles=config.max_cycles,
            seed=config.data_seed,
            activation_cycle=config.activation_cycle,
        )
    return split_train_test(fleet, config.split_ratio, config.split_seed)


def feature_matrices(config: ExperimentConfig, fleet: Fleet) -> dict[str, FeatureMatrix]:
    return {
        t.battery_id: engineer_features(t, config.window, config.activation_cycle)
        for t in fleet.traces
    }


def predictions_for(
    model: TrainedModel, matrices: dict[str, FeatureMatrix]
) -> dict[str, tuple[list[float], list[int]]]:
    out = {}
    for bid in sorted(matrices):
        m = matrices[bid]
        preds = federation.predict_rul(model, m)
        out[bid] = (preds.tolist(), m.ages.tolist())
    return out


def expand_variants(config: ExperimentConfig) -> list[tuple[str, str, int | None]]:
    """(output name, mode, cluster count) for each requested run."""
    out = []
    for v in config.variants:
        if v == "batch-federated":
            out.extend((f"batch-federated-{k}", v, k) for k in config.cluster_counts)
        else:
            out.append((v, v, None))
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "resolved_config.ini")

    with _stage("data"):
        fleet = build_fleet(config)
        matrices = feature_matrices(config, fleet)
        train_ids = sorted(t.battery_id for t in fleet.train_traces())
        test_ids = sorted(t.battery_id for t in fleet.test_traces())
        train_matrices = {bid: matrices[bid] for bid in train_ids}
        test_matrices = {bid: matrices[bid] for bid in test_ids}
        train_tf = {bid: fleet.by_id(bid).t_f for bid in train_ids}
        test_tf = {bid: fleet.by_id(bid).t_f for bid in test_ids}

    with _stage("periodic-baseline"):
        candidates = range(1, max(train_tf.values()) + 1)
        trigger = policy.optimal_periodic_trigger(train_tf.values(), candidates, config.econ)
        periodic_report = policy.evaluate_periodic_policy(test_tf, trigger, config.econ)
        policy.write_report_json(periodic_report, out_dir / "report_periodic.json")
        policy.write_report_csv([periodic_report], out_dir / "report_periodic.csv")

    variant_results: dict[str, VariantResult] = {}
    for name, mode, k in expand_variants(config):
        with _stage(f"train:{name}"):
            model = federation.train_variant(
                mode, train_matrices, config.schedule, config.net_config,
                config.train_seed, n_clusters=k,
            )
            if model.diode_audited:
                model.message_log.assert_diode()
        with _stage(f"evaluate:{name}"):
            train_preds = predictions_for(model, train_matrices)
            test_preds = predictions_for(model, test_matrices)
            delta_star = policy.select_delta(train_preds, train_tf, config.econ)
            reports = {
                delta: policy.evaluate_policy(test_preds, test_tf, delta, config.econ)
                for delta in config.econ.delta_candidates
            }
            buckets = bucket_errors(test_preds, test_tf)
        with _stage(f"report:{name}"):
            policy.write_report_json(
                reports[delta_star], out_dir / f"report_{name}.json",
                alpha=config.econ.alpha,
            )
            policy.write_report_csv(
                [reports[d] for d in config.econ.delta_candidates],
                out_dir / f"report_{name}.csv",
            )
            buckets.write_csv(out_dir / f"buckets_{name}.csv")
            model.message_log.to_jsonl(out_dir / f"messages_{name}.jsonl")
            save_model(model, out_dir / f"model_{name}")
        variant_results[name] = VariantResult(name, model, delta_star, reports, buckets)

    with _stage("comparison"):
        labels = ["periodic"] + list(variant_results)
        reports = [periodic_report] + [variant_results[n].chosen_report for n in variant_results]
        comparison = compare_policies(reports, labels)
        comparison.write_csv(out_dir / "comparison.csv")

    return ExperimentResult(
        config=config,
        fleet=fleet,
        periodic_trigger=trigger,
        periodic_report=periodic_report,
        variant_results=variant_results,
        comparison=comparison,
        output_dir=out_dir,
    )
