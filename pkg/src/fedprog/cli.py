"""Command-line front end: data generation, training, evaluation, reports.

Exit codes: 0 success, 2 user/config error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments, federation, policy
from .data import generate_synthetic_fleet, write_fleet_csv
from .errors import ConfigError, DataError, FedprogError, NumericError, StageError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprog",
        description="Federated battery prognosis: train, evaluate and compare replacement policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic fleet as CSV files")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--batteries", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--max-cycles", type=int, default=500)

    train = sub.add_parser("train", help="train the configured pipeline variants")
    train.add_argument("--config", required=True)
    train.add_argument("--variant", help="train only this variant")
    train.add_argument("--out", help="override [experiment] output_dir")

    ev = sub.add_parser("evaluate", help="evaluate trained models against the test fleet")
    ev.add_argument("--config", required=True)
    ev.add_argument("--run", help="run directory holding trained models (default: output_dir)")

    cmp_ = sub.add_parser("compare", help="compare fleet reports (first one is the baseline)")
    cmp_.add_argument("reports", nargs="+", help="report JSON files")
    cmp_.add_argument("--out", required=True, help="comparison CSV to write")

    rep = sub.add_parser("report", help="render comparison.csv from a finished run directory")
    rep.add_argument("--run", required=True)
    return parser


def _cmd_gen_data(args) -> int:
    if args.batteries < 2:
        print("gen-data: --batteries must be at least 2", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fleet = generate_synthetic_fleet(
            n_batteries=args.batteries, max_cycles=args.max_cycles, seed=args.seed
        )
        manifest = write_fleet_csv(fleet, out)
        (out / "generation_args.json").write_text(
            json.dumps(
                {"batteries": args.batteries, "seed": args.seed, "max_cycles": args.max_cycles},
                indent=2, sort_keys=True,
            ) + "\n",
            encoding="utf-8",
        )
    except (OSError, DataError) as exc:
        print(f"gen-data: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(fleet)} batteries to {manifest}")
    return EXIT_OK


def _resolve_config(args) -> experiments.ExperimentConfig:
    config = experiments.load_config(args.config)
    if getattr(args, "out", None):
        config.output_dir = Path(args.out)
    if getattr(args, "run", None):
        config.output_dir = Path(args.run)
    return config


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    if args.variant:
        if args.variant not in federation.VARIANTS:
            print(f"train: unknown variant {args.variant!r}", file=sys.stderr)
            return EXIT_USAGE
        config.variants = (args.variant,)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    experiments.dump_config(config, out_dir / "resolved_config.ini")

    fleet = experiments.build_fleet(config)
    matrices = experiments.feature_matrices(config, fleet)
    train_matrices = {
        t.battery_id: matrices[t.battery_id] for t in fleet.train_traces()
    }
    summary = {}
    for name, mode, k in experiments.expand_variants(config):
        model = federation.train_variant(
            mode, train_matrices, config.schedule, config.net_config,
            config.train_seed, n_clusters=k,
        )
        if model.diode_audited:
            model.message_log.assert_diode()
        experiments.save_model(model, out_dir / f"model_{name}")
        model.message_log.to_jsonl(out_dir / f"messages_{name}.jsonl")
        ae_rounds = 0 if mode == "fl-no-autoencoder" else config.schedule.rounds_autoencoder
        summary[name] = {
            "autoencoder_rounds": ae_rounds,
            "rul_rounds": config.schedule.rounds_rul,
            "weight_messages": len(model.message_log.weight_messages()),
            "diode_audited": model.diode_audited,
        }
        print(
            f"trained {name}: autoencoder_rounds={ae_rounds} "
            f"rul_rounds={config.schedule.rounds_rul} "
            f"weight_messages={summary[name]['weight_messages']}"
        )
    (out_dir / "training_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    out_dir = config.output_dir
    if not out_dir.exists():
        print(f"evaluate: run directory {out_dir} does not exist", file=sys.stderr)
        return EXIT_USAGE
    experiments.dump_config(config, out_dir / "resolved_config.ini")

    fleet = experiments.build_fleet(config)
    matrices = experiments.feature_matrices(config, fleet)
    train_ids = sorted(t.battery_id for t in fleet.train_traces())
    test_ids = sorted(t.battery_id for t in fleet.test_traces())
    train_tf = {b: fleet.by_id(b).t_f for b in train_ids}
    test_tf = {b: fleet.by_id(b).t_f for b in test_ids}

    candidates = range(1, max(train_tf.values()) + 1)
    trigger = policy.optimal_periodic_trigger(train_tf.values(), candidates, config.econ)
    periodic_report = policy.evaluate_periodic_policy(test_tf, trigger, config.econ)
    policy.write_report_json(periodic_report, out_dir / "report_periodic.json")
    policy.write_report_csv([periodic_report], out_dir / "report_periodic.csv")

    labels, reports = ["periodic"], [periodic_report]
    for name, _, _ in experiments.expand_variants(config):
        model_dir = out_dir / f"model_{name}"
        if not model_dir.exists():
            print(f"evaluate: no trained model at {model_dir}; run train first", file=sys.stderr)
            return EXIT_USAGE
        model = experiments.load_model(model_dir)
        train_preds = experiments.predictions_for(
            model, {b: matrices[b] for b in train_ids}
        )
        test_preds = experiments.predictions_for(model, {b: matrices[b] for b in test_ids})
        delta_star = policy.select_delta(train_preds, train_tf, config.econ)
        per_delta = {
            d: policy.evaluate_policy(test_preds, test_tf, d, config.econ)
            for d in config.econ.delta_candidates
        }
        policy.write_report_json(
            per_delta[delta_star], out_dir / f"report_{name}.json", alpha=config.econ.alpha
        )
        policy.write_report_csv(
            [per_delta[d] for d in config.econ.delta_candidates],
            out_dir / f"report_{name}.csv",
        )
        experiments.bucket_errors(test_preds, test_tf).write_csv(
            out_dir / f"buckets_{name}.csv"
        )
        labels.append(name)
        reports.append(per_delta[delta_star])
        print(f"evaluated {name}: delta*={delta_star} "
              f"mean_cost_rate={per_delta[delta_star].mean_cost_rate:.6g}")

    comparison = experiments.compare_policies(reports, labels)
    comparison.write_csv(out_dir / "comparison.csv")
    print(f"wrote {out_dir / 'comparison.csv'}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    paths = [Path(p) for p in args.reports]
    for p in paths:
        if not p.exists():
            print(f"compare: report not found: {p}", file=sys.stderr)
            return EXIT_USAGE
    if len(paths) < 2:
        print("compare: need at least two reports", file=sys.stderr)
        return EXIT_USAGE
    reports = [policy.load_report_json(p) for p in paths]
    labels = [p.stem.removeprefix("report_") for p in paths]
    table = experiments.compare_policies(reports, labels)
    table.write_csv(args.out)
    base = labels[0]
    for label in labels:
        print(f"{label}: improvement vs {base} = {100 * table.improvements[label]:.1f}%")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    periodic_path = run_dir / "report_periodic.json"
    if not periodic_path.exists():
        print(f"report: missing {periodic_path}; run evaluate first", file=sys.stderr)
        return EXIT_USAGE
    variant_paths = sorted(
        p for p in run_dir.glob("report_*.json") if p.name != "report_periodic.json"
    )
    if not variant_paths:
        print(f"report: no variant reports in {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    labels = ["periodic"] + [p.stem.removeprefix("report_") for p in variant_paths]
    reports = [policy.load_report_json(periodic_path)] + [
        policy.load_report_json(p) for p in variant_paths
    ]
    table = experiments.compare_policies(reports, labels)
    table.write_csv(run_dir / "comparison.csv")
    print(f"wrote {run_dir / 'comparison.csv'}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"fedprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"fedprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc.cause, (ConfigError, DataError)) else EXIT_RUNTIME
    except (NumericError, FedprogError, ArithmeticError) as exc:
        print(f"fedprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
