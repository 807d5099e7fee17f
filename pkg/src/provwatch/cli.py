"""Command-line front end.

Subcommands cover the full workflow: ``gen`` writes a synthetic scenario,
``train`` fits the anomaly baseline, ``detect`` streams a log file through
the detection pipeline, ``eval`` scores the output against ground truth,
and ``report`` dumps the tracked attack sets from a checkpoint.

Exit codes: 0 on success, 1 on operational failure (unreadable input,
pipeline error, mismatched streams), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import scenario
from .config import ConfigError, PipelineConfig
from .correlator import GlobalAttackStore
from .deviation import LofModel
from .evaluate import EVENT_TS_TOLERANCE_NS, evaluate
from .ingest import ParseError, parse_jsonl, sort_events, write_issue_report
from .pipeline import PipelineError, run_detection, train_baseline
from .scenario import GroundTruth


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="provwatch",
        description="Streaming detection of staged intrusions in provenance logs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a single config key (repeatable); values use TOML syntax",
    )

    p_train = sub.add_parser("train", parents=[common], help="fit the anomaly baseline")
    p_train.add_argument("--input", required=True, help="training log stream (JSONL)")
    p_train.add_argument("--model", required=True, help="output path for the fitted model")
    p_train.set_defaults(func=cmd_train)

    p_detect = sub.add_parser("detect", parents=[common], help="run the detection pipeline")
    p_detect.add_argument("--input", required=True, help="log stream to analyze (JSONL)")
    p_detect.add_argument("--model", required=True, help="fitted model from `train`")
    p_detect.add_argument("--out", required=True, help="output directory")
    p_detect.add_argument(
        "--checkpoint", help="resume from an existing checkpoint instead of starting fresh"
    )
    p_detect.set_defaults(func=cmd_detect)

    p_eval = sub.add_parser("eval", help="score detection output against ground truth")
    p_eval.add_argument("--alerts", required=True, help="alerts.jsonl from `detect`")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint.json from `detect`")
    p_eval.add_argument("--truth", required=True, help="ground truth JSON")
    p_eval.add_argument("--out", help="also write the report as JSON to this path")
    p_eval.add_argument(
        "--tolerance-ns",
        type=int,
        default=EVENT_TS_TOLERANCE_NS,
        help="event-match timestamp tolerance in nanoseconds",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("gen", help="generate a synthetic scenario")
    source = p_gen.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--template", choices=sorted(scenario.TEMPLATES), help="built-in scenario template"
    )
    source.add_argument("--spec", help="scenario spec file (TOML)")
    p_gen.add_argument("--seed", type=int, default=11, help="generator seed")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen)

    p_report = sub.add_parser("report", help="dump tracked attack sets from a checkpoint")
    p_report.add_argument("--checkpoint", required=True)
    p_report.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p_report.set_defaults(func=cmd_report)

    return parser


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = (
        PipelineConfig.from_file(args.config)
        if getattr(args, "config", None)
        else PipelineConfig()
    )
    overrides = {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        try:
            parsed = tomllib.loads(f"v = {value.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value.strip()
        overrides[key.strip()] = parsed
    return cfg.override(**overrides) if overrides else cfg.validate()


def _read_events(path: str, cfg: PipelineConfig):
    try:
        with open(path, encoding="utf-8") as fh:
            events, issues = parse_jsonl(
                fh, strict=cfg.strict_parse, vocabulary=cfg.event_vocabulary
            )
    except OSError as exc:
        raise PipelineError(f"cannot read {path}: {exc}") from exc
    if not events and issues:
        raise PipelineError(f"{path}: no parseable events ({len(issues)} bad lines)")
    return sort_events(events), issues


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    events, issues = _read_events(args.input, cfg)
    model = train_baseline(cfg, events)
    model.save(args.model)
    print(
        f"trained on {len(events)} events "
        f"({len(model.points)} distinct patterns, {model.flag_count()} flagged); "
        f"{len(issues)} parse issues"
    )
    return 0


def cmd_detect(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    events, issues = _read_events(args.input, cfg)
    try:
        model = LofModel.load(args.model)
    except (OSError, ValueError, RuntimeError) as exc:
        raise PipelineError(f"cannot load model {args.model}: {exc}") from exc
    store = None
    if args.checkpoint:
        store = GlobalAttackStore.load(
            args.checkpoint,
            primary_band=cfg.primary_band,
            secondary_band=cfg.secondary_band,
            decay_rate=cfg.decay_rate,
            reanalysis_cadence=cfg.reanalysis_cadence,
            complete_band=cfg.complete_band,
        )
    result = run_detection(cfg, model, events, store=store)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "alerts.jsonl").open("w") as fh:
        for alert in result.alerts:
            fh.write(json.dumps(alert.to_json_obj(), sort_keys=True) + "\n")
    result.store.save(out / "checkpoint.json")
    stats_obj = {
        "windows": [w.to_json_obj() for w in result.windows],
        "totals": {
            "windows": len(result.windows),
            "alerts": len(result.alerts),
            "parse_issues": len(issues),
            "peak_graph_nodes": result.rolling.peak_nodes,
        },
    }
    (out / "window_stats.json").write_text(
        json.dumps(stats_obj, sort_keys=True, indent=1) + "\n"
    )
    with (out / "parse_issues.jsonl").open("w") as fh:
        write_issue_report(issues, fh)
    print(
        f"processed {len(result.windows)} windows: "
        f"{len(result.alerts)} alerts, "
        f"{len(result.store.active_sets())} tracked sets, "
        f"{len(issues)} parse issues"
    )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig | None = None) -> int:
    try:
        with open(args.alerts, encoding="utf-8") as fh:
            alerts = [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read alerts {args.alerts}: {exc}") from exc
    store = GlobalAttackStore.load(args.checkpoint)
    truth = GroundTruth.load(args.truth)

    if truth.window_count:
        stray = [a["window"] for a in alerts if a["window"] >= truth.window_count]
        if stray:
            raise PipelineError(
                f"alert stream references windows {stray} beyond the ground truth "
                f"universe of {truth.window_count}; streams are probably mismatched"
            )
    report = evaluate(
        alerts, store.active_sets(), truth, tolerance_ns=args.tolerance_ns
    )
    print(report.render())
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_json_obj(), sort_keys=True, indent=1) + "\n"
        )
    return 0


def cmd_gen(args: argparse.Namespace, cfg: PipelineConfig | None = None) -> int:
    if args.template:
        spec = scenario.TEMPLATES[args.template]()
    else:
        spec = scenario.load_spec(args.spec)
    run = scenario.generate(spec, seed=args.seed)
    paths = scenario.write_run(run, args.out)
    print(
        f"wrote {run.stats['train_events']} train / {run.stats['test_events']} test "
        f"events ({run.stats['attack_events']} labeled) to {Path(args.out)}"
    )
    for name in sorted(paths):
        print(f"  {name}: {paths[name]}")
    return 0


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig | None = None) -> int:
    store = GlobalAttackStore.load(args.checkpoint)
    if args.json:
        print(json.dumps(store.checkpoint_obj(), sort_keys=True, indent=1))
        return 0
    for queue in ("primary", "secondary", "retired"):
        members = store.queue_members(queue)
        print(f"{queue} queue: {len(members)} set(s)")
        for aset in members:
            pids = ",".join(sorted(aset.process_ids()))
            print(
                f"  {aset.set_id}  score {aset.score:.3f}  "
                f"windows {aset.creation_window}-{aset.last_update_window}  "
                f"events {len(aset.tuples)}  processes {pids}"
            )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.func in (cmd_train, cmd_detect):
            cfg = _build_config(args)
            return args.func(args, cfg)
        return args.func(args)
    except (PipelineError, ParseError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        # Config files and scenario specs raise ValueError subclasses;
        # those are usage problems rather than runtime failures.
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
