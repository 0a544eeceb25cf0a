"""Command-line entry point.

Subcommands: simulate, analyze, fingerprint, exhaust, mitigate, report,
profiles.  Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .catalog import CatalogError, load_catalog
from .devices import ScriptError
from .exhaustion import ExhaustionPlan, PlanError, predict_traffic, run_exhaustion
from .inference import (
    StateClassifierModel,
    build_threshold_bands,
    classify_states,
    detect_online_intervals,
    fingerprint_platform,
)
from .mitigation import MitigationConfig
from .prober import read_samples_csv, read_samples_jsonl, split_by_device
from .protocol import ProbeKind, ProtocolError, policy_by_name
from .scenario import ScenarioError, load_scenario
from .simulator import Simulator
from .reporting import (
    REPORT_FORMATS,
    read_receipts_jsonl,
    write_report,
    write_run_outputs,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("--scenario", type=str, default=None, help="scenario YAML file")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    parser.add_argument("--catalog", type=str, default=None, help="alternative profile catalog")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="receiptsim",
        description="Delivery-receipt side-channel simulator and analysis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and persist its traces")
    _common(p)
    p.add_argument(
        "--allow-visible",
        action="store_true",
        help="run schedules that would notify the victim",
    )

    p = sub.add_parser("analyze", help="infer timelines from a sample stream")
    _common(p)
    p.add_argument("--samples", type=str, help="samples JSONL/CSV (default: <out>/samples.jsonl)")
    p.add_argument("--profile", type=str, help="profile name for band construction")
    p.add_argument("--gap-threshold-ms", type=int, default=None)
    p.add_argument("--smoothing-window", type=int, default=5)

    p = sub.add_parser("fingerprint", help="classify receipt stacking from a backlog flush")
    _common(p)
    p.add_argument("--receipts", type=str, help="receipts JSONL (default: <out>/receipts.jsonl)")
    p.add_argument("--device-index", type=int, default=None)

    p = sub.add_parser("exhaust", help="predict and simulate a resource-exhaustion plan")
    _common(p)
    p.add_argument("--policy", type=str, default="whatsapp_like")
    p.add_argument("--kind", type=str, default="invalid_ref_reaction")
    p.add_argument("--payload", type=int, required=True, help="payload bytes per probe")
    p.add_argument("--rate", type=float, required=True, help="probes per second")
    p.add_argument("--duration", type=float, required=True, help="seconds")
    p.add_argument("--profile", type=str, default="iphone13pro-whatsapp")
    p.add_argument("--predict-only", action="store_true")

    p = sub.add_parser("mitigate", help="paired baseline/mitigated evaluation")
    _common(p)
    p.add_argument("--mitigations", type=str, required=True, help="mitigation YAML file")

    p = sub.add_parser("report", help="emit report files from a finished run")
    _common(p)
    p.add_argument("--format", type=str, choices=REPORT_FORMATS, required=True)

    p = sub.add_parser("profiles", help="inspect the platform profile catalog")
    psub = p.add_subparsers(dest="profiles_command", required=True)
    pl = psub.add_parser("list", help="list catalog profiles")
    pl.add_argument("--catalog", type=str, default=None)
    ps = psub.add_parser("show", help="show one profile")
    ps.add_argument("name", type=str)
    ps.add_argument("--catalog", type=str, default=None)

    return parser


def _load(args):
    catalog = load_catalog(args.catalog)
    if not args.scenario:
        raise ScenarioError("--scenario is required for this command")
    scenario = load_scenario(args.scenario, catalog, seed_override=args.seed)
    return catalog, scenario


def cmd_simulate(args) -> int:
    catalog, scenario = _load(args)
    if getattr(args, "allow_visible", False):
        scenario.attacker.allow_visible = True
    run = Simulator(scenario, catalog).run()
    write_run_outputs(run, args.out)
    print(json.dumps({"out": str(Path(args.out)), "summary": run.summary}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    samples_path = Path(args.samples) if args.samples else Path(args.out) / "samples.jsonl"
    if samples_path.suffix == ".csv":
        samples = read_samples_csv(samples_path)
    else:
        samples = read_samples_jsonl(samples_path)
    catalog = load_catalog(args.catalog)
    streams = split_by_device(samples)
    sends = sorted({s.send_at for s in samples})
    interval = (
        sorted(b - a for a, b in zip(sends, sends[1:]) if b > a)[max(0, (len(sends) - 2) // 2)]
        if len(sends) > 1
        else 1000
    )
    gap = args.gap_threshold_ms if args.gap_threshold_ms is not None else 3 * interval
    timeline = {}
    for device_index, stream in sorted(
        streams.items(), key=lambda kv: -1 if kv[0] is None else kv[0]
    ):
        segs = [seg.to_dict() for seg in detect_online_intervals(stream, gap)]
        if args.profile:
            profile = catalog.profile(args.profile)
            model = StateClassifierModel(
                bands=build_threshold_bands(profile), smoothing_window=args.smoothing_window
            )
            acked = [s for s in stream if s.device_ack_at is not None]
            if len(acked) >= args.smoothing_window:
                segs.extend(seg.to_dict() for seg in classify_states(stream, model))
        timeline["account" if device_index is None else str(device_index)] = segs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timeline.json").write_text(
        json.dumps(timeline, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps(timeline, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    receipts_path = Path(args.receipts) if args.receipts else Path(args.out) / "receipts.jsonl"
    events = read_receipts_jsonl(receipts_path)
    samples_path = Path(args.out) / "samples.jsonl"
    from .inference import backlog_flush_events
    from .protocol import ReceiptKind

    acks = [e for e in events if e.kind == ReceiptKind.DEVICE_ACK]
    if args.device_index is not None:
        acks = [e for e in acks if e.device_index == args.device_index]
    sent_order = sorted({pid for e in acks for pid in e.probe_ids})
    if samples_path.exists():
        samples = read_samples_jsonl(samples_path)
        indices = (
            [args.device_index]
            if args.device_index is not None
            else sorted({e.device_index for e in acks}, key=lambda i: -1 if i is None else i)
        )
        results = {}
        for idx in indices:
            bursts = backlog_flush_events(events, samples, idx, late_threshold_ms=6000)
            if not bursts:
                continue
            largest = max(bursts, key=lambda b: sum(len(e.probe_ids) for e in b))
            results["account" if idx is None else str(idx)] = fingerprint_platform(
                largest, sent_order
            ).to_dict()
        print(json.dumps(results, indent=2, sort_keys=True))
        return EXIT_OK
    # Without send times, fall back to stacked events alone.
    stacked = [e for e in acks if len(e.probe_ids) > 1]
    flush = stacked or acks[-5:]
    result = fingerprint_platform(flush, sent_order)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_exhaust(args) -> int:
    plan = ExhaustionPlan(
        policy=policy_by_name(args.policy),
        kind=ProbeKind(args.kind),
        payload_bytes=args.payload,
        rate_per_s=args.rate,
        duration_s=args.duration,
    )
    prediction = predict_traffic(plan)
    if args.predict_only:
        print(
            json.dumps(
                {
                    "bytes_per_s": round(prediction.bytes_per_s, 3),
                    "mb_per_h": round(prediction.mb_per_h, 3),
                },
                indent=2,
                sort_keys=True,
            )
        )
        return EXIT_OK
    result = run_exhaustion(
        plan, args.profile, load_catalog(args.catalog), seed=args.seed or 0
    )
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_mitigate(args) -> int:
    import yaml

    catalog, scenario = _load(args)
    with open(args.mitigations, "r", encoding="utf-8") as fh:
        config = MitigationConfig.from_dict(yaml.safe_load(fh))
    from .mitigation_eval import evaluate_mitigation

    report = evaluate_mitigation(scenario, config, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mitigation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    catalog, scenario = _load(args)
    run = Simulator(scenario, catalog).run()
    path = write_report(run, args.out, args.format)
    print(str(path))
    return EXIT_OK


def cmd_profiles(args) -> int:
    catalog = load_catalog(args.catalog)
    if args.profiles_command == "list":
        for name in sorted(catalog.profiles):
            profile = catalog.profiles[name]
            print(f"{name}\t{profile.app}/{profile.platform}\t{profile.stacking.value}")
        return EXIT_OK
    profile = catalog.profile(args.name)
    info = {
        "name": profile.name,
        "app": profile.app,
        "platform": profile.platform,
        "stacking": profile.stacking.value,
        "read_stacking": profile.read_stacking.value,
        "transient_duration_s": profile.transient_duration_s,
        "sleep": {
            "idle_threshold_s": profile.sleep.idle_threshold_s,
            "probe_resets_idle": profile.sleep.probe_resets_idle,
        },
        "battery": {
            "idle_pct_per_h": profile.battery.idle_pct_per_h,
            "attack_pct_per_h": profile.battery.attack_pct_per_h,
        },
        "delays_ms": {
            state.value: {"mean": dist.mean_ms, "std": dist.stddev_ms}
            for state, dist in sorted(
                profile.delay_by_state.items(), key=lambda kv: kv[1].mean_ms
            )
        },
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "fingerprint": cmd_fingerprint,
    "exhaust": cmd_exhaust,
    "mitigate": cmd_mitigate,
    "report": cmd_report,
    "profiles": cmd_profiles,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, CatalogError, ScriptError, PlanError, ProtocolError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
