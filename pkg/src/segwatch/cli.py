"""Command-line entry points: ``segwatch run | flows | detect``.

Exit status: 0 success, 1 alarms raised under ``--fail-on-alarm``,
2 bad input, 3 internal invariant violation. Data goes to stdout (or
``--out``); diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from .capture import CaptureError, parse_pcap
from .detect import DetectorConfig, alarms_to_jsonl, config_from_dict, detect_stream
from .flows import FlowTableConfig, OutOfOrderTimestamp, build_flows, flows_to_jsonl, iter_flows_jsonl
from .sim.config import ConfigError, bundled, load_config, read_json
from .sim.scenario import InvariantViolation, run_scenario
from .sim.traffic import load_profile

EXIT_OK, EXIT_ALARM, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input; message is printed as one line on stderr."""


def _load_doc(path: Optional[str], default: str):
    """Read a JSON document from ``path``, or the bundled ``default`` when omitted."""
    if path is None:
        return bundled(default)
    try:
        return read_json(Path(path))
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from None


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror or e}") from None


def cmd_run(args) -> int:
    config = load_config(_load_doc(args.config, "fig2.json"))
    profile = load_profile(_load_doc(args.profile, "fig2_baseline.json"), config.hosts)
    if args.duration <= 0:
        raise InputError("--duration must be positive")
    out = run_scenario(config, profile, args.duration, monitoring=not args.no_monitoring,
                       seed=args.seed)
    try:
        written = out.write(args.out)
    except OSError as e:
        raise InputError(f"cannot write to {args.out}: {e.strerror or e}") from None
    for p in written:
        print(f"wrote {p}", file=sys.stderr)
    if args.fail_on_alarm and out.alarms:
        print(f"{len(out.alarms)} alarm(s) raised", file=sys.stderr)
        return EXIT_ALARM
    return EXIT_OK


def _flow_config(args) -> FlowTableConfig:
    try:
        return FlowTableConfig(idle_timeout_s=args.idle, active_timeout_s=args.active)
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_flows(args) -> int:
    records, _ = parse_pcap(_read_bytes(args.pcap), args.obs_point)
    flows = build_flows(records, _flow_config(args), args.obs_point)
    sys.stdout.write(flows_to_jsonl(flows))
    return EXIT_OK


def _detector_config(path: Optional[str]) -> DetectorConfig:
    """Accept a full topology config, or a bare detector section."""
    if path is None:
        return DetectorConfig()
    doc = _load_doc(path, "")
    if isinstance(doc, dict) and "segments" in doc:
        return load_config(doc).detector
    if isinstance(doc, dict) and isinstance(doc.get("detector"), dict):
        doc = doc["detector"]
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    try:
        return config_from_dict(doc)
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def cmd_detect(args) -> int:
    config = _detector_config(args.config)
    if args.pcap is not None:
        records, _ = parse_pcap(_read_bytes(args.pcap), args.obs_point)
        records = [r for r in records if r.ip is not None]
    else:
        text = _read_bytes(args.flows).decode("utf-8", errors="replace")
        try:
            records = list(iter_flows_jsonl(text.splitlines()))
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(f"{args.flows}: cannot parse flow record ({e})") from None
        records.sort(key=lambda f: (f.obs_point, f.first_ts))
    alarms = detect_stream(records, config)
    sys.stdout.write(alarms_to_jsonl(alarms))
    if args.fail_on_alarm and alarms:
        return EXIT_ALARM
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segwatch", description="Passive segment monitoring toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write its artifacts")
    r.add_argument("--config", help="topology JSON (default: bundled fig2.json)")
    r.add_argument("--profile", help="traffic profile JSON (default: bundled baseline)")
    r.add_argument("--duration", type=float, default=600.0, help="seconds of simulated time")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-monitoring", action="store_true", help="production network only")
    r.add_argument("--fail-on-alarm", action="store_true", help="exit 1 if any alarm is raised")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("flows", help="pcap in, flow JSONL out")
    f.add_argument("--pcap", required=True)
    f.add_argument("--obs-point", default="pcap")
    f.add_argument("--idle", type=float, default=15.0, help="idle timeout in seconds")
    f.add_argument("--active", type=float, default=300.0, help="active timeout in seconds")
    f.set_defaults(func=cmd_flows)

    d = sub.add_parser("detect", help="flows or pcap in, alarm JSONL out")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--flows")
    src.add_argument("--pcap")
    d.add_argument("--config", help="topology or detector JSON (default: built-in defaults)")
    d.add_argument("--obs-point", default="pcap", help="observation point name for --pcap input")
    d.add_argument("--fail-on-alarm", action="store_true")
    d.set_defaults(func=cmd_detect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, which matches our input-error code
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        for v in e.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, CaptureError, OutOfOrderTimestamp) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as e:
        print(f"internal error: invariant violated: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - any other escape is a bug
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
