"""Command line entry points.

Four subcommands: ``serve`` runs a gateway over HTTP, ``run`` executes a
scenario file and prints its report, ``replay`` folds a log into a
snapshot and prints its stats, ``ingest`` parses an O&M observation into
a local log.  Reports and stats print as JSON by default; ``--format
text`` gives terse human lines instead.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .codec import CodecError, parse_om_observation
from .gateway import GatewayCore
from .harness import ScenarioInvalid, run_scenario, scenario_from_json
from .httpd import make_server
from .model import element_canonical_json
from .store import CorruptLog, EventStore, read_log, replay


class _CliError(Exception):
    pass


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise _CliError(f"--listen wants host:port, got {value!r}")
    return host, int(port)


def _cmd_serve(args: argparse.Namespace) -> int:
    host, port = _parse_listen(args.listen)
    core = GatewayCore(args.log_path)
    server = make_server(core, host, port)
    bound = server.server_address
    print(f"listening on http://{bound[0]}:{bound[1]}, log at {args.log_path}",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        core.close()
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    path = Path(args.scenario)
    try:
        scenario = scenario_from_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise _CliError(f"cannot read scenario: {exc}") from None
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    report = run_scenario(scenario, log_path=args.log_path)
    if args.format == "json":
        print(report.to_json())
    else:
        delivered = sum(report.delivered_counts.values())
        print(f"delivered: {delivered} messages"
              f" to {len(report.delivered_counts)} devices")
        print(f"duplicates: {report.duplicate_count}")
        print(f"transactions: {report.txn_outcome_consistency} consistent")
        print(f"notification diff: {report.notification_diff}")
        print(f"virtual seconds: {report.wall_clock}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    events = read_log(args.log)
    snapshot = replay(events)
    stats = {
        "events": len(events),
        "lastSeq": snapshot.last_seq,
        "elements": len(snapshot.elements_by_id),
        "entities": len(snapshot.by_entity),
        "digest": snapshot.digest(),
    }
    if args.format == "json":
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        for key in ("events", "lastSeq", "elements", "entities", "digest"):
            print(f"{key}: {stats[key]}")
    return 0


def _cmd_ingest(args: argparse.Namespace) -> int:
    try:
        data = Path(args.om_file).read_bytes()
    except OSError as exc:
        raise _CliError(f"cannot read observation: {exc}") from None
    element = parse_om_observation(data)
    store = EventStore(args.log_path)
    event = store.append(element)
    if args.format == "json":
        print('{"seq":%d,"element":%s}'
              % (event.sequence_no, element_canonical_json(element)))
    else:
        print(f"stored {element.entity_id} ({element.entity_type})"
              f" as {element.element_id} at seq {event.sequence_no}")
        for t in element.triples:
            value = {True: "true", False: "false"}.get(t.value, t.value)
            print(f"  {t.name} = {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openm2m",
        description="M2M gateway: serve it, simulate against it, "
                    "inspect its log.")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a gateway over HTTP")
    serve.add_argument("--listen", default="127.0.0.1:8225",
                       help="host:port to bind (default %(default)s)")
    serve.add_argument("--log-path", default="events.jsonl",
                       help="event log file (default %(default)s)")
    serve.set_defaults(func=_cmd_serve)

    run = sub.add_parser("run", help="execute a scenario file")
    run.add_argument("scenario", nargs="?", help="scenario JSON file")
    run.add_argument("--scenario", dest="scenario_flag",
                     help="scenario JSON file (alternative to the positional)")
    run.add_argument("--seed", type=int, default=None,
                     help="override the scenario's seed")
    run.add_argument("--log-path", default=None,
                     help="event log for the run (default: fresh temp file)")
    run.add_argument("--format", choices=("json", "text"), default="json")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("replay", help="fold a log and print snapshot stats")
    rep.add_argument("log", help="event log file")
    rep.add_argument("--format", choices=("json", "text"), default="json")
    rep.set_defaults(func=_cmd_replay)

    ingest = sub.add_parser("ingest", help="parse an O&M observation into a log")
    ingest.add_argument("om_file", help="O&M XML file")
    ingest.add_argument("--log-path", default="events.jsonl",
                        help="event log to append to (default %(default)s)")
    ingest.add_argument("--format", choices=("json", "text"), default="json")
    ingest.set_defaults(func=_cmd_ingest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "run":
        args.scenario = args.scenario or args.scenario_flag
        if not args.scenario:
            parser.error("run needs a scenario file")
    try:
        return args.func(args)
    except (_CliError, CodecError, CorruptLog, ScenarioInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
