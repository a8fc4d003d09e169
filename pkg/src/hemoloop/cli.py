"""Operator command line.

Network commands (push, worklist, round) talk to a running service over
--server. Data commands (partition, deploy, evaluate, demo, serve) open the
data directory directly and must not race a live server on the same files.

Exit codes: 0 success, 1 push failure, 2 lookup failure, 3 round abort,
64 usage error. stdout carries one JSON object per line; prose goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.error
import urllib.request
from collections import defaultdict
from pathlib import Path

from . import dicomio
from .errors import (
    HemoloopError,
    LeakageDetected,
    NoCandidates,
    UnknownCase,
    UnknownPartition,
    UnknownVersion,
)

EXIT_OK = 0
EXIT_PUSH = 1
EXIT_LOOKUP = 2
EXIT_ROUND = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out(obj):
    print(json.dumps(obj), flush=True)


def _note(message):
    print(message, file=sys.stderr, flush=True)


def _server_tuple(server: str):
    host, _, port = server.rpartition(":")
    return host or "127.0.0.1", int(port)


def _http(server: str, token: str | None, method: str, path: str, body=None):
    request = urllib.request.Request(f"http://{server}{path}", method=method)
    if token:
        request.add_header("Authorization", f"Bearer {token}")
    data = None
    if body is not None:
        data = json.dumps(body).encode()
        request.add_header("Content-Type", "application/json")
    return urllib.request.urlopen(request, data=data)


# --- commands --------------------------------------------------------------------


def cmd_push(args) -> int:
    from .server.push import PushError, push_study

    files = []
    for path in args.paths:
        p = Path(path)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.is_file()))
        else:
            files.append(p)
    if not files:
        _note("no input files")
        return EXIT_PUSH

    studies: dict[str, list[bytes]] = defaultdict(list)
    for f in files:
        blob = f.read_bytes()
        try:
            s = dicomio.parse_slice(blob)
        except HemoloopError as exc:
            _note(f"{f}: {type(exc).__name__}: {exc}")
            return EXIT_PUSH
        studies[s.study_uid].append(blob)

    address = _server_tuple(args.server)
    status = EXIT_OK
    for study_uid in sorted(studies):
        try:
            receipt = push_study(address, studies[study_uid],
                                 site=args.site, user=args.user)
            _out(receipt)
        except (PushError, OSError) as exc:
            _note(f"push of {study_uid} failed: {exc}")
            status = EXIT_PUSH
    return status


def cmd_worklist(args) -> int:
    query = []
    if args.status:
        query.append(f"status={args.status}")
    if args.partition:
        query.append(f"partition={args.partition}")
    path = "/api/worklist" + ("?" + "&".join(query) if query else "")
    try:
        with _http(args.server, args.token, "GET", path) as response:
            payload = json.loads(response.read())
    except urllib.error.HTTPError as exc:
        _note(f"worklist failed: {exc}")
        return EXIT_LOOKUP
    for row in payload["cases"]:
        _out(row)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .inference import InferenceConfig
    from .metrics import export_report
    from .model import ClassifierParams
    from .registry import Registry
    from .rounds import evaluate_on_partition

    registry = Registry(args.data)
    try:
        reports = []
        for version_id in args.model:
            version = registry.get_model(version_id)
            params = ClassifierParams.from_json(registry.load_params_json(version))
            config = InferenceConfig.from_json(version.inference_config)
            calibration = registry.calibration_for(version)
            report = evaluate_on_partition(
                registry, params, config, args.partition, version_id,
                calibration if not calibration.is_identity else None,
            )
            reports.append(report)
    except (UnknownVersion, UnknownPartition) as exc:
        _note(str(exc))
        registry.close()
        return EXIT_LOOKUP

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    export_report(reports, "csv", out_dir / "metrics.csv")
    export_report(reports, "svg_roc", out_dir / "roc.svg")
    export_report(reports, "svg_bars", out_dir / "bars.svg")
    for report in reports:
        _out({
            "model": report.model_version,
            "partition": report.partition,
            "dice": report.dice,
            "sens": report.sens,
            "spec": report.spec,
            "auc": report.auc,
            "accu": report.accu,
            "preci": report.preci,
            "f1": report.f1,
        })
    _note(f"wrote metrics.csv, roc.svg, bars.svg under {out_dir}")
    registry.close()
    return EXIT_OK


def cmd_round(args) -> int:
    config = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        config["seed"] = args.seed
    try:
        response = _http(args.server, args.token, "POST", "/api/rounds", body=config)
    except urllib.error.HTTPError as exc:
        _note(f"round failed: {exc}")
        return EXIT_ROUND
    status = EXIT_OK
    outcome = None
    with response:
        for raw in response:
            line = json.loads(raw)
            if "progress" in line:
                _note(f"progress: {json.dumps(line['progress'])}")
            elif "outcome" in line:
                outcome = line["outcome"]
            elif "error" in line:
                _note(f"round aborted: {line['error']}: {line.get('message', '')}")
                return EXIT_ROUND
    if outcome is not None:
        _out(outcome)
    return status


def cmd_deploy(args) -> int:
    from .registry import Registry

    registry = Registry(args.data)
    try:
        registry.deploy_model(args.model)
        _out({"deployed": args.model})
        return EXIT_OK
    except HemoloopError as exc:
        _note(str(exc))
        return EXIT_LOOKUP
    finally:
        registry.close()


def cmd_partition(args) -> int:
    from .registry import Registry

    registry = Registry(args.data)
    try:
        if args.partition_command == "create":
            case_ids = [c for c in args.cases.split(",") if c]
            part = registry.create_partition(args.name, args.role, case_ids,
                                             frozen=args.frozen)
            _out(part.to_json())
        else:
            for part in registry.list_partitions():
                _out(part.to_json())
        return EXIT_OK
    except (UnknownCase, UnknownPartition) as exc:
        _note(str(exc))
        return EXIT_LOOKUP
    except HemoloopError as exc:
        _note(str(exc))
        return EXIT_LOOKUP
    finally:
        registry.close()


def cmd_demo(args) -> int:
    from .demo import run_demo
    from .registry import Registry

    out_dir = Path(args.out or "demo-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = Registry(args.data)
    try:
        summary = run_demo(
            registry,
            seed=args.seed if args.seed is not None else 7,
            out_dir=out_dir,
            progress=lambda event: _note(f"progress: {json.dumps(event)}"),
        )
    except LeakageDetected as exc:
        _note(f"round aborted: {exc}")
        return EXIT_ROUND
    finally:
        registry.close()
    for row in summary["rounds"]:
        _out(row)
    _note(f"reports written under {out_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import Service

    service = Service(args.data, token=args.token, ui_dir=args.ui_dir)
    service.start(host=args.host, push_port=args.push_port, http_port=args.http_port)
    _out({
        "push": list(service.push_address),
        "http": list(service.http_address),
    })
    _note("serving; Ctrl-C to stop")
    try:
        import threading
        threading.Event().wait()
    except KeyboardInterrupt:
        _note("stopping")
    finally:
        service.stop()
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="hemoloop")
    parser.add_argument("--server", default="127.0.0.1:8394",
                        help="host:port of the running service")
    parser.add_argument("--token", default=None, help="bearer token")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("push", help="push slice files to the service")
    p.add_argument("paths", nargs="+")
    p.add_argument("--site", default="site-1")
    p.add_argument("--user", default="operator")
    p.set_defaults(func=cmd_push)

    p = commands.add_parser("worklist", help="list cases")
    p.add_argument("--status", default=None)
    p.add_argument("--partition", default=None)
    p.set_defaults(func=cmd_worklist)

    p = commands.add_parser("evaluate", help="evaluate model versions on a partition")
    p.add_argument("--data", required=True)
    p.add_argument("--model", type=int, nargs="+", required=True)
    p.add_argument("--partition", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("round", help="trigger a refinement round")
    p.add_argument("--config", required=True, help="RoundConfig JSON file")
    p.set_defaults(func=cmd_round)

    p = commands.add_parser("deploy", help="deploy a model version")
    p.add_argument("--data", required=True)
    p.add_argument("--model", type=int, required=True)
    p.set_defaults(func=cmd_deploy)

    p = commands.add_parser("partition", help="manage partitions")
    sub = p.add_subparsers(dest="partition_command", required=True)
    c = sub.add_parser("create")
    c.add_argument("--data", required=True)
    c.add_argument("--name", required=True)
    c.add_argument("--role", required=True,
                   choices=["train", "holdout_test", "online_test", "negative_test"])
    c.add_argument("--cases", default="", help="comma-separated case ids")
    c.add_argument("--frozen", action="store_true")
    c.set_defaults(func=cmd_partition)
    l = sub.add_parser("list")
    l.add_argument("--data", required=True)
    l.set_defaults(func=cmd_partition)

    p = commands.add_parser("demo", help="run the seeded three-round campaign")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_demo)

    p = commands.add_parser("serve", help="run the service")
    p.add_argument("--data", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--push-port", type=int, default=8393)
    p.add_argument("--http-port", type=int, default=8394)
    p.add_argument("--ui-dir", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NoCandidates, LeakageDetected) as exc:
        _note(str(exc))
        return EXIT_ROUND
    except HemoloopError as exc:
        _note(f"{type(exc).__name__}: {exc}")
        return EXIT_LOOKUP


if __name__ == "__main__":
    sys.exit(main())
