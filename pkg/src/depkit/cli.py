"""Command-line surface for the evaluation lifecycle.

    dep list --dir DIR [--models|--datasets]     discover cards
    dep new --model ID --dataset ID ...          register an evaluation (paused)
    dep run EID                                  run / resume until terminal
    dep pause EID                                ask a running task to pause
    dep resume EID                               continue from the journal
    dep status EID                               progress snapshot
    dep results EID [--json]                     stored report
    dep leaderboard [--dataset ID] [--sort D:M]  cross-run comparison
    dep serve DIR... --listen HOST:PORT          host benchmark packages
    dep validate PATH                            preflight a card or package

Exit codes: 0 success, 1 operation error, 2 usage error.
"""

import argparse
import json
import signal
import sys
import threading
from pathlib import Path

from .adapter import DiscoveryError, load_model_card
from .orchestrator import JournalError, Orchestrator, default_home
from .protocol import ProtocolError, encode_message
from .server import PackageError, validate_package
from .transport import ServerBinding, WireLog, serve

MODEL_CARD_MARKER = ".model.json"


def _print_table(headers, rows, out=None):
    out = out if out is not None else sys.stdout
    widths = [len(h) for h in headers]
    text_rows = [[str(cell) for cell in row] for row in rows]
    for row in text_rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*headers), file=out)
    print(fmt.format(*("-" * w for w in widths)), file=out)
    for row in text_rows:
        print(fmt.format(*row), file=out)


def _orchestrator(args) -> Orchestrator:
    return Orchestrator(home=args.home or default_home())


def _binding(args) -> ServerBinding:
    if getattr(args, "server_dir", None):
        return ServerBinding.local(args.server_dir)
    if getattr(args, "server", None):
        return ServerBinding.remote(args.server, token=args.token)
    raise ProtocolError(422, "one of --server-dir or --server is required")


def cmd_list(args) -> int:
    orch = _orchestrator(args)
    models, datasets, warnings = orch.discover(args.dir)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    show_models = args.models or not args.datasets
    show_datasets = args.datasets or not args.models
    if args.json:
        if show_models:
            for card in models:
                print(encode_message(card).decode("utf-8"))
        if show_datasets:
            for card in datasets:
                print(encode_message(card).decode("utf-8"))
        return 0
    if show_models:
        print(f"models ({len(models)}):")
        _print_table(
            ["model_id", "endpoint", "parameters"],
            [(c.model_id, c.endpoint.get("kind", "?"), c.parameter_size or "-") for c in models])
    if show_datasets:
        if show_models:
            print()
        print(f"datasets ({len(datasets)}):")
        _print_table(
            ["dataset_id", "version", "samples", "metrics"],
            [(c.dataset_id, c.version, c.sample_count, ",".join(c.metrics)) for c in datasets])
    return 0


def cmd_new(args) -> int:
    orch = _orchestrator(args)
    generation = {}
    if args.max_tokens is not None:
        generation["max_tokens"] = args.max_tokens
    if args.temperature is not None:
        generation["temperature"] = args.temperature
    concurrency = {"max_limit": args.concurrency}
    rate = None
    if args.rate is not None:
        rate = {"capacity": args.bucket_capacity, "refill_rate": args.rate}
    task = orch.create_evaluation(
        args.model, args.dataset, _binding(args),
        model_dirs=args.model_dir,
        generation=generation,
        concurrency=concurrency,
        rate=rate,
        submit_every=args.submit_every,
    )
    if args.json:
        print(json.dumps({"evaluation_id": task.id, "state": task.state.value}))
    else:
        print(f"created evaluation {task.id} ({task.state.value})")
    return 0


def _run_with_sigint(orch: Orchestrator, evaluation_id: str, capture):
    interrupt = threading.Event()
    previous = signal.getsignal(signal.SIGINT)

    def on_sigint(signum, frame):
        print("interrupt received; pausing after in-flight calls drain", file=sys.stderr)
        interrupt.set()

    signal.signal(signal.SIGINT, on_sigint)
    try:
        return orch.run(evaluation_id, interrupt=interrupt, capture=capture)
    finally:
        signal.signal(signal.SIGINT, previous)


def _finish_run(orch, task, args) -> int:
    if args.capture_wire and args.capture is not None:
        args.capture.dump(args.capture_wire)
    if args.json:
        print(json.dumps({"evaluation_id": task.id, "state": task.state.value,
                          "progress": task.progress.to_dict(),
                          "last_error": task.last_error}))
    else:
        print(f"evaluation {task.id}: {task.state.value} "
              f"(generated {task.progress.generated}, submitted {task.progress.submitted})")
        if task.last_error:
            print(f"  cause: {task.last_error}", file=sys.stderr)
    if task.state.value == "completed":
        report = orch.stored_report(task.id)
        if not args.json:
            for metric, score in sorted(report.overall.items()):
                print(f"  {metric}: {score:.4f}")
        return 0
    return 0 if task.state.value == "paused" else 1


def cmd_run(args) -> int:
    orch = _orchestrator(args)
    args.capture = WireLog() if args.capture_wire else None
    task = _run_with_sigint(orch, args.id, args.capture)
    return _finish_run(orch, task, args)


def cmd_pause(args) -> int:
    orch = _orchestrator(args)
    orch.request_pause(args.id)
    print(f"pause requested for {args.id}")
    return 0


def cmd_resume(args) -> int:
    orch = _orchestrator(args)
    args.capture = WireLog() if args.capture_wire else None
    task = _run_with_sigint(orch, args.id, args.capture)
    return _finish_run(orch, task, args)


def cmd_status(args) -> int:
    orch = _orchestrator(args)
    snapshot = orch.status(args.id)
    if args.json:
        print(json.dumps({
            "evaluation_id": snapshot.evaluation_id,
            "state": snapshot.state.value,
            "model_id": snapshot.model_id,
            "dataset_id": snapshot.dataset_id,
            "progress": snapshot.progress,
            "rate_events": snapshot.rate_events,
            "last_error": snapshot.last_error,
            "report_available": snapshot.report_available,
        }))
        return 0
    print(f"evaluation {snapshot.evaluation_id}")
    print(f"  state:       {snapshot.state.value}")
    print(f"  model:       {snapshot.model_id}")
    print(f"  dataset:     {snapshot.dataset_id}")
    print(f"  progress:    fetched={snapshot.progress['fetched']} "
          f"generated={snapshot.progress['generated']} submitted={snapshot.progress['submitted']}")
    print(f"  rate events: {snapshot.rate_events}")
    if snapshot.last_error:
        print(f"  last error:  {snapshot.last_error}")
    print(f"  report:      {'available' if snapshot.report_available else 'not yet'}")
    return 0


def cmd_results(args) -> int:
    orch = _orchestrator(args)
    report = orch.stored_report(args.id)
    if args.json:
        # verbatim protocol record, byte-identical to the stored report.json
        sys.stdout.write(encode_message(report).decode("utf-8") + "\n")
        return 0
    print(f"report for {report.evaluation_id}")
    print(f"  model:   {report.model_id}")
    print(f"  dataset: {report.dataset_id}@{report.version}")
    counts = report.counts
    print(f"  counts:  served={counts.get('served')} submitted={counts.get('submitted')} "
          f"scored={counts.get('scored')}")
    for metric, score in sorted(report.overall.items()):
        print(f"  {metric}: {score:.4f}")
    for subtask, scores in sorted(report.per_subtask.items()):
        rendered = " ".join(f"{m}={s:.4f}" for m, s in sorted(scores.items()))
        print(f"    [{subtask}] {rendered}")
    return 0


def cmd_leaderboard(args) -> int:
    orch = _orchestrator(args)
    sort_by = None
    if args.sort:
        dataset, _, metric = args.sort.partition(":")
        sort_by = (dataset, metric)
    board = orch.aggregate(dataset_id=args.dataset, sort_by=sort_by)
    if args.json:
        print(json.dumps({
            "columns": [list(c) for c in board.columns],
            "rows": [[model, {f"{d}:{m}": v for (d, m), v in scores.items()}]
                     for model, scores in board.rows],
        }))
        return 0
    if not board.rows:
        print("no reports found")
        return 0
    headers = ["model"] + [f"{d}:{m}" for d, m in board.columns]
    rows = []
    for model, scores in board.rows:
        rows.append([model] + [
            f"{scores[c]:.4f}" if c in scores else "-" for c in board.columns])
    _print_table(headers, rows)
    return 0


def cmd_serve(args) -> int:
    host, _, port = args.listen.rpartition(":")
    server = serve(
        args.dir, listen_address=(host or "127.0.0.1", int(port)),
        token=args.token, model_dirs=args.model_dir)
    print(f"serving {len(args.dir)} benchmark package(s) on {server.base_url}", flush=True)
    try:
        server.wait()
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
        server.shutdown()
    return 0


def cmd_validate(args) -> int:
    path = Path(args.path)
    diagnostics = []
    if path.is_file() and path.name.endswith(MODEL_CARD_MARKER):
        try:
            load_model_card(path)
        except ProtocolError as exc:
            diagnostics.append(str(exc))
    elif path.is_dir():
        diagnostics = validate_package(path)
    else:
        diagnostics = [f"{path}: not a model card file or benchmark package directory"]
    if diagnostics:
        for diag in diagnostics:
            print(f"invalid: {diag}", file=sys.stderr)
        return 1
    print("OK")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dep", description="benchmark evaluation client and server")
    parser.add_argument("--home", default=None, help="state root (default: $DEP_HOME or ~/.dep)")
    parser.add_argument("--json", action="store_true", help="emit protocol records as JSON")
    # the same flags are accepted after the verb; SUPPRESS keeps the
    # subparser from clobbering a value given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--home", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("list", help="discover model and dataset cards", parents=[common])
    p.add_argument("--dir", action="append", default=[], required=True,
                   help="directory to scan (repeatable)")
    p.add_argument("--models", action="store_true", help="list models only")
    p.add_argument("--datasets", action="store_true", help="list datasets only")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("new", help="register a new evaluation task", parents=[common])
    p.add_argument("--model", required=True, help="model_id to evaluate")
    p.add_argument("--dataset", required=True, help="dataset_id to evaluate on")
    p.add_argument("--server-dir", help="local benchmark directory to mount")
    p.add_argument("--server", help="remote benchmark server base URL")
    p.add_argument("--token", help="bearer token for a remote server")
    p.add_argument("--model-dir", action="append", default=[],
                   help="directory with model cards (repeatable)")
    p.add_argument("--concurrency", type=int, default=4, help="max in-flight calls")
    p.add_argument("--rate", type=float, default=None, help="token bucket refill rate per second")
    p.add_argument("--bucket-capacity", type=int, default=10, help="token bucket capacity")
    p.add_argument("--submit-every", type=int, default=0,
                   help="interim submission every N samples (0 = single final batch)")
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.set_defaults(func=cmd_new)

    for verb, help_text in (("run", "run an evaluation"), ("resume", "resume from the journal")):
        p = sub.add_parser(verb, help=help_text, parents=[common])
        p.add_argument("id", help="evaluation ID")
        p.add_argument("--capture-wire", default=None,
                       help="write every exchanged message to this NDJSON file")
        p.set_defaults(func=cmd_run if verb == "run" else cmd_resume)

    p = sub.add_parser("pause", help="request a running evaluation to pause", parents=[common])
    p.add_argument("id")
    p.set_defaults(func=cmd_pause)

    p = sub.add_parser("status", help="show a task snapshot", parents=[common])
    p.add_argument("id")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("results", help="show a stored report", parents=[common])
    p.add_argument("id")
    p.set_defaults(func=cmd_results)

    p = sub.add_parser("leaderboard", help="compare stored reports across models", parents=[common])
    p.add_argument("--dataset", default=None, help="restrict to one dataset")
    p.add_argument("--sort", default=None, help="sort column as dataset:metric")
    p.set_defaults(func=cmd_leaderboard)

    p = sub.add_parser("serve", help="serve benchmark packages over HTTP", parents=[common])
    p.add_argument("dir", nargs="+", help="benchmark package directories")
    p.add_argument("--listen", default="127.0.0.1:8459", help="host:port to bind")
    p.add_argument("--token", default=None, help="require this bearer token")
    p.add_argument("--model-dir", action="append", default=[],
                   help="directory with judge model cards (repeatable)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("validate", help="preflight a model card or benchmark package", parents=[common])
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        detail = f" at {exc.path}" if exc.path else ""
        print(f"error ({exc.code}){detail}: {exc.message}", file=sys.stderr)
        return 1
    except (PackageError, JournalError, DiscoveryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
