"""Command-line front end.

Every subcommand talks to the HTTP service: in-process by default (no server
needed), or a remote instance via --server. Light results print to stdout;
file artifacts are written client-side for compile, server-side for dataset,
train, and eval.

Exit codes: 0 success, 1 usage or invalid input, 2 verification failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import base64
import sys
import time

import httpx

from . import __version__
from .experiment import ExperimentConfig
from .service.app import create_app

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the documented code is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    # in-process: drive the ASGI app through a synchronous portal
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        response = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise CliError(f"cannot reach service: {exc}", EXIT_IO)
    if response.status_code == 422:
        detail = response.json().get("detail", response.text)
        raise CliError(str(detail), EXIT_USAGE)
    if response.status_code == 409:
        detail = response.json().get("detail", response.text)
        raise CliError(str(detail), EXIT_IO)
    if response.status_code != 200:
        raise CliError(f"service error {response.status_code}: {response.text}",
                       EXIT_IO)
    return response.json()


def _alphabet_arg(value: str) -> list[str]:
    names = [part.strip() for part in value.split(",") if part.strip()]
    if not names:
        raise argparse.ArgumentTypeError("alphabet must list at least one symbol")
    return names


def _grammar_payload(args) -> dict:
    return {
        "task_class": args.task_class,
        "alphabet": args.alphabet,
        "min_sequences": args.min_sequences,
        "max_sequences": args.max_sequences,
        "min_length": args.min_length,
        "max_length": args.max_length,
        "disjunction_prob": args.disjunction_prob,
    }


def _add_grammar_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--task-class", default="partially_ordered",
                        choices=["partially_ordered", "global_avoidance"])
    parser.add_argument("--alphabet", type=_alphabet_arg, required=True,
                        help="comma-separated proposition names")
    parser.add_argument("--min-sequences", type=int, default=1)
    parser.add_argument("--max-sequences", type=int, default=1)
    parser.add_argument("--min-length", type=int, default=1)
    parser.add_argument("--max-length", type=int, default=1)
    parser.add_argument("--disjunction-prob", type=float, default=0.25)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_compile(args, client: httpx.Client) -> int:
    data = _post(client, "/compile", {
        "formula": args.formula,
        "alphabet": args.alphabet,
        "minimized": not args.no_minimize,
        "state_cap": args.state_cap,
    })
    histogram = ", ".join(
        f"{int(verdict):+d}: {count}" if int(verdict) != 0 else f"0: {count}"
        for verdict, count in sorted(data["output_histogram"].items(),
                                     key=lambda kv: int(kv[0]))
    )
    print(f"formula: {data['formula']}")
    print(f"states: {data['n_states']} (outputs {histogram})")
    print(f"hash: {data['structural_hash']}")
    if args.out:
        try:
            with open(args.out, "wb") as fh:
                fh.write(base64.b64decode(data["machine_b64"]))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO)
        print(f"machine: {args.out}")
    if args.dot:
        try:
            with open(args.dot, "w", encoding="utf-8") as fh:
                fh.write(data["dot"])
        except OSError as exc:
            raise CliError(f"cannot write {args.dot}: {exc}", EXIT_IO)
        print(f"dot: {args.dot}")
    return EXIT_OK


def cmd_sample(args, client: httpx.Client) -> int:
    payload = _grammar_payload(args)
    payload.update({"count": args.count, "seed": args.seed})
    data = _post(client, "/sample", payload)
    for formula in data["formulas"]:
        print(formula)
    return EXIT_OK


def cmd_dataset(args, client: httpx.Client) -> int:
    payload = _grammar_payload(args)
    payload.update({
        "count": args.count,
        "seed": args.seed,
        "manifest_path": args.out,
        "state_cap": args.state_cap,
    })
    data = _post(client, "/dataset/build", payload)
    states = data["machine_states"]
    print(f"wrote {data['count']} tasks to {data['manifest_path']} "
          f"(machine states: min {min(states)}, max {max(states)})")
    return EXIT_OK


def cmd_train(args, client: httpx.Client) -> int:
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                config_text = fh.read()
        except OSError as exc:
            raise CliError(f"cannot read {args.config}: {exc}", EXIT_IO)
    else:
        try:
            profile = getattr(ExperimentConfig, args.profile)
        except AttributeError:
            raise CliError(f"unknown profile {args.profile!r}")
        config_text = profile().to_text()
    if args.set:
        from . import kvconfig

        pairs = kvconfig.loads(config_text)
        for override in args.set:
            if "=" not in override:
                raise CliError(f"--set expects key=value, got {override!r}")
            key, _, value = override.partition("=")
            pairs[key.strip()] = value.strip()
        config_text = kvconfig.dumps(pairs)
    out_dir = args.out_dir or time.strftime("runs/%Y%m%d-%H%M%S")
    data = _post(client, "/train", {
        "config_text": config_text,
        "out_dir": out_dir,
    })
    print(f"run: {data['run_dir']}")
    print(f"episodes: {data['episodes']}  table entries: {data['table_entries']}  "
          f"grounder rounds: {data['grounder_rounds']}")
    print(f"mean return (last 100 episodes): {data['mean_return_tail']:.3f}")
    return EXIT_OK


def cmd_eval(args, client: httpx.Client) -> int:
    data = _post(client, "/eval", {
        "run_dir": args.run_dir,
        "splits": args.splits.split(","),
    })
    print("distribution,total_return,discounted_return,episodes,seed")
    for row in data["rows"]:
        print(f"{row['distribution']},{row['total_return']:.10g},"
              f"{row['discounted_return']:.10g},{row['episodes']},{row['seed']}")
    print(f"metrics: {data['metrics_path']}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args, client: httpx.Client) -> int:
    payload = {
        "alphabet": args.alphabet,
        "max_len": args.max_len,
        "seed": args.seed,
        "state_cap": args.state_cap,
    }
    if args.formula:
        payload["formulas"] = args.formula
    if args.n_formulas:
        payload["n_formulas"] = args.n_formulas
        payload["grammar"] = _grammar_payload(args)
    data = _post(client, "/verify", payload)
    print(f"checked {data['formulas']} formulas over {data['traces']} "
          f"trace prefixes")
    if not data["ok"]:
        for mismatch in data["mismatches"]:
            print(f"MISMATCH: {mismatch}", file=sys.stderr)
        return EXIT_VERIFY
    print("all machines agree with progression")
    return EXIT_OK


def cmd_serve(args, client: httpx.Client) -> int:
    import uvicorn

    uvicorn.run(create_app(), host=args.host, port=args.port,
                log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="symground",
        description="Temporal tasks compiled to reward machines, with "
                    "learned symbol grounding and a tabular agent.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="formula -> minimal machine")
    p.add_argument("formula")
    p.add_argument("--alphabet", type=_alphabet_arg, required=True)
    p.add_argument("--out", default=None, help="write the machine file here")
    p.add_argument("--dot", default=None, help="write DOT here")
    p.add_argument("--no-minimize", action="store_true")
    p.add_argument("--state-cap", type=int, default=10_000)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("sample", help="print random task formulas")
    _add_grammar_args(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("dataset", help="build a task manifest + machines")
    _add_grammar_args(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest path (.tsv)")
    p.add_argument("--state-cap", type=int, default=10_000)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="run joint training into a run directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--profile", default="desk",
                   help="named config profile when no --config is given "
                        "(desk, minecraft, minecraft_avoidance, flatworld, "
                        "bootcamp)")
    p.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--out-dir", default=None,
                   help="run directory (default: runs/<timestamp>)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--splits", default="base,+dep,+conj")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="machine vs progression agreement")
    _add_grammar_args(p)
    p.add_argument("--formula", action="append", default=[],
                   help="explicit formula to check (repeatable)")
    p.add_argument("--n-formulas", type=int, default=0,
                   help="additionally check this many sampled formulas")
    p.add_argument("--max-len", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-cap", type=int, default=10_000)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _client(args.server) as client:
            return args.fn(args, client)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
