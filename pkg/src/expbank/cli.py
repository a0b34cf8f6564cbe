"""Command line entry point: abstract, search, stats, serve, harness.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from expbank.abstract import AbstractionConfig, build_bank, make_embedder
from expbank.core import read_trajectories, state_from_record
from expbank.embed import EMBED_URL_ENV, provider_for_bank
from expbank.errors import ExpBankError
from expbank.judge import JudgeConfig, ScriptedJudge, judge_from_env
from expbank.search import SearchParams, deep_search, deep_wide_search, format_guidance, wide_search
from expbank.viewpoint import VIEWPOINT_IDS

logger = logging.getLogger("expbank")


def _viewpoint_list(text: str) -> list[str]:
    ids = [v.strip() for v in text.split(",") if v.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("expected at least one viewpoint id")
    for v in ids:
        if v not in VIEWPOINT_IDS:
            raise argparse.ArgumentTypeError(f"unknown viewpoint {v!r} (choose from {', '.join(VIEWPOINT_IDS)})")
    return ids


def _threshold(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 10.0:
        raise argparse.ArgumentTypeError("threshold must lie in [0, 10]")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    defaults = SearchParams()
    p = argparse.ArgumentParser(prog="expbank", description="State-level experience bank")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("abstract", help="build a bank from a trajectory file")
    a.add_argument("--trajectories", required=True)
    a.add_argument("--bank", required=True)
    a.add_argument("--judge", choices=("scripted", "remote"), default="scripted")
    a.add_argument("--script", help="JSON script for the scripted judge")
    a.add_argument("--threshold", type=_threshold, default=AbstractionConfig().threshold)
    a.add_argument("--dim", type=_positive, default=AbstractionConfig().dim)
    a.add_argument("--model", default=JudgeConfig().model_name)

    s = sub.add_parser("search", help="query a saved bank")
    s.add_argument("--bank", required=True)
    s.add_argument("--state", required=True, help="JSON file holding one state record")
    s.add_argument("--mode", choices=("wide", "deep", "deep_wide"), default="deep_wide")
    s.add_argument("--viewpoints", type=_viewpoint_list, default=list(defaults.viewpoint_sequence))
    s.add_argument("--k", type=_positive, default=defaults.k)

    st = sub.add_parser("stats", help="summarize a saved bank")
    st.add_argument("--bank", required=True)

    sv = sub.add_parser("serve", help="serve a bank over HTTP")
    sv.add_argument("--bank", required=True)
    sv.add_argument("--listen", default=None)
    sv.add_argument("--judge", choices=("none", "scripted", "remote"), default="none")
    sv.add_argument("--script")

    h = sub.add_parser("harness", help="run the synthetic benchmark")
    h.add_argument("--tasks", type=int, default=100)
    h.add_argument("--seed", type=int, default=42)
    h.add_argument("--no-experience", action="store_true")
    h.add_argument("--k", type=_positive, default=defaults.k)
    h.add_argument("--rounds", type=_positive, default=defaults.rounds)
    return p


def _kv(report: dict) -> str:
    lines = []
    for key, value in report.items():
        if isinstance(value, (list, dict)):
            value = json.dumps(value, sort_keys=True, separators=(",", ":"))
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def _scripted(path: str | None) -> ScriptedJudge:
    if path is None:
        raise ExpBankError("the scripted judge needs --script")
    with open(path, encoding="utf-8") as fh:
        return ScriptedJudge.from_json(json.load(fh))


def cmd_abstract(args) -> int:
    from expbank.store import save

    config = AbstractionConfig(
        threshold=args.threshold,
        judge=JudgeConfig(mode=args.judge, model_name=args.model),
        embed_provider="remote" if os.environ.get(EMBED_URL_ENV) else "hash",
        dim=args.dim,
    )
    judge = _scripted(args.script) if args.judge == "scripted" else judge_from_env(config.judge)
    embedder = make_embedder(config)
    read = read_trajectories(args.trajectories)
    for err in read.errors:
        print(f"skipped record: {err}", file=sys.stderr)
    bank, stats = build_bank(read.trajectories, config, judge, embedder)
    save(bank, args.bank)
    print(_kv({"skipped_records": read.skipped, **stats.to_dict(), "bank_size": len(bank)}))
    return 0


def cmd_search(args, parser) -> int:
    from expbank.store import load

    if args.mode == "wide" and len(args.viewpoints) != 1:
        parser.error("--mode wide takes exactly one viewpoint")
    bank = load(args.bank)
    with open(args.state, encoding="utf-8") as fh:
        state = state_from_record(json.load(fh))
    embedder = provider_for_bank(bank.config.provider, bank.dim)
    if args.mode == "wide":
        result = wide_search(bank, state, args.viewpoints[0], args.k, embedder)
    elif args.mode == "deep":
        result = deep_search(bank, state, args.viewpoints, embedder)
    else:
        params = SearchParams(k=args.k, rounds=len(args.viewpoints), viewpoint_sequence=tuple(args.viewpoints))
        result = deep_wide_search(bank, state, params, embedder)
    print(format_guidance(result))
    print(json.dumps(result.to_records(), ensure_ascii=False))
    return 0


def cmd_stats(args) -> int:
    from expbank.store import load

    print(_kv(load(args.bank).stats()))
    return 0


def cmd_serve(args) -> int:
    from expbank.serve import BankService, make_server
    from expbank.store import load

    bank = load(args.bank)
    embedder = provider_for_bank(bank.config.provider, bank.dim)
    judge = None
    mode = "scripted"
    if args.judge == "scripted":
        judge = _scripted(args.script)
    elif args.judge == "remote":
        mode = "remote"
        judge = judge_from_env(JudgeConfig(mode="remote"))
    config = AbstractionConfig(threshold=bank.config.threshold, dim=bank.dim, judge=JudgeConfig(mode=mode))
    server = make_server(BankService(bank, embedder, judge, config), args.listen)
    host, port = server.server_address[:2]
    print(f"listening={host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_harness(args) -> int:
    from expbank.harness import run_benchmark

    params = SearchParams(k=args.k, rounds=args.rounds)
    report = run_benchmark(args.tasks, args.seed, not args.no_experience, params)
    print(report.render())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    if args.command == "harness" and (args.tasks < 2 or args.tasks % 2):
        parser.error("--tasks must be an even integer >= 2")
    try:
        if args.command == "abstract":
            return cmd_abstract(args)
        if args.command == "search":
            return cmd_search(args, parser)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "serve":
            return cmd_serve(args)
        return cmd_harness(args)
    except (ExpBankError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
