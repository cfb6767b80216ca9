#!/usr/bin/env python3
# -*- coding: utf8 -*-
"""
This file is the entrypoint of the speech recognizer: python -m src <command> [options].
"""
import argparse
import sys

from libs.return_objects import ErrorResponse
from libs.speech_mamba.Errors import UsageError
from src.program import run


class _Parser(argparse.ArgumentParser):
    """ArgumentParser raising UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _common(parser):
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--log", default="log.log", help="log file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m src", description="Speech-Mamba speech recognizer toolkit")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = commands.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--train-manifest")
    p.add_argument("--dev-manifest")
    p.add_argument("--vocab", help="vocabulary file; built from the train transcripts when omitted")
    p.add_argument("--output-dir")
    p.add_argument("--feature-cache")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic tone utterances")

    p = commands.add_parser("decode", help="decode a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="hypothesis table, id<TAB>text")
    p.add_argument("--mode", default="beam")
    p.add_argument("--nbest-json")
    p.add_argument("--feature-cache")
    p.add_argument("--workers", type=int, default=4)

    p = commands.add_parser("score", help="word error rate of two id<TAB>text tables")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)

    p = commands.add_parser("build-longcontext", help="merge utterances into long-context subsets")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-s", type=float)
    p.add_argument("--max-s", type=float)
    p.add_argument("--preset", choices=sorted(("L", "70", "80", "90", "100")))
    p.add_argument("--output-dir")
    p.add_argument("--out")
    p.add_argument("--reference")
    p.add_argument("--dry-run", action="store_true")

    p = commands.add_parser("gradcheck", help="finite difference gradient suite")
    _common(p)
    p.add_argument("--coords", type=int, default=3, help="sampled coordinates per composite parameter, 0 for all")

    p = commands.add_parser("bench-scan", help="scan timings and encoder scaling")
    _common(p)
    p.add_argument("--lengths", type=int, nargs="+", default=[4096, 8192])
    p.add_argument("--repeats", type=int, default=5)

    p = commands.add_parser("prepare-manifest", help="LibriSpeech split to manifest")
    _common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as e:
        response = ErrorResponse.from_exception(e)
    else:
        options = vars(args)
        response = run(options.pop("command"), options, log_path=options.pop("log"))
    print(response.to_json())
    return response.exit_code


if __name__ == "__main__":
    sys.exit(main())
