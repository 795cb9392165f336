"""``psec`` command line.

    psec gen-data --set task=point_safe --set dataset=data/ps.ndjson
    psec pretrain --config run.json
    psec skills ls --set library=runs/library

Errors go to stderr as one JSON object and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..skills import LibraryError, add_skill, load_library, remove_skill, save_library
from .config import ConfigError, RunConfig, load_config, parse_override
from .pipelines import (
    PipelineError,
    cmd_compare,
    cmd_dump_features,
    cmd_eval,
    cmd_gen_data,
    cmd_pretrain,
    cmd_train_composer,
    cmd_train_skill,
)
from .regimes import REGIMES, run_regime

COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-skill": cmd_train_skill,
    "train-composer": cmd_train_composer,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "dump-features": cmd_dump_features,
}

EXIT_CONFIG, EXIT_RUN = 2, 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psec", description="skill library training and composition")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        _common(sub.add_parser(verb))
    sk = sub.add_parser("skills", help="inspect or edit a skill library")
    sk_sub = sk.add_subparsers(dest="action", required=True)
    _common(sk_sub.add_parser("ls"))
    add = sk_sub.add_parser("add", help="copy a skill from another library with the same base")
    add.add_argument("source", help="source library directory")
    add.add_argument("name")
    add.add_argument("--as", dest="new_name")
    _common(add)
    rm = sk_sub.add_parser("rm")
    rm.add_argument("name")
    _common(rm)
    reg = sub.add_parser("regime", help="run one end-to-end regime")
    reg.add_argument("name", choices=sorted(REGIMES))
    _common(reg)
    return parser


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _skills(args, cfg: RunConfig) -> dict:
    lib = load_library(cfg.library)
    if args.action == "ls":
        return {
            "library": cfg.library,
            "base_hash": lib.base_hash,
            "skills": [
                {"name": e.name, "rank": e.adapter.rank, "scale": e.adapter.scale, "provenance": e.provenance}
                for e in lib.entries
            ],
            "artifacts": [{"name": a.name, "kind": a.kind} for a in lib.artifacts],
        }
    if args.action == "add":
        src = load_library(args.source)
        if src.base_hash != lib.base_hash:
            raise PipelineError(f"{args.source} was trained on a different base ({src.base_hash[:12]} vs {lib.base_hash[:12]})")
        entry = src.get(args.name)
        if args.new_name:
            entry = type(entry)(args.new_name, entry.adapter, entry.provenance, entry.created_at)
        save_library(add_skill(lib, entry), cfg.library)
        return {"added": entry.name, "library": cfg.library}
    save_library(remove_skill(lib, args.name), cfg.library)
    return {"removed": args.name, "library": cfg.library}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "regime":
            data = {}
            if args.config:
                data = json.loads(open(args.config).read())
            data.update(dict(parse_override(o) for o in args.overrides))
            _emit(run_regime(args.name, data))
            return 0
        cfg = load_config(args.config, args.overrides)
        if args.verb == "skills":
            _emit(_skills(args, cfg))
            return 0
        rep = COMMANDS[args.verb](cfg)
        _emit({"command": rep.command, "hash": rep.hash, "metrics": rep.metrics, "wall_time": rep.wall_time})
        return 0
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        code = EXIT_CONFIG
        err = exc
    except (PipelineError, LibraryError, KeyError, ValueError, RuntimeError) as exc:
        code = EXIT_RUN
        err = exc
    msg = err.args[0] if isinstance(err, KeyError) and err.args else str(err)
    print(json.dumps({"error": type(err).__name__, "message": msg, "verb": args.verb}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
