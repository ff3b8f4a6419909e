"""Command-line entry point: ``sllab <subcommand> [options]``.

Every RunConfig field is a ``--key`` option and may also come from a flat
``key = value`` file given with ``--config``; the command line wins.
Exit status: 0 when every required check passes, 1 otherwise, 2 on
configuration errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import lab
from .errors import ConfigError

SUBCOMMANDS = ("simulate", "schedule", "assistfn", "heatflow", "spectral", "verify-all")


def _add_config_options(p):
    p.add_argument("--config", help="flat key = value configuration file")
    for name in lab.field_names():
        if name == "experiment":
            continue
        flag = f"--{name.replace('_', '-')}"
        flags = [flag] if flag == flag.lower() else [flag, flag.lower()]
        p.add_argument(*flags, dest=name, default=None, metavar="VALUE")
    p.add_argument("--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sllab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "assistfn":
            p.add_argument("action", nargs="?", choices=["dump"], help="print the JSON record to stdout")
        if name == "heatflow":
            p.add_argument("action", nargs="?", choices=["check"], help="print one JSON report per identity")
        _add_config_options(p)
    r = sub.add_parser("report")
    r.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    r.add_argument("--out", help="write report.csv and report.txt here")
    return parser


def _config_from(args):
    overrides = {k: getattr(args, k) for k in lab.field_names() if getattr(args, k, None) is not None}
    overrides["experiment"] = args.command
    return lab.load_config(args.config, overrides)


def _load_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return lab.RunManifest.load(p)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            manifests = [_load_manifest(m) for m in args.manifests]
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        rows, code, notes = lab.report(manifests, sources=args.manifests)
        text = lab.report_text(rows, notes)
        sys.stdout.write(text)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.csv").write_text(lab.report_csv(rows), encoding="utf-8", newline="\n")
            (out / "report.txt").write_text(text, encoding="utf-8", newline="\n")
        return code
    try:
        cfg = _config_from(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    manifest = lab.run(cfg, log=log)
    action = getattr(args, "action", None)
    if action == "dump" and "assistfn.json" in manifest.artifacts:
        sys.stdout.write(manifest.artifacts["assistfn.json"])
    elif action == "check":
        for c in manifest.checks:
            rel = abs(c["lhs"] - c["rhs"]) / abs(c["rhs"]) if c["rhs"] not in (0, None) else float("nan")
            rec = {"identity": c["anchor"], "base": c["measure"], "s": c["detail"].get("s"), "lhs": c["lhs"], "rhs": c["rhs"],
                   "abs_err": abs(c["lhs"] - c["rhs"]), "rel_err": rel, "pass": c["pass"], "check": c["name"]}
            print(json.dumps(lab._plain(rec)))
    else:
        failed = [c for c in manifest.checks if c["required"] and not c["pass"]]
        print(f"{len(manifest.checks)} checks, {len(failed)} failed, {manifest.runtime_s:.1f} s -> {cfg.out_dir}")
        for c in failed:
            print(f"  FAIL [{c['anchor']}] {c['measure']}: {c['name']}")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
