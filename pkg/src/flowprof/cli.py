"""Command-line surface for the profiling pipeline.

Subcommands: extract (pcap dir -> signature), profile (model or manifest ->
tree + report), analyze (tree JSONs -> report), rules (flows -> rule text),
simulate (model -> pcap corpus), oracle (model -> expected tree).  All
outputs are files, written atomically after inputs validate; exit code 0 on
success, 1 on input errors, 2 when the event fails with nothing blocked.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import FlowId
from .pcapio import filter_control_plane, read_pcap, write_pcap
from .signature import DnsTable, EventSignature, aggregate_flows, \
    extract_signature
from .blocklist import RuleSet, compile_rules, parse as parse_rules, render
from .sigtree import RootFailed, SigTree
from .simnet import SimDriver, load_model, oracle_tree, run_experiment
from .profiler import ProfileConfig, build_report, profile_event, render_csv


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowprof",
                     description="Smart-home traffic profiling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[], help="signature from a pcap dir")
    p.add_argument("--dir", required=True,
                   help="directory of *.pcap captures plus success.txt")
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--model", required=True,
                   help="device model supplying the network topology")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("profile", help="profile a model or manifest")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pruning", action="store_true")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--hide-failed", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("analyze", help="report from finished tree JSONs")
    p.add_argument("trees", nargs="*", help="tree JSON files")
    p.add_argument("--dir", help="directory of tree JSON files")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rules", help="compile flows to deny rules")
    p.add_argument("flows", help="JSON list of FlowId objects")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_rules)

    p = sub.add_parser("simulate", help="emit a capture corpus from a model")
    p.add_argument("--model", required=True)
    p.add_argument("rules_file", nargs="?",
                   help="deny rules applied during the captures")
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="expected tree straight from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--no-pruning", action="store_true")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--hide-failed", action="store_true")
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except RootFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        message = str(exc).replace("\n", " ").strip() or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main(sys.argv[1:]))


# -- commands ---------------------------------------------------------------------


def cmd_extract(args) -> int:
    capture_dir = Path(args.dir)
    if not capture_dir.is_dir():
        raise ValueError(f"not a directory: {capture_dir}")
    if args.m < 1:
        raise ValueError("m must be at least 1")
    pcaps = sorted(capture_dir.glob("*.pcap"))
    if len(pcaps) != args.m:
        raise ValueError(f"expected {args.m} captures, found {len(pcaps)}")
    flags_path = capture_dir / "success.txt"
    if not flags_path.is_file():
        raise ValueError(f"missing success sidecar: {flags_path}")
    flags = flags_path.read_text().split()
    if len(flags) != args.m or not set(flags) <= {"0", "1"}:
        raise ValueError(
            f"success.txt must hold {args.m} 0/1 flags, one per capture")
    topo = load_model(args.model).topology
    traces = [read_pcap(path.read_bytes()) for path in pcaps]
    successful = [t for t, flag in zip(traces, flags) if flag == "1"]
    if successful:
        filtered = [filter_control_plane(t) for t in successful]
        flow_sets = aggregate_flows(filtered, topo, DnsTable(topo))
        signature = extract_signature(flow_sets, m=args.m)
    else:
        signature = EventSignature(flows=frozenset(), m=args.m, m_plus=0)
    out = Path(args.out_dir) / "signature.json"
    _write_text(out, json.dumps(signature.to_obj(), indent=2) + "\n")
    return 0


def _profile_one(model_path: str, args) -> SigTree:
    model = load_model(model_path)
    config = ProfileConfig(
        m=args.m,
        seed=args.seed,
        pruning=not args.no_pruning,
        max_depth=args.max_depth,
    )
    return profile_event(SimDriver(model), config)


def cmd_profile(args) -> int:
    if bool(args.model) == bool(args.manifest):
        raise ValueError("exactly one of --model or --manifest is required")
    out_dir = Path(args.out_dir)
    if args.model:
        tree = _profile_one(args.model, args)
        label = Path(args.model).stem
        _write_text(out_dir / "tree.json", tree.export_json())
        _write_text(out_dir / "tree.dot", tree.to_dot(args.hide_failed))
        _write_text(out_dir / "report.csv",
                    render_csv([build_report(tree, label)]))
        return 0
    entries = _load_manifest(Path(args.manifest))
    results = []
    for entry in entries:
        tree = _profile_one(entry["model_path"], args)
        results.append((entry, tree))
    reports = []
    for entry, tree in results:
        label = entry["label"]
        _write_text(out_dir / label / "tree.json", tree.export_json())
        _write_text(out_dir / label / "tree.dot", tree.to_dot(args.hide_failed))
        reports.append(build_report(tree, label, entry.get("group")))
    _write_text(out_dir / "report.csv", render_csv(reports))
    return 0


def _load_manifest(path: Path) -> list:
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ValueError("manifest must be a non-empty JSON list")
    labels = set()
    for entry in entries:
        if not isinstance(entry, dict) or not entry.get("label") \
                or not entry.get("model_path"):
            raise ValueError(f"bad manifest entry: {entry!r}")
        label = entry["label"]
        if "/" in label or label in labels:
            raise ValueError(f"bad or duplicate manifest label {label!r}")
        labels.add(label)
        group = entry.get("group", {})
        if not isinstance(group, dict) \
                or not all(isinstance(v, str) for v in group.values()):
            raise ValueError(f"bad group for manifest label {label!r}")
        entry["model_path"] = str((path.parent
                                   / entry["model_path"]).resolve())
    return entries


def cmd_analyze(args) -> int:
    paths = [Path(p) for p in args.trees]
    if args.dir:
        tree_dir = Path(args.dir)
        if not tree_dir.is_dir():
            raise ValueError(f"not a directory: {tree_dir}")
        paths.extend(sorted(tree_dir.glob("*.json")))
    if not paths:
        raise ValueError("no tree files given")
    reports = []
    for path in paths:
        try:
            tree = SigTree.import_json(path.read_text())
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"bad tree file {path}: {exc}") from exc
        reports.append(build_report(tree, path.stem))
    _write_text(Path(args.out_dir) / "report.csv", render_csv(reports))
    return 0


def cmd_rules(args) -> int:
    try:
        obj = json.loads(Path(args.flows).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"flows file is not valid JSON: {exc}") from exc
    if isinstance(obj, dict):
        obj = obj.get("flows")
    if not isinstance(obj, list):
        raise ValueError("flows file must hold a JSON list of FlowId objects")
    flows = [FlowId.from_obj(item) for item in obj]
    _write_text(Path(args.out_dir) / "rules.txt",
                render(compile_rules(flows)))
    return 0


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    rules = RuleSet()
    if args.rules_file:
        rules = parse_rules(Path(args.rules_file).read_text())
    if args.m < 1:
        raise ValueError("m must be at least 1")
    captures = run_experiment(model, rules, args.m, args.seed)
    out_dir = Path(args.out_dir)
    for index, capture in enumerate(captures):
        _write_bytes(out_dir / f"capture_{index:03d}.pcap",
                     write_pcap(capture.trace, model.topology))
    flags = "".join(("1" if c.success else "0") + "\n" for c in captures)
    _write_text(out_dir / "success.txt", flags)
    return 0


def cmd_oracle(args) -> int:
    model = load_model(args.model)
    tree = oracle_tree(model, pruning=not args.no_pruning,
                       max_depth=args.max_depth)
    out_dir = Path(args.out_dir)
    _write_text(out_dir / "tree.json", tree.export_json())
    _write_text(out_dir / "tree.dot", tree.to_dot(args.hide_failed))
    return 0


if __name__ == "__main__":
    entrypoint()
