"""Profiling loop and evaluation metrics.

profile_event drives any experiment driver through the capture / signature /
block cycle until the frontier is exhausted, producing a finished SigTree.
The rest of the module turns finished trees into reports: robustness score,
DNS domain and resolver breakdowns, and a CSV summary.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

from .core import DnsSelector, HostKind, Topology
from .blocklist import compile_rules, matches_packet
from .pcapio import filter_control_plane
from .signature import (
    DnsTable,
    SeedSource,
    accept_signature,
    aggregate_flows,
    extract_signature,
)
from .sigtree import NodeStatus, RootFailed, SigTree, TreeStats


class BlockingViolation(AssertionError):
    """A capture contained a packet the active rules should have dropped."""


@dataclass(frozen=True)
class ProfileConfig:
    m: int = 20
    seed: int = 0
    pruning: bool = True
    max_depth: Optional[int] = None
    capture_seconds: float = 20.0
    # live drivers wait a random delay in this range between captures;
    # simulation treats it as a no-op
    inter_capture_wait: Tuple[float, float] = (40.0, 150.0)
    audit_blocking: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be at least 1 when set")


def profile_event(driver, config: ProfileConfig) -> SigTree:
    """Explore the event's signature tree breadth-first.

    Each frontier node is profiled under the deny rules compiled from its
    blocking set; the intersection signature of the successful captures
    becomes its children.  The DNS table persists across iterations.
    """
    topo = driver.topology()
    seed_entries = dict(driver.dns_seed()) if hasattr(driver, "dns_seed") else {}
    table = DnsTable(
        topo,
        seed_source=SeedSource.MODEL_RECORDS if seed_entries
        else SeedSource.EMPTY,
        entries=seed_entries,
    )
    tree = SigTree(pruning=config.pruning)
    experiments = 0
    while (handle := tree.next_node()) is not None:
        if (config.max_depth is not None
                and tree.node(handle).depth > config.max_depth):
            tree.prune(handle, "depth-capped")
            continue
        rules = compile_rules(tree.blocking_set(handle))
        captures = driver.run(rules, config.m,
                              config.seed + experiments * config.m)
        experiments += 1
        if config.audit_blocking:
            _audit_blocking(captures, rules, table, topo)
        successes = [c for c in captures if c.success]
        signature = None
        if successes:
            filtered = [filter_control_plane(c.trace) for c in successes]
            flow_sets = aggregate_flows(filtered, topo, table)
            signature = extract_signature(flow_sets, m=config.m)
        if signature is not None and accept_signature(signature):
            tree.add_children(handle, signature)
        elif handle == tree.root:
            raise RootFailed(
                f"event produced {len(successes)}/{config.m} successful "
                "captures with no blocking")
        else:
            tree.mark_failed(handle)
    tree.experiment_count = experiments
    tree.capture_count = experiments * config.m
    return tree


def _audit_blocking(captures, rules, table: DnsTable, topo: Topology):
    for capture in captures:
        for pkt in capture.trace.packets:
            if matches_packet(rules, pkt, table, topo):
                raise BlockingViolation(
                    f"capture seed {capture.seed}: packet at {pkt.ts_us}us "
                    f"({pkt.src_addr} -> {pkt.dst_addr}) matches active rules")


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class DnsStats:
    domains_first_level: frozenset
    domains_hidden: frozenset
    resolvers_first_level: frozenset
    resolvers_hidden: frozenset


def dns_stats(tree: SigTree) -> DnsStats:
    """Domain names and DNS resolvers discovered, split by tree depth.

    A name or resolver counts as hidden when it appears only deeper than the
    first level.  Domains come from Domain-kind endpoints and DNS question
    names; resolvers are the responder endpoints of DNS-selector flows.
    """
    domain_depth: Dict[str, int] = {}
    resolver_depth: Dict[str, int] = {}
    for handle, node in enumerate(tree.nodes):
        if handle == tree.root:
            continue
        flow = node.flow
        names = {host.value for host in (flow.initiator, flow.responder)
                 if host.kind is HostKind.DOMAIN}
        if isinstance(flow.app, DnsSelector):
            names.add(flow.app.qname)
            resolver = flow.responder.display()
            resolver_depth[resolver] = min(
                resolver_depth.get(resolver, node.depth), node.depth)
        for name in names:
            domain_depth[name] = min(domain_depth.get(name, node.depth),
                                     node.depth)
    return DnsStats(
        domains_first_level=frozenset(
            n for n, d in domain_depth.items() if d == 1),
        domains_hidden=frozenset(
            n for n, d in domain_depth.items() if d > 1),
        resolvers_first_level=frozenset(
            n for n, d in resolver_depth.items() if d == 1),
        resolvers_hidden=frozenset(
            n for n, d in resolver_depth.items() if d > 1),
    )


@dataclass(frozen=True)
class EventReport:
    label: str
    stats: TreeStats
    dns: DnsStats
    experiment_count: int
    capture_count: int
    group: Tuple[Tuple[str, str], ...] = ()

    @property
    def robustness_score(self) -> int:
        return self.stats.hidden_flows


def build_report(tree: SigTree, label: str, group=None) -> EventReport:
    group_items = tuple(sorted((group or {}).items()))
    return EventReport(
        label=label,
        stats=tree.stats(),
        dns=dns_stats(tree),
        experiment_count=getattr(tree, "experiment_count", 0),
        capture_count=getattr(tree, "capture_count", 0),
        group=group_items,
    )


CSV_COLUMNS = (
    "event", "first_level", "hidden", "robustness_score",
    "pruned_d2", "pruned_d3plus", "failed",
    "domains_fl", "domains_hidden", "resolvers_fl", "resolvers_hidden",
)

_GROUP_AXES = ("category", "app", "manufacturer")


def render_csv(reports: Iterable[EventReport]) -> str:
    """One row per event plus '#'-prefixed summary footer lines."""
    reports = sorted(reports, key=lambda r: r.label)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        pruned = dict(report.stats.pruned_per_depth)
        writer.writerow([
            report.label,
            report.stats.first_level,
            report.stats.hidden_flows,
            report.robustness_score,
            pruned.get(2, 0),
            sum(count for depth, count in pruned.items() if depth >= 3),
            report.stats.failed_count,
            len(report.dns.domains_first_level),
            len(report.dns.domains_hidden),
            len(report.dns.resolvers_first_level),
            len(report.dns.resolvers_hidden),
        ])
    scored = [r for r in reports if r.robustness_score >= 1]
    mean = (sum(r.robustness_score for r in scored) / len(scored)
            if scored else 0.0)
    buf.write(f"# events={len(reports)}\n")
    buf.write(f"# scored={len(scored)}\n")
    buf.write(f"# mean_robustness_scored={mean:.2f}\n")
    for axis in _GROUP_AXES:
        values = sorted({value for r in reports
                         for key, value in r.group if key == axis})
        for value in values:
            members = [r for r in reports if (axis, value) in r.group]
            group_mean = (sum(r.robustness_score for r in members)
                          / len(members))
            buf.write(f"# group {axis}={value} events={len(members)} "
                      f"mean_robustness={group_mean:.2f}\n")
    return buf.getvalue()
