"""Signature tree: breadth-first exploration state over blocked-flow paths.

Nodes live in an arena indexed by integer handles; handle 0 is the synthetic
root (no flow).  The frontier is FIFO.  With pruning enabled, a popped node
whose flow already reached a terminal explored state (Expanded or Failed)
anywhere in the tree is marked Pruned instead of being returned.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

from .core import FlowId, sorted_flows
from .signature import EventSignature


class NodeStatus(Enum):
    UNEXPLORED = "unexplored"
    EXPANDED = "expanded"
    PRUNED = "pruned"
    FAILED = "failed"


class NodeAlreadyVisited(ValueError):
    """Node left the Unexplored state once already."""


class RootFailed(RuntimeError):
    """The unblocked baseline produced no accepted signature."""


@dataclass
class SigNode:
    flow: Optional[FlowId]  # None only for the root
    parent: Optional[int]
    depth: int
    status: NodeStatus = NodeStatus.UNEXPLORED
    children: list = field(default_factory=list)
    reason: Optional[str] = None  # set for Pruned nodes


@dataclass(frozen=True)
class TreeStats:
    unique_flows: int
    first_level: int
    hidden_flows: int
    pruned_per_depth: Tuple[Tuple[int, int], ...]  # (depth, count), sorted
    failed_count: int
    node_count: int  # non-root nodes
    expanded_count: int

    @property
    def robustness_score(self) -> int:
        # flows reachable only after blocking something else
        return self.hidden_flows


class SigTree:
    def __init__(self, pruning: bool = True):
        self.pruning = pruning
        self.nodes = [SigNode(flow=None, parent=None, depth=0)]
        self.frontier = deque([0])
        self._explored: set = set()  # canonical flows with Expanded/Failed nodes
        self.experiment_count = 0
        self.capture_count = 0

    @property
    def root(self) -> int:
        return 0

    def node(self, handle: int) -> SigNode:
        return self.nodes[handle]

    def next_node(self) -> Optional[int]:
        """Pop the next frontier node; prune duplicates at pop time."""
        while self.frontier:
            handle = self.frontier.popleft()
            node = self.nodes[handle]
            if (
                self.pruning
                and node.flow is not None
                and node.flow.canonical_json() in self._explored
            ):
                node.status = NodeStatus.PRUNED
                node.reason = "duplicate"
                continue
            return handle
        return None

    def add_children(self, handle: int, signature: EventSignature) -> list:
        """Expand a node with the signature seen under its blocking set.

        Children are the signature flows minus flows already on the node's
        root path, appended in canonical sort order.  Returns their handles.
        """
        node = self.nodes[handle]
        if node.status is not NodeStatus.UNEXPLORED:
            raise NodeAlreadyVisited(f"node {handle} is {node.status.value}")
        on_path = {f.canonical_json() for f in self.blocking_set(handle)}
        fresh = [f for f in signature.flows if f.canonical_json() not in on_path]
        handles = []
        for flow in sorted_flows(set(fresh)):
            child = SigNode(flow=flow, parent=handle, depth=node.depth + 1)
            self.nodes.append(child)
            child_handle = len(self.nodes) - 1
            node.children.append(child_handle)
            self.frontier.append(child_handle)
            handles.append(child_handle)
        node.status = NodeStatus.EXPANDED
        if node.flow is not None:
            self._explored.add(node.flow.canonical_json())
        return handles

    def mark_failed(self, handle: int):
        node = self.nodes[handle]
        if handle == self.root:
            raise ValueError("root cannot be marked failed")
        if node.status is not NodeStatus.UNEXPLORED:
            raise NodeAlreadyVisited(f"node {handle} is {node.status.value}")
        node.status = NodeStatus.FAILED
        self._explored.add(node.flow.canonical_json())

    def prune(self, handle: int, reason: str):
        node = self.nodes[handle]
        if node.status is not NodeStatus.UNEXPLORED:
            raise NodeAlreadyVisited(f"node {handle} is {node.status.value}")
        node.status = NodeStatus.PRUNED
        node.reason = reason

    def blocking_set(self, handle: int) -> Tuple[FlowId, ...]:
        """Flows on the path from the root to this node, root side first."""
        flows = []
        current: Optional[int] = handle
        while current is not None:
            node = self.nodes[current]
            if node.flow is not None:
                flows.append(node.flow)
            current = node.parent
        return tuple(reversed(flows))

    def stats(self) -> TreeStats:
        unique: set = set()
        first_level: set = set()
        pruned: Dict[int, int] = {}
        failed = 0
        expanded = 0
        for handle, node in enumerate(self.nodes):
            if handle == self.root:
                continue
            key = node.flow.canonical_json()
            unique.add(key)
            if node.depth == 1:
                first_level.add(key)
            if node.status is NodeStatus.PRUNED:
                pruned[node.depth] = pruned.get(node.depth, 0) + 1
            elif node.status is NodeStatus.FAILED:
                failed += 1
            elif node.status is NodeStatus.EXPANDED:
                expanded += 1
        return TreeStats(
            unique_flows=len(unique),
            first_level=len(first_level),
            hidden_flows=len(unique - first_level),
            pruned_per_depth=tuple(sorted(pruned.items())),
            failed_count=failed,
            node_count=len(self.nodes) - 1,
            expanded_count=expanded,
        )

    # -- serialization ---------------------------------------------------------

    def _node_obj(self, handle: int) -> dict:
        node = self.nodes[handle]
        obj: dict = {
            "flow": None if node.flow is None else node.flow.to_obj(),
            "status": node.status.value,
            "depth": node.depth,
        }
        if node.reason is not None:
            obj["reason"] = node.reason
        obj["children"] = [self._node_obj(c) for c in node.children]
        return obj

    def to_obj(self) -> dict:
        root_obj = self._node_obj(self.root)
        del root_obj["flow"]
        return {"root": root_obj}

    def export_json(self) -> str:
        return json.dumps(self.to_obj(), indent=2) + "\n"

    @staticmethod
    def from_obj(obj: dict) -> "SigTree":
        tree = SigTree()
        tree.frontier.clear()

        def build(node_obj: dict, parent: Optional[int], depth: int) -> int:
            flow = None
            if node_obj.get("flow") is not None:
                flow = FlowId.from_obj(node_obj["flow"])
            node = SigNode(
                flow=flow,
                parent=parent,
                depth=depth,
                status=NodeStatus(node_obj["status"]),
                reason=node_obj.get("reason"),
            )
            if parent is None:
                tree.nodes[0] = node
                handle = 0
            else:
                tree.nodes.append(node)
                handle = len(tree.nodes) - 1
                tree.nodes[parent].children.append(handle)
            if node.status in (NodeStatus.EXPANDED, NodeStatus.FAILED) and flow:
                tree._explored.add(flow.canonical_json())
            if node.status is NodeStatus.UNEXPLORED:
                tree.frontier.append(handle)
            for child in node_obj.get("children", ()):
                build(child, handle, depth + 1)
            return handle

        build(obj["root"], None, 0)
        return tree

    @staticmethod
    def import_json(text: str) -> "SigTree":
        return SigTree.from_obj(json.loads(text))

    def to_dot(self, hide_failed: bool = False) -> str:
        """Graphviz rendering; Pruned nodes dashed, Failed nodes annotated."""
        lines = ["digraph sigtree {", "  rankdir=LR;",
                 '  n0 [label="event", shape=box];']
        edges = []

        def visit(handle: int):
            for child in self.nodes[handle].children:
                node = self.nodes[child]
                if hide_failed and node.status is NodeStatus.FAILED:
                    continue
                label = node.flow.describe()
                attrs = [f'label="{label}"']
                if node.status is NodeStatus.PRUNED:
                    attrs.append("style=dashed")
                    attrs.append(f'tooltip="pruned: {node.reason}"')
                elif node.status is NodeStatus.FAILED:
                    attrs[0] = f'label="{label}\\n[failed]"'
                    attrs.append("color=red")
                lines.append(f"  n{child} [{', '.join(attrs)}];")
                edges.append(f"  n{handle} -> n{child};")
                visit(child)

        visit(self.root)
        return "\n".join(lines + edges + ["}"]) + "\n"
