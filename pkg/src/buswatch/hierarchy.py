"""Node grouping and group-level composition.

The bus directory collapses to a directed communication graph (publisher ->
topic -> subscriber becomes node -> node). Nodes are partitioned into
functional groups by an ordered list of tag predicates: the first matching
predicate wins, which keeps every node in at most one group. Unmatched
nodes stay individually monitored.

A group attribute may be watched as a single composed stream only when it
is linearly composable: the observed group total must be explained by a
weighted sum of the member streams. The decomposability test measures the
residual left after that weighted sum; attributes failing it (coupled
dynamics) stay at per-node monitoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientSamples, LengthMismatch
from .msgbus import BusDirectory

logger = logging.getLogger(__name__)

DEFAULT_RESIDUAL_TAU = 0.05
MIN_TEST_SAMPLES = 30


@dataclass(frozen=True)
class SystemGraph:
    nodes: dict          # node id -> tuple of tags
    edges: tuple         # (publisher node, subscriber node), deduplicated
    topics_between: dict  # (pub, sub) -> sorted topic list

    def degree(self, node: str) -> int:
        return sum(1 for a, b in self.edges if a == node or b == node)

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": n, "tags": sorted(self.nodes[n])} for n in sorted(self.nodes)],
            "edges": [{"from": a, "to": b, "topics": self.topics_between[(a, b)]}
                      for a, b in sorted(self.edges)],
        }


def build_graph(directory: BusDirectory) -> SystemGraph:
    """Collapse the pub/sub directory into a node-to-node channel graph."""
    nodes: dict[str, tuple] = {}
    for node, tags in directory.node_tags.items():
        nodes[node] = tuple(tags)
    for node in list(directory.publishers) + list(directory.subscribers):
        nodes.setdefault(node, ())

    topic_pubs: dict[str, list[str]] = {}
    for node, topics in directory.publishers.items():
        for t in topics:
            topic_pubs.setdefault(t, []).append(node)

    edges = {}
    for sub_node, topics in directory.subscribers.items():
        for t in topics:
            for pub_node in topic_pubs.get(t, ()):
                edges.setdefault((pub_node, sub_node), set()).add(t)

    return SystemGraph(
        nodes=nodes,
        edges=tuple(sorted(edges)),
        topics_between={k: sorted(v) for k, v in edges.items()},
    )


@dataclass(frozen=True)
class GroupPredicate:
    """Tag-match predicate; listed order is priority order."""

    group: str
    requires: tuple[str, ...] = ()
    forbids: tuple[str, ...] = ()

    def matches(self, tags) -> bool:
        tagset = set(tags)
        return set(self.requires) <= tagset and not (set(self.forbids) & tagset)


@dataclass(frozen=True)
class GroupingScheme:
    groups: dict        # group name -> sorted node ids
    ungrouped: tuple    # node ids matched by no predicate
    empty_groups: tuple  # declared groups that matched nothing

    def group_of(self, node: str) -> str | None:
        for name, members in self.groups.items():
            if node in members:
                return name
        return None

    def to_json(self) -> dict:
        return {"groups": {g: list(m) for g, m in sorted(self.groups.items())},
                "ungrouped": list(self.ungrouped),
                "empty_groups": list(self.empty_groups)}


def apply_grouping(graph: SystemGraph, predicates) -> GroupingScheme:
    """Partition nodes by first-matching predicate; the rest stay ungrouped."""
    groups: dict[str, list[str]] = {p.group: [] for p in predicates}
    ungrouped = []
    for node in sorted(graph.nodes):
        for pred in predicates:
            if pred.matches(graph.nodes[node]):
                groups[pred.group].append(node)
                break
        else:
            ungrouped.append(node)
    empty = tuple(g for g, members in groups.items() if not members)
    for g in empty:
        logger.warning("grouping: group %r matched no nodes", g)
    return GroupingScheme(
        groups={g: tuple(m) for g, m in groups.items() if m},
        ungrouped=tuple(ungrouped),
        empty_groups=empty,
    )


def load_grouping_config(docs) -> list[GroupPredicate]:
    """Parse the ordered predicate list from YAML."""
    preds = []
    for doc in docs:
        preds.append(GroupPredicate(
            group=doc["group"],
            requires=tuple(doc.get("all", ())),
            forbids=tuple(doc.get("none", ())),
        ))
    return preds


# -- composition --------------------------------------------------------------


def compose(weights, values) -> float:
    """Weighted sum of member behaviors (the group-level composite value)."""
    if len(weights) != len(values):
        raise LengthMismatch(f"{len(weights)} weights vs {len(values)} values")
    return float(sum(w * v for w, v in zip(weights, values)))


def composite_series(weights, member_streams) -> list[float]:
    lengths = {len(s) for s in member_streams}
    if len(lengths) > 1:
        raise LengthMismatch(f"member stream lengths differ: {sorted(lengths)}")
    return [compose(weights, sample) for sample in zip(*member_streams)]


def decomposability_test(observed_total, member_streams, weights=None,
                         tau: float = DEFAULT_RESIDUAL_TAU,
                         min_samples: int = MIN_TEST_SAMPLES) -> dict:
    """Is the observed group total a weighted sum of member streams?

    Returns a verdict dict: linear iff the residual fraction (residual sum
    of squares over total variance) stays below tau. Nonlinear verdicts
    carry the residual evidence. Only linear-passing attributes may be
    monitored at group level.
    """
    total = np.asarray(observed_total, dtype=float)
    members = [np.asarray(s, dtype=float) for s in member_streams]
    if any(len(m) != len(total) for m in members):
        raise LengthMismatch("member streams must align with the observed total")
    if len(total) < min_samples:
        raise InsufficientSamples(f"need >= {min_samples} aligned samples, "
                                  f"got {len(total)}")
    if weights is None:
        weights = [1.0] * len(members)
    predicted = np.asarray(composite_series(weights, members))
    residual = total - predicted
    ss_res = float((residual ** 2).sum())
    ss_tot = float(((total - total.mean()) ** 2).sum())
    if ss_tot == 0.0:
        fraction = 0.0 if ss_res < 1e-12 else float("inf")
    else:
        fraction = ss_res / ss_tot
    verdict = {
        "linear": fraction < tau,
        "residual_fraction": fraction,
        "samples": len(total),
        "tau": tau,
    }
    if not verdict["linear"]:
        verdict["evidence"] = {
            "max_abs_residual": float(np.max(np.abs(residual))),
            "rms_residual": float(np.sqrt(np.mean(residual ** 2))),
        }
    return verdict
