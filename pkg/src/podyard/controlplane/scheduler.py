"""Pod placement: feasibility filter plus a deterministic ranking.

A node can host a pod when all four gates pass: the node is Ready, every
nodeSelector entry matches a node label exactly, every node taint is
covered by some pod toleration, and the pod's affinity rules evaluate
true against the node's labels. Among feasible nodes the least-loaded one
wins (fewest assigned pods); ties break lexicographically by nodename so
placement is reproducible.
"""
from __future__ import annotations

import logging
from typing import Iterable, Optional

from ..model import AffinityEvaluationError, PodSpec, match_affinity
from .state import NodeRecord, READY

log = logging.getLogger(__name__)


def is_feasible(pod: PodSpec, node: NodeRecord) -> bool:
    if node.status != READY:
        return False
    for key, value in pod.node_selector.items():
        if node.labels.get(key) != value:
            return False
    for taint in node.taints:
        if not any(
            tol.covers(taint["key"], taint["value"], taint["effect"])
            for tol in pod.tolerations
        ):
            return False
    try:
        return match_affinity(node.labels, pod.affinity)
    except AffinityEvaluationError as exc:
        log.warning("affinity of pod %s unevaluable on node %s: %s", pod.name, node.name, exc)
        return False


def schedule(pod: PodSpec, nodes: Iterable[NodeRecord]) -> Optional[str]:
    """Winning nodename, or None when no node is feasible."""
    candidates = [node for node in nodes if is_feasible(pod, node)]
    if not candidates:
        return None
    candidates.sort(key=lambda node: (len(node.pods), node.name))
    return candidates[0].name
