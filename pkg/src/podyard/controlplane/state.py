"""Event-sourced cluster state.

Every mutation is a plain JSON record: it is validated and applied to the
in-memory :class:`ClusterState`, then appended to a journal. Reloading the
journal and replaying the records reconstructs the exact same state, so
the control plane survives restarts without a database. Records carry
their own timestamps; replay never consults the wall clock.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from .. import manifest
from ..journal import Journal
from ..model import (
    AutoscalerSpec,
    ConfigMapSpec,
    DeploymentSpec,
    PodSpec,
    PROVIDER_TAINT_KEY,
    PROVIDER_TAINT_VALUE,
)

log = logging.getLogger(__name__)

READY = "Ready"
NOT_READY = "NotReady"

# A pod in one of these phases no longer runs anything.
TERMINAL_PHASES = ("Succeeded", "Failed")

IMPLICIT_TAINT = {"key": PROVIDER_TAINT_KEY, "value": PROVIDER_TAINT_VALUE, "effect": "NoSchedule"}


@dataclass
class NodeRecord:
    name: str
    labels: dict[str, str]
    taints: list[dict]
    status: str
    address: tuple[str, int]
    pod_ip: str
    kubelet_port: int
    heartbeat_interval: float
    last_heartbeat: float
    registered_at: float
    pods: set[str] = field(default_factory=set)
    status_reason: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "labels": dict(self.labels),
            "taints": [dict(t) for t in self.taints],
            "status": self.status,
            "status_reason": self.status_reason,
            "address": list(self.address),
            "pod_ip": self.pod_ip,
            "kubelet_port": self.kubelet_port,
            "heartbeat_interval": self.heartbeat_interval,
            "last_heartbeat": self.last_heartbeat,
            "pods": sorted(self.pods),
        }


@dataclass
class PodRecord:
    spec: PodSpec
    node: Optional[str] = None
    phase: str = "Pending"
    ready: bool = False
    owner: Optional[str] = None
    created_at: float = 0.0
    assigned_at: Optional[float] = None
    conditions: list[dict] = field(default_factory=list)
    containers: list[dict] = field(default_factory=list)
    reason: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.spec.name,
            "node": self.node,
            "phase": self.phase,
            "ready": self.ready,
            "owner": self.owner,
            "created_at": self.created_at,
            "assigned_at": self.assigned_at,
            "conditions": [dict(c) for c in self.conditions],
            "containers": [dict(c) for c in self.containers],
            "reason": self.reason,
        }


@dataclass
class DeploymentRecord:
    spec: DeploymentSpec
    replicas: int  # current goal; diverges from spec.replicas once autoscaled

    def as_dict(self) -> dict:
        return {
            "name": self.spec.name,
            "replicas": self.replicas,
            "manifest_replicas": self.spec.replicas,
            "selector": dict(self.spec.selector),
        }


@dataclass
class AutoscalerRecord:
    spec: AutoscalerSpec

    def as_dict(self) -> dict:
        return {
            "name": self.spec.name,
            "deployment": self.spec.target_deployment,
            "min_replicas": self.spec.min_replicas,
            "max_replicas": self.spec.max_replicas,
            "target_cpu_pct": self.spec.target_cpu_utilization_pct,
        }


class ClusterState:
    """Pure in-memory state; mutated only through :meth:`apply`."""

    def __init__(self):
        self.nodes: dict[str, NodeRecord] = {}
        self.pods: dict[str, PodRecord] = {}
        self.deployments: dict[str, DeploymentRecord] = {}
        self.autoscalers: dict[str, AutoscalerRecord] = {}
        self.configmaps: dict[str, ConfigMapSpec] = {}
        self.revision = 0

    def apply(self, record: dict) -> None:
        op = record.get("op")
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise ValueError(f"unknown state operation {op!r}")
        handler(record)
        self.revision += 1

    # --- manifest objects --------------------------------------------------

    def _op_apply_configmap(self, record):
        spec = manifest.spec_from_document(record["doc"])
        self.configmaps[spec.name] = spec

    def _op_apply_pod(self, record):
        spec = manifest.spec_from_document(record["doc"])
        previous = self.pods.get(spec.name)
        if previous is not None:
            self._detach(previous)
        self.pods[spec.name] = PodRecord(
            spec=spec,
            owner=record.get("owner"),
            created_at=record.get("ts", 0.0),
        )

    def _op_apply_deployment(self, record):
        spec = manifest.spec_from_document(record["doc"])
        self.deployments[spec.name] = DeploymentRecord(spec=spec, replicas=spec.replicas)

    def _op_apply_autoscaler(self, record):
        spec = manifest.spec_from_document(record["doc"])
        self.autoscalers[spec.name] = AutoscalerRecord(spec=spec)

    def _op_delete_pod(self, record):
        pod = self.pods.pop(record["name"], None)
        if pod is not None:
            self._detach(pod)

    def _op_delete_deployment(self, record):
        self.deployments.pop(record["name"], None)

    def _op_delete_autoscaler(self, record):
        self.autoscalers.pop(record["name"], None)

    def _op_delete_configmap(self, record):
        self.configmaps.pop(record["name"], None)

    def _detach(self, pod: PodRecord) -> None:
        if pod.node and pod.node in self.nodes:
            self.nodes[pod.node].pods.discard(pod.spec.name)

    # --- nodes ----------------------------------------------------------------

    def _op_register_node(self, record):
        name = record["name"]
        if name in self.nodes:
            raise ValueError(f"node {name!r} already registered")
        taints = [IMPLICIT_TAINT] + [dict(t) for t in record.get("taints", [])]
        self.nodes[name] = NodeRecord(
            name=name,
            labels=dict(record.get("labels", {})),
            taints=taints,
            status=READY,
            address=(record["address"][0], int(record["address"][1])),
            pod_ip=record.get("pod_ip", ""),
            kubelet_port=int(record.get("kubelet_port", 0)),
            heartbeat_interval=float(record.get("heartbeat_interval", 10.0)),
            last_heartbeat=record.get("ts", 0.0),
            registered_at=record.get("ts", 0.0),
        )

    def _op_heartbeat(self, record):
        node = self.nodes.get(record["node"])
        if node is None:
            return  # late heartbeat from a forgotten node; harmless
        node.last_heartbeat = record.get("ts", node.last_heartbeat)
        status = record.get("status")
        if status in (READY, NOT_READY) and status != node.status:
            node.status = status
            node.status_reason = "agent-reported"
        labels = record.get("labels")
        if labels:
            node.labels = dict(labels)

    def _op_node_status(self, record):
        node = self.nodes.get(record["node"])
        if node is None:
            return
        node.status = record["status"]
        node.status_reason = record.get("reason", "")

    # --- pod placement and runtime status ------------------------------------------

    def _op_assign_pod(self, record):
        pod = self.pods.get(record["pod"])
        if pod is None:
            return
        self._detach(pod)
        target = record.get("node")
        pod.node = target
        pod.assigned_at = record.get("ts") if target else None
        if target and target in self.nodes:
            self.nodes[target].pods.add(pod.spec.name)

    def _op_pod_status(self, record):
        pod = self.pods.get(record["pod"])
        if pod is None:
            return
        pod.phase = record.get("phase", pod.phase)
        pod.ready = bool(record.get("ready", False))
        pod.conditions = [dict(c) for c in record.get("conditions", [])]
        pod.containers = [dict(c) for c in record.get("containers", [])]
        pod.reason = record.get("reason", "")

    def _op_set_replicas(self, record):
        deployment = self.deployments.get(record["deployment"])
        if deployment is None:
            return
        deployment.replicas = int(record["replicas"])


class StateStore:
    """Single-writer wrapper: journal + state + change notification.

    All mutations funnel through :meth:`commit` under one lock, satisfying
    the single-writer contract; readers take snapshots under the same lock
    (cheap — state is small) and long-pollers wait on the condition.
    """

    def __init__(self, journal_path=None):
        self.state = ClusterState()
        self.journal = Journal(journal_path) if journal_path else None
        self._cond = threading.Condition()

    def load(self) -> int:
        """Replay the journal; returns the number of records applied."""
        if self.journal is None:
            return 0
        records = self.journal.replay()
        with self._cond:
            for record in records:
                try:
                    self.state.apply(record)
                except Exception:
                    log.exception("journal replay: record %r failed; skipping", record.get("op"))
        return len(records)

    def commit(self, record: dict) -> dict:
        with self._cond:
            self.state.apply(record)
            if self.journal is not None:
                self.journal.append(record)
            self._cond.notify_all()
        return record

    @property
    def revision(self) -> int:
        with self._cond:
            return self.state.revision

    def locked(self):
        """Context manager guarding direct reads of :attr:`state`."""
        return self._cond

    def wait_for(self, revision: int, timeout: float) -> int:
        """Block until state.revision > revision or the timeout elapses."""
        deadline = None if timeout is None else (threading.TIMEOUT_MAX if timeout < 0 else timeout)
        with self._cond:
            self._cond.wait_for(lambda: self.state.revision > revision, timeout=deadline)
            return self.state.revision

    def close(self) -> None:
        if self.journal is not None:
            self.journal.close()

    # --- snapshots (plain JSON-able dicts) -------------------------------

    def snapshot(self) -> dict:
        with self._cond:
            return {
                "revision": self.state.revision,
                "nodes": [n.as_dict() for _, n in sorted(self.state.nodes.items())],
                "pods": [p.as_dict() for _, p in sorted(self.state.pods.items())],
                "deployments": [d.as_dict() for _, d in sorted(self.state.deployments.items())],
                "autoscalers": [a.as_dict() for _, a in sorted(self.state.autoscalers.items())],
            }

    def nodes_snapshot(self) -> list[dict]:
        with self._cond:
            return [n.as_dict() for _, n in sorted(self.state.nodes.items())]

    def pods_snapshot(self) -> list[dict]:
        with self._cond:
            return [p.as_dict() for _, p in sorted(self.state.pods.items())]

    def deployments_snapshot(self) -> list[dict]:
        with self._cond:
            return [d.as_dict() for _, d in sorted(self.state.deployments.items())]

    def autoscalers_snapshot(self) -> list[dict]:
        with self._cond:
            return [a.as_dict() for _, a in sorted(self.state.autoscalers.items())]
