"""Control-plane server: HTTP API, reconciler, autoscaling, metrics.

One process owns the cluster: agents register and heartbeat in, a
level-triggered reconcile loop converges deployments and placements every
couple of seconds, a scraper pulls every node's metrics endpoint, and the
autoscaling loop resizes deployments from scraped CPU utilization. All
state mutations are journaled; restart replays the journal.
"""
from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import replace
from pathlib import Path
from typing import Optional

import requests

from .. import manifest
from ..autoscaler import HpaState, PodCondition, PodView, ReadinessGateConfig, reconcile_hpa
from ..httpd import HttpError, JsonHttpServer
from ..metrics import POD_CPU_METRIC, MetricStore, Scraper, TargetRegistry
from ..model import (
    AutoscalerSpec,
    ConfigMapSpec,
    DeploymentSpec,
    PodSpec,
    validate,
)
from .scheduler import schedule
from .state import NOT_READY, READY, StateStore, TERMINAL_PHASES

log = logging.getLogger(__name__)

STALE_HEARTBEATS = 3  # missed intervals before a node is declared NotReady
SYNC_FAILURE_LIMIT = 3
DISPATCH_RETRY_LIMIT = 5
LONG_POLL_CAP_S = 30.0
JOURNAL_FILE = "cluster-journal.ndjson"
METRICS_DIR = "metrics"


class ControlPlane:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        data_dir=None,
        *,
        reconcile_interval: float = 2.0,
        hpa_interval: float = 15.0,
        scrape_interval: float = 5.0,
        stabilization_window: float = 300.0,
        gate: ReadinessGateConfig | None = None,
        agent_timeout: float = 3.0,
    ):
        self.data_dir = Path(data_dir) if data_dir else None
        journal_path = self.data_dir / JOURNAL_FILE if self.data_dir else None
        metrics_dir = self.data_dir / METRICS_DIR if self.data_dir else None
        self.store = StateStore(journal_path)
        self.metric_store = MetricStore(directory=metrics_dir)
        self.registry = TargetRegistry()
        self.scraper = Scraper(self.registry, self.metric_store, interval=scrape_interval)
        self.reconcile_interval = reconcile_interval
        self.hpa_interval = hpa_interval
        self.stabilization_window = stabilization_window
        self.gate = gate or ReadinessGateConfig()
        self.agent_timeout = agent_timeout
        self.decisions: deque = deque(maxlen=1000)
        self._hpa_states: dict[str, HpaState] = {}
        self._sync_failures: dict[str, int] = {}
        self._dispatch_failures: dict[str, int] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._server = JsonHttpServer(host, port)
        self._install_routes()
        replayed = self.store.load()
        if replayed:
            log.info("journal replay: %d records, revision %d", replayed, self.store.revision)

    # --- lifecycle -----------------------------------------------------------

    @property
    def host(self) -> str:
        return self._server.host

    @property
    def port(self) -> int:
        return self._server.port

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> None:
        for node in self.store.nodes_snapshot():
            if node["status"] == READY:
                self._register_scrape_target(
                    node["name"], node["pod_ip"], node["kubelet_port"],
                    node["address"][0], node["address"][1],
                )
        self._server.start()
        self.scraper.start()
        self._stop.clear()
        for name, loop in (("reconcile", self._reconcile_loop), ("hpa", self._hpa_loop)):
            thread = threading.Thread(target=loop, name=f"cp-{name}", daemon=True)
            thread.start()
            self._threads.append(thread)
        log.info("control plane on %s", self.address)

    def stop(self) -> None:
        self._stop.set()
        self.scraper.stop()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads.clear()
        self._server.stop()
        self.metric_store.close()
        self.store.close()

    # --- reconcile loop -------------------------------------------------------

    def _reconcile_loop(self) -> None:
        while not self._stop.wait(self.reconcile_interval):
            try:
                self.reconcile_once()
            except Exception:
                log.exception("reconcile tick failed")

    def reconcile_once(self) -> None:
        now = time.time()
        self._expire_stale_nodes(now)
        self._sync_agents(now)
        self._reconcile_deployments(now)
        self._schedule_and_dispatch(now)

    def _expire_stale_nodes(self, now: float) -> None:
        for node in self.store.nodes_snapshot():
            if node["status"] != READY:
                continue
            if now - node["last_heartbeat"] > STALE_HEARTBEATS * node["heartbeat_interval"]:
                log.warning("node %s missed %d heartbeats", node["name"], STALE_HEARTBEATS)
                self._mark_node_down(node["name"], "heartbeat-timeout", now)

    def _mark_node_down(self, name: str, reason: str, now: float) -> None:
        self.store.commit({"op": "node_status", "node": name, "status": NOT_READY, "reason": reason, "ts": now})
        for pod in self.store.pods_snapshot():
            if pod["node"] == name and pod["phase"] not in TERMINAL_PHASES:
                self.store.commit({
                    "op": "pod_status", "pod": pod["name"], "phase": "Failed",
                    "ready": False, "conditions": pod["conditions"],
                    "containers": pod["containers"], "reason": f"node {reason}", "ts": now,
                })

    def _sync_agents(self, now: float) -> None:
        pods_by_name = {p["name"]: p for p in self.store.pods_snapshot()}
        for node in self.store.nodes_snapshot():
            if node["status"] != READY:
                continue
            host, port = node["address"]
            try:
                report = requests.get(f"http://{host}:{port}/pods", timeout=self.agent_timeout).json()
            except (requests.RequestException, ValueError) as exc:
                failures = self._sync_failures.get(node["name"], 0) + 1
                self._sync_failures[node["name"]] = failures
                log.warning("sync with node %s failed (%d): %s", node["name"], failures, exc)
                if failures >= SYNC_FAILURE_LIMIT:
                    self._mark_node_down(node["name"], "unreachable", now)
                continue
            self._sync_failures[node["name"]] = 0
            if report.get("status") == NOT_READY:
                self._mark_node_down(node["name"], "agent-reported", now)
                continue
            reported = {p["name"]: p for p in report.get("pods", [])}
            for pod_name in node["pods"]:
                record = pods_by_name.get(pod_name)
                if record is None:
                    continue
                status = reported.get(pod_name)
                if status is None:
                    # We think it's placed there but the agent has no trace
                    # (e.g. agent restarted): give dispatch another go.
                    if record["phase"] not in TERMINAL_PHASES and not self._dispatch_pending(pod_name):
                        self.store.commit({
                            "op": "pod_status", "pod": pod_name, "phase": "Failed",
                            "ready": False, "conditions": record["conditions"],
                            "containers": record["containers"],
                            "reason": "missing-on-agent", "ts": now,
                        })
                    continue
                update = {
                    "phase": status.get("phase", "Pending"),
                    "ready": bool(status.get("ready", False)),
                    "conditions": status.get("conditions", []),
                    "containers": status.get("containers", []),
                }
                current = {
                    "phase": record["phase"],
                    "ready": record["ready"],
                    "conditions": record["conditions"],
                    "containers": record["containers"],
                }
                if update != current:
                    self.store.commit({"op": "pod_status", "pod": pod_name, "reason": record["reason"],
                                       "ts": now, **update})

    def _dispatch_pending(self, pod_name: str) -> bool:
        return self._dispatch_failures.get(pod_name, 0) > 0

    def _reconcile_deployments(self, now: float) -> None:
        pods = self.store.pods_snapshot()
        with self.store.locked():
            deployments = {
                name: (rec.spec, rec.replicas) for name, rec in self.store.state.deployments.items()
            }
            pod_specs = {name: rec.spec for name, rec in self.store.state.pods.items()}
        for dep_name, (spec, replicas) in deployments.items():
            owned = [p for p in pods if p["owner"] == dep_name]
            wanted = {f"{dep_name}-{ordinal}" for ordinal in range(1, replicas + 1)}
            existing = {p["name"]: p for p in owned}
            for pod in sorted(owned, key=self._ordinal_key, reverse=True):
                surplus = pod["name"] not in wanted
                finished = pod["phase"] in TERMINAL_PHASES  # replaced, never resurrected
                stale_template = pod_specs.get(pod["name"]) != replace(spec.template, name=pod["name"])
                if surplus or finished or stale_template:
                    self._delete_pod_everywhere(pod["name"], now)
                    existing.pop(pod["name"], None)
            for name in sorted(wanted - set(existing)):
                template = replace(spec.template, name=name)
                self.store.commit({
                    "op": "apply_pod", "doc": manifest.to_manifest(template),
                    "owner": dep_name, "ts": now,
                })
        # Orphans: owning deployment no longer exists.
        for pod in pods:
            if pod["owner"] and pod["owner"] not in deployments:
                self._delete_pod_everywhere(pod["name"], now)

    @staticmethod
    def _ordinal_key(pod: dict) -> int:
        tail = pod["name"].rsplit("-", 1)[-1]
        return int(tail) if tail.isdigit() else 0

    def _schedule_and_dispatch(self, now: float) -> None:
        with self.store.locked():
            nodes = list(self.store.state.nodes.values())
            pending = [
                record for record in self.store.state.pods.values()
                if record.node is None and record.phase == "Pending"
            ]
            configmaps = dict(self.store.state.configmaps)
        for record in pending:
            target = schedule(record.spec, nodes)
            if target is None:
                continue
            self.store.commit({"op": "assign_pod", "pod": record.spec.name, "node": target, "ts": now})
            if not self._dispatch(record.spec, target, configmaps, now):
                continue

    def _dispatch(self, spec: PodSpec, nodename: str, configmaps: dict, now: float) -> bool:
        with self.store.locked():
            node = self.store.state.nodes.get(nodename)
            address = node.address if node else None
        if address is None:
            return False
        payload = {
            "pod": manifest.to_manifest(spec),
            "configmaps": {
                vol.configmap_name: dict(configmaps[vol.configmap_name].data)
                for vol in spec.volumes
                if vol.configmap_name in configmaps
            },
        }
        try:
            response = requests.post(
                f"http://{address[0]}:{address[1]}/pods", json=payload, timeout=self.agent_timeout
            )
        except requests.RequestException as exc:
            return self._dispatch_failed(spec.name, now, str(exc))
        if response.status_code == 201:
            self._dispatch_failures.pop(spec.name, None)
            return True
        if response.status_code == 409 and "already exists" in response.text:
            return True  # agent kept it across a control-plane restart
        return self._dispatch_failed(spec.name, now, f"agent said {response.status_code}: {response.text[:200]}")

    def _dispatch_failed(self, pod_name: str, now: float, detail: str) -> bool:
        failures = self._dispatch_failures.get(pod_name, 0) + 1
        self._dispatch_failures[pod_name] = failures
        log.warning("dispatch of pod %s failed (%d): %s", pod_name, failures, detail)
        if failures >= DISPATCH_RETRY_LIMIT:
            self.store.commit({
                "op": "pod_status", "pod": pod_name, "phase": "Failed", "ready": False,
                "conditions": [], "containers": [], "reason": "dispatch-failed", "ts": now,
            })
        else:
            self.store.commit({"op": "assign_pod", "pod": pod_name, "node": None, "ts": now})
        return False

    # --- autoscaling loop ----------------------------------------------------

    def _hpa_loop(self) -> None:
        while not self._stop.wait(self.hpa_interval):
            try:
                self.autoscale_once()
            except Exception:
                log.exception("autoscale tick failed")

    def autoscale_once(self) -> None:
        now = time.time()
        with self.store.locked():
            autoscalers = {name: rec.spec for name, rec in self.store.state.autoscalers.items()}
            replicas = {name: rec.replicas for name, rec in self.store.state.deployments.items()}
        pods = self.store.pods_snapshot()
        for name, spec in autoscalers.items():
            if spec.target_deployment not in replicas:
                continue
            state = self._hpa_states.get(name)
            if state is None or state.spec != spec:
                last_scale = state.last_scale_time if state else now
                state = HpaState(spec, last_scale_time=last_scale,
                                 stabilization_window=self.stabilization_window)
                self._hpa_states[name] = state
            owned = [p for p in pods if p["owner"] == spec.target_deployment]
            views = [self._pod_view(p) for p in owned]
            metrics = {}
            for pod in owned:
                latest = self.metric_store.latest(POD_CPU_METRIC, {"pod": pod["name"]})
                if latest:
                    metrics[pod["name"]] = max(latest.values(), key=lambda point: point[0])
            decision = reconcile_hpa(state, replicas[spec.target_deployment], views, metrics, now, self.gate)
            self.decisions.append(decision)
            if decision.applied:
                log.info("hpa %s: %s %d -> %d", name, decision.reason, decision.current, decision.desired)
                self.store.commit({
                    "op": "set_replicas", "deployment": spec.target_deployment,
                    "replicas": decision.desired, "ts": now,
                })

    @staticmethod
    def _pod_view(pod: dict) -> PodView:
        started = [c.get("started_at") for c in pod["containers"] if c.get("started_at")]
        start_time = min(started) if started else pod.get("assigned_at")
        conditions = [
            PodCondition(c["type"], bool(c["status"]), float(c["last_transition_time"]))
            for c in pod["conditions"]
        ]
        return PodView(name=pod["name"], start_time=start_time, conditions=conditions)

    # --- agent-facing helpers ------------------------------------------------------

    def _register_scrape_target(self, name, pod_ip, kubelet_port, host, port) -> Optional[int]:
        try:
            target = self.registry.register(
                name=name,
                owner_labels={"node": name},
                advertised_ip=pod_ip,
                advertised_port=int(kubelet_port),
                real_host=host,
                real_port=int(port),
            )
            return target.mapped_port
        except ValueError:
            return self.registry.get(name).mapped_port if self.registry.get(name) else None

    def _delete_pod_everywhere(self, name: str, now: float, grace_s: float = 2.0) -> None:
        with self.store.locked():
            record = self.store.state.pods.get(name)
            node = self.store.state.nodes.get(record.node) if record and record.node else None
            address = node.address if node else None
        if address is not None:
            try:
                requests.delete(
                    f"http://{address[0]}:{address[1]}/pods/{name}",
                    params={"grace": grace_s}, timeout=self.agent_timeout,
                )
            except requests.RequestException as exc:
                log.warning("agent-side delete of pod %s failed: %s", name, exc)
        self._dispatch_failures.pop(name, None)
        self.store.commit({"op": "delete_pod", "name": name, "ts": now})

    # --- HTTP API -----------------------------------------------------------------

    def _install_routes(self) -> None:
        server = self._server
        server.route("POST", "/apply", self._http_apply)
        server.route("GET", "/nodes", lambda m, q, b: (200, {"nodes": self.store.nodes_snapshot()}))
        server.route("GET", "/pods", lambda m, q, b: (200, {"pods": self.store.pods_snapshot()}))
        server.route("GET", "/deployments",
                     lambda m, q, b: (200, {"deployments": self.store.deployments_snapshot()}))
        server.route("GET", "/autoscalers", self._http_autoscalers)
        server.route("DELETE", r"/pods/(?P<name>[a-z0-9-]+)", self._http_delete_pod)
        server.route("DELETE", r"/deployments/(?P<name>[a-z0-9-]+)", self._http_delete_deployment)
        server.route("DELETE", r"/autoscalers/(?P<name>[a-z0-9-]+)", self._http_delete_autoscaler)
        server.route("POST", "/nodes/register", self._http_register)
        server.route("POST", r"/nodes/(?P<name>[a-z0-9-]+)/heartbeat", self._http_heartbeat)
        server.route("GET", r"/pods/(?P<name>[a-z0-9-]+)/logs", self._http_logs)
        server.route("GET", "/state", self._http_state)
        server.route("GET", "/metrics/query", self._http_metrics_query)

    def _http_apply(self, match, query, body):
        if isinstance(body, str):
            try:
                specs = manifest.parse_manifest(body)
            except manifest.ManifestError as exc:
                raise HttpError(400, str(exc))
        elif isinstance(body, dict):
            specs = [manifest.spec_from_document(body)]
        elif isinstance(body, list):
            specs = [manifest.spec_from_document(doc) for doc in body]
        else:
            raise HttpError(400, "body must be manifest text or JSON document(s)")
        results = []
        for spec in specs:
            problems = validate(spec)
            if problems:
                results.append({"kind": spec.kind, "name": spec.name,
                                "result": "invalid", "detail": "; ".join(problems)})
                continue
            results.append({"kind": spec.kind, "name": spec.name, "result": self._apply_spec(spec)})
        return 200, {"results": results}

    def _apply_spec(self, spec) -> str:
        now = time.time()
        doc = manifest.to_manifest(spec)
        with self.store.locked():
            state = self.store.state
            if isinstance(spec, ConfigMapSpec):
                existing, op = state.configmaps.get(spec.name), "apply_configmap"
            elif isinstance(spec, PodSpec):
                rec = state.pods.get(spec.name)
                existing, op = (rec.spec if rec else None), "apply_pod"
            elif isinstance(spec, DeploymentSpec):
                rec = state.deployments.get(spec.name)
                existing, op = (rec.spec if rec else None), "apply_deployment"
            elif isinstance(spec, AutoscalerSpec):
                rec = state.autoscalers.get(spec.name)
                existing, op = (rec.spec if rec else None), "apply_autoscaler"
            else:
                raise HttpError(400, f"cannot apply {type(spec).__name__}")
        if existing == spec:
            return "unchanged"
        if isinstance(spec, PodSpec) and existing is not None:
            self._delete_pod_everywhere(spec.name, now)
        self.store.commit({"op": op, "doc": doc, "ts": now})
        return "created" if existing is None else "updated"

    def _http_autoscalers(self, match, query, body):
        return 200, {
            "autoscalers": self.store.autoscalers_snapshot(),
            "decisions": [
                {
                    "time": d.time, "deployment": d.deployment, "current": d.current,
                    "desired": d.desired, "applied": d.applied, "reason": d.reason,
                }
                for d in list(self.decisions)[-50:]
            ],
        }

    def _http_delete_pod(self, match, query, body):
        name = match.group("name")
        with self.store.locked():
            known = name in self.store.state.pods
        if not known:
            raise HttpError(404, f"pod {name!r} not found")
        self._delete_pod_everywhere(name, time.time(), grace_s=float(query.get("grace", "5")))
        return 200, {"deleted": name}

    def _http_delete_deployment(self, match, query, body):
        name = match.group("name")
        now = time.time()
        with self.store.locked():
            known = name in self.store.state.deployments
            owned = [p.spec.name for p in self.store.state.pods.values() if p.owner == name]
        if not known:
            raise HttpError(404, f"deployment {name!r} not found")
        for pod_name in owned:
            self._delete_pod_everywhere(pod_name, now)
        self.store.commit({"op": "delete_deployment", "name": name, "ts": now})
        return 200, {"deleted": name, "pods": sorted(owned)}

    def _http_delete_autoscaler(self, match, query, body):
        name = match.group("name")
        with self.store.locked():
            known = name in self.store.state.autoscalers
        if not known:
            raise HttpError(404, f"autoscaler {name!r} not found")
        self.store.commit({"op": "delete_autoscaler", "name": name, "ts": time.time()})
        self._hpa_states.pop(name, None)
        return 200, {"deleted": name}

    def _http_register(self, match, query, body):
        if not isinstance(body, dict) or "name" not in body or "endpoint" not in body:
            raise HttpError(400, "registration needs name and endpoint")
        name = body["name"]
        with self.store.locked():
            if name in self.store.state.nodes:
                raise HttpError(409, f"node name {name!r} already taken")
        endpoint = body["endpoint"]
        record = {
            "op": "register_node",
            "name": name,
            "labels": body.get("labels", {}),
            "taints": body.get("taints", []),
            "address": [endpoint.get("host", "127.0.0.1"), int(endpoint["port"])],
            "pod_ip": body.get("pod_ip", ""),
            "kubelet_port": int(body.get("kubelet_port", 0)),
            "heartbeat_interval": float(body.get("heartbeat_interval", 10.0)),
            "ts": time.time(),
        }
        try:
            self.store.commit(record)
        except ValueError as exc:
            raise HttpError(409, str(exc))
        mapped = self._register_scrape_target(
            name, record["pod_ip"], record["kubelet_port"],
            record["address"][0], record["address"][1],
        )
        log.info("node %s registered (%s:%s, scrape port %s)",
                 name, record["address"][0], record["address"][1], mapped)
        return 200, {"ok": True, "node": name, "mapped_port": mapped}

    def _http_heartbeat(self, match, query, body):
        name = match.group("name")
        with self.store.locked():
            known = name in self.store.state.nodes
        if not known:
            raise HttpError(404, f"node {name!r} not registered")
        body = body if isinstance(body, dict) else {}
        now = time.time()
        self.store.commit({
            "op": "heartbeat", "node": name,
            "status": body.get("status", READY),
            "labels": body.get("labels", {}),
            "ts": now,
        })
        if body.get("status") == NOT_READY:
            self._mark_node_down(name, "agent-reported", now)
        return 200, {"ok": True}

    def _http_logs(self, match, query, body):
        name = match.group("name")
        with self.store.locked():
            record = self.store.state.pods.get(name)
            node = self.store.state.nodes.get(record.node) if record and record.node else None
            address = node.address if node else None
        if record is None:
            raise HttpError(404, f"pod {name!r} not found")
        if address is None:
            raise HttpError(409, f"pod {name!r} is not scheduled on any node")
        params = {"pod": name, "stream": query.get("stream", "stdout")}
        if query.get("container"):
            params["container"] = query["container"]
        try:
            response = requests.get(
                f"http://{address[0]}:{address[1]}/logs", params=params, timeout=self.agent_timeout
            )
        except requests.RequestException as exc:
            raise HttpError(502, f"node holding pod {name!r} is unreachable: {exc}")
        if response.status_code != 200:
            raise HttpError(response.status_code, response.text)
        return 200, response.text

    def _http_state(self, match, query, body):
        if "rev" in query:
            timeout = min(float(query.get("timeout", "25")), LONG_POLL_CAP_S)
            self.store.wait_for(int(query["rev"]), timeout)
        return 200, self.store.snapshot()

    def _http_metrics_query(self, match, query, body):
        metric = query.get("metric")
        if not metric:
            raise HttpError(400, "missing ?metric= parameter")
        label_filter = {}
        for pair in filter(None, query.get("label", "").split(",")):
            if "=" not in pair:
                raise HttpError(400, f"label filter {pair!r} is not key=value")
            key, _, value = pair.partition("=")
            label_filter[key] = value
        if "from" in query or "to" in query:
            start = float(query.get("from", "0"))
            end = float(query["to"]) if "to" in query else time.time() + 1.0
            window = self.metric_store.query_range(metric, label_filter, start, end)
            series = [
                {"labels": dict(key[1]), "points": [[ts, value] for ts, value in points]}
                for key, points in sorted(window.items())
            ]
        else:
            latest = self.metric_store.latest(metric, label_filter)
            series = [
                {"labels": dict(key[1]), "points": [[ts, value]]}
                for key, (ts, value) in sorted(latest.items())
            ]
        return 200, {"metric": metric, "series": series}
