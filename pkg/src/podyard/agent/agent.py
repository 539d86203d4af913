"""The node agent: registration, supervision, HTTP surface, walltime.

One supervisor thread owns all pod runtimes; create, delete, poll and
shutdown requests travel through a queue and are answered via futures, so
no HTTP handler ever touches runtime state directly. Heartbeats and the
walltime timer are separate tickers that feed events into the same queue.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from concurrent.futures import Future

import psutil
import requests

from .. import manifest
from ..httpd import HttpError, JsonHttpServer
from ..metrics import NODE_ALIVETIME_METRIC, POD_CPU_METRIC, Sample, render_exposition
from ..model import ConfigMapSpec, NodeLabels, PodSpec, validate
from .config import AgentConfig
from .runtime import PodRuntime

log = logging.getLogger(__name__)

READY = "Ready"
NOT_READY = "NotReady"
WALLTIME_KILL_GRACE_S = 0.5
OP_TIMEOUT_S = 30.0


class AgentError(RuntimeError):
    pass


class CpuSampler:
    """Per-pod CPU utilization from process-group CPU-time deltas.

    Utilization is (delta CPU seconds / delta wall seconds) * 100 summed
    over the group's live processes; the first sample only primes the
    baseline. Processes born between samples contribute their full
    accumulated time.
    """

    def __init__(self, clock=time.monotonic):
        self._clock = clock
        self._lock = threading.Lock()
        self._prev: dict[str, dict[int, float]] = {}
        self._prev_ts: float | None = None

    def sample(self, live_pids: dict[str, list[int]]) -> dict[str, float]:
        now = self._clock()
        current: dict[str, dict[int, float]] = {}
        for pod, pids in live_pids.items():
            times = {}
            for pid in pids:
                try:
                    cpu = psutil.Process(pid).cpu_times()
                    times[pid] = cpu.user + cpu.system
                except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
                    continue
            current[pod] = times
        with self._lock:
            prev, prev_ts = self._prev, self._prev_ts
            self._prev, self._prev_ts = current, now
        if prev_ts is None or now <= prev_ts:
            return {}
        dt = now - prev_ts
        out = {}
        for pod, times in current.items():
            if pod not in prev:
                continue
            before = prev[pod]
            delta = sum(cpu - before.get(pid, 0.0) for pid, cpu in times.items())
            out[pod] = max(0.0, delta) / dt * 100.0
        return out


class Agent:
    def __init__(self, config: AgentConfig):
        problems = config.validate()
        if problems:
            raise AgentError("; ".join(problems))
        self.config = config
        self.status = READY
        self.started_at: float | None = None
        self.pods: dict[str, PodRuntime] = {}
        self.configmaps: dict[str, ConfigMapSpec] = {}
        self._pods_lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._running = False
        self._loop_thread: threading.Thread | None = None
        self._heartbeat_stop = threading.Event()
        self._heartbeat_thread: threading.Thread | None = None
        self._walltime_timer: threading.Timer | None = None
        self._sampler = CpuSampler()
        self._server: JsonHttpServer | None = None

    # --- lifecycle -------------------------------------------------------

    @property
    def node_labels(self) -> NodeLabels:
        return NodeLabels(
            nodetype=self.config.nodetype,
            site=self.config.site,
            alivetime=self.alivetime_remaining(),
        )

    def alivetime_remaining(self) -> int | None:
        if self.config.walltime_s <= 0:
            return None
        if self.started_at is None:
            return self.config.walltime_s
        return max(0, round(self.config.walltime_s - (time.time() - self.started_at)))

    def start(self) -> None:
        self._server = JsonHttpServer(self.config.agent_host, self.config.kubelet_port)
        self._install_routes(self._server)
        self.started_at = time.time()
        self._register()
        self._running = True
        self._loop_thread = threading.Thread(target=self._loop, name=f"agent-{self.config.nodename}", daemon=True)
        self._loop_thread.start()
        self._server.start()
        self._heartbeat_thread = threading.Thread(target=self._heartbeat_ticker, daemon=True)
        self._heartbeat_thread.start()
        if self.config.walltime_s > 0:
            self._walltime_timer = threading.Timer(
                self.config.walltime_s, lambda: self._queue.put(("expire", None, None))
            )
            self._walltime_timer.daemon = True
            self._walltime_timer.start()
        log.info(
            "node %s up on %s:%d (walltime %ss)",
            self.config.nodename, self.config.agent_host, self.real_port, self.config.walltime_s,
        )

    @property
    def real_port(self) -> int:
        return self._server.port if self._server else self.config.kubelet_port

    def _register(self) -> None:
        if not self.config.control_plane_address:
            return
        payload = {
            "name": self.config.nodename,
            "labels": self.node_labels.as_dict(),
            "pod_ip": self.config.pod_ip,
            "kubelet_port": self.config.kubelet_port or self.real_port,
            "endpoint": {"host": self.config.agent_host, "port": self.real_port},
            "heartbeat_interval": self.config.heartbeat_interval,
        }
        url = f"http://{self.config.control_plane_address}/nodes/register"
        response = requests.post(url, json=payload, timeout=5)
        if response.status_code == 409:
            self._server.stop()
            raise AgentError(f"registration refused: node name {self.config.nodename!r} already taken")
        response.raise_for_status()

    def run_forever(self) -> None:
        """Block until the supervisor loop exits (walltime or shutdown)."""
        while self._running and self._loop_thread is not None and self._loop_thread.is_alive():
            self._loop_thread.join(timeout=0.5)
        self._teardown()

    def shutdown(self) -> None:
        """Graceful stop: NotReady, kill pods, final heartbeat, loop exit."""
        if self._running:
            try:
                self._submit("expire", None)
            except AgentError:
                pass  # the loop beat us to it (e.g. walltime just expired)
        self._teardown()

    def _teardown(self) -> None:
        self._heartbeat_stop.set()
        if self._walltime_timer is not None:
            self._walltime_timer.cancel()
        if self._server is not None:
            self._server.stop()
            self._server = None

    # --- supervisor loop ----------------------------------------------------

    def _submit(self, op: str, payload):
        future: Future = Future()
        self._queue.put((op, payload, future))
        if not self._running:
            # The loop is exiting (or gone) and may never see this op.
            # Draining here is safe: queue pops are atomic, each future
            # resolves exactly once, whichever side gets there first.
            self._drain_queue()
        return future.result(timeout=OP_TIMEOUT_S)

    def _loop(self) -> None:
        while self._running:
            try:
                op, payload, future = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                result = self._dispatch(op, payload)
                if future is not None:
                    future.set_result(result)
            except Exception as exc:
                if future is not None:
                    future.set_exception(exc)
                else:
                    log.exception("agent op %s failed", op)
        self._drain_queue()

    def _drain_queue(self) -> None:
        """Resolve ops that arrived around loop exit so submitters never hang."""
        while True:
            try:
                _op, _payload, future = self._queue.get_nowait()
            except queue.Empty:
                return
            if future is not None:
                future.set_exception(AgentError("agent loop stopped"))

    def _dispatch(self, op: str, payload):
        if op == "create":
            return self._do_create(*payload)
        if op == "delete":
            return self._do_delete(*payload)
        if op == "poll":
            return self._do_poll()
        if op == "heartbeat":
            self._send_heartbeat()
            return None
        if op == "expire":
            self._do_expire()
            return None
        raise ValueError(f"unknown op {op!r}")

    def _do_create(self, spec: PodSpec, configmaps: dict[str, ConfigMapSpec]):
        if self.status != READY:
            raise HttpError(409, f"node {self.config.nodename} is {self.status}")
        if spec.name in self.pods:
            raise HttpError(409, f"pod {spec.name!r} already exists")
        problems = validate(spec)
        for cm in configmaps.values():
            problems.extend(validate(cm))
        if problems:
            raise HttpError(400, "invalid pod: " + "; ".join(problems))
        runtime = PodRuntime(
            spec,
            configmaps,
            work_root=self.config.work_root,
            extra_env={
                "NODENAME": self.config.nodename,
                "VKUBELET_POD_IP": self.config.pod_ip,
            },
        )
        trail = runtime.create()
        with self._pods_lock:
            self.pods[spec.name] = runtime
        log.info("pod %s created: %s", spec.name, {k: v.uid_name for k, v in trail.items()})
        return {name: uid.value for name, uid in trail.items()}

    def _do_delete(self, name: str, grace_s: float):
        runtime = self.pods.get(name)
        if runtime is None:
            raise HttpError(404, f"pod {name!r} not found")
        report = runtime.terminate(grace_s)
        with self._pods_lock:
            del self.pods[name]
        return report

    def _do_poll(self) -> dict:
        return {
            "node": self.config.nodename,
            "status": self.status,
            "alivetime": self.alivetime_remaining(),
            "pods": [runtime.poll().as_dict() for runtime in self.pods.values()],
        }

    def _do_expire(self) -> None:
        if self.status == NOT_READY:
            return
        log.info("walltime %ss ended on %s: terminating processes", self.config.walltime_s, self.config.nodename)
        self.status = NOT_READY
        for runtime in self.pods.values():
            runtime.terminate(WALLTIME_KILL_GRACE_S)
        self._send_heartbeat()
        self._running = False

    # --- heartbeats ------------------------------------------------------------

    def _heartbeat_ticker(self) -> None:
        while not self._heartbeat_stop.wait(self.config.heartbeat_interval):
            if not self._running:
                break
            self._queue.put(("heartbeat", None, None))

    def _send_heartbeat(self) -> None:
        if not self.config.control_plane_address:
            return
        payload = {
            "status": self.status,
            "labels": self.node_labels.as_dict(),
            "ts": time.time(),
        }
        url = f"http://{self.config.control_plane_address}/nodes/{self.config.nodename}/heartbeat"
        try:
            requests.post(url, json=payload, timeout=2).raise_for_status()
        except requests.RequestException as exc:
            log.warning("heartbeat from %s failed: %s", self.config.nodename, exc)

    # --- public operations (thread-safe) -----------------------------------------

    def create_pod(self, spec: PodSpec, configmaps: dict[str, ConfigMapSpec]) -> dict:
        return self._submit("create", (spec, configmaps))

    def delete_pod(self, name: str, grace_s: float = 5.0) -> dict:
        return self._submit("delete", (name, grace_s))

    def get_pods(self) -> dict:
        return self._submit("poll", None)

    def export_metrics(self) -> str:
        with self._pods_lock:
            runtimes = dict(self.pods)
        live = {
            name: [pid for pids in runtime.live_pids().values() for pid in pids]
            for name, runtime in runtimes.items()
        }
        utilization = self._sampler.sample(live)
        samples = []
        alivetime = self.alivetime_remaining()
        if alivetime is not None:
            samples.append(Sample(NODE_ALIVETIME_METRIC, {}, float(alivetime)))
        for pod_name in sorted(utilization):
            samples.append(Sample(POD_CPU_METRIC, {"pod": pod_name}, round(utilization[pod_name], 3)))
        return render_exposition(samples)

    # --- HTTP surface ---------------------------------------------------------------

    def _install_routes(self, server: JsonHttpServer) -> None:
        server.route("GET", "/pods", lambda m, q, b: (200, self._submit("poll", None)))
        server.route("POST", "/pods", self._http_create)
        server.route("DELETE", r"/pods/(?P<name>[a-z0-9-]+)", self._http_delete)
        server.route("GET", "/metrics", lambda m, q, b: (200, self.export_metrics()))
        server.route("GET", "/logs", self._http_logs)

    def _http_create(self, match, query, body):
        if not isinstance(body, dict) or "pod" not in body:
            raise HttpError(400, "body must be {'pod': ..., 'configmaps': {...}}")
        try:
            spec = manifest.spec_from_document(body["pod"])
        except manifest.ManifestError as exc:
            raise HttpError(400, str(exc))
        if not isinstance(spec, PodSpec):
            raise HttpError(400, "document is not a Pod")
        configmaps = {
            name: ConfigMapSpec(name=name, data=dict(data))
            for name, data in (body.get("configmaps") or {}).items()
        }
        trail = self._submit("create", (spec, configmaps))
        return 201, {"pod": spec.name, "create_uids": trail}

    def _http_delete(self, match, query, body):
        grace = float(query.get("grace", "5"))
        report = self._submit("delete", (match.group("name"), grace))
        return 200, {"pod": match.group("name"), "containers": report}

    def _http_logs(self, match, query, body):
        pod_name = query.get("pod")
        if not pod_name:
            raise HttpError(400, "missing ?pod= parameter")
        runtime = self.pods.get(pod_name)
        if runtime is None:
            raise HttpError(404, f"pod {pod_name!r} not found")
        container_name = query.get("container") or runtime.spec.containers[0].name
        container = runtime.containers.get(container_name)
        if container is None:
            raise HttpError(404, f"container {container_name!r} not found")
        stream = query.get("stream", "stdout")
        if stream not in ("stdout", "stderr"):
            raise HttpError(400, "stream must be stdout or stderr")
        path = container.stdout_path if stream == "stdout" else container.stderr_path
        try:
            return 200, path.read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            raise HttpError(404, f"no {stream} recorded: {exc}")
