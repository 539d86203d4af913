"""Workflow launcher: spawn batches of local node agents with a walltime.

A workflow says "run N agents with walltime W". Agents are spawned as
local processes in their own process groups (the stand-in for batch jobs
on a real scheduler), their names are `<prefix>-<zero-padded ordinal>`,
and each agent's own walltime is set 60 seconds below the job walltime so
the node can drain before the job is reaped. Workflow records live in an
append-only journal and survive launcher restarts.
"""
from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agent import config as agent_env
from .journal import Journal
from .model import is_identifier

log = logging.getLogger(__name__)

PENDING = "pending"
RUNNING = "running"
COMPLETED = "completed"
DELETED = "deleted"
FAILED = "failed"

WALLTIME_OFFSET_S = 60
DEFAULT_STAGGER_S = 3.0
MAX_IN_FLIGHT = 8
KILL_GRACE_S = 3.0


class WorkflowError(Exception):
    pass


def agent_walltime(job_walltime_s: int) -> int:
    """A job's agents live 60 s less than the job itself; 0 stays unlimited."""
    if job_walltime_s == 0:
        return 0
    return max(job_walltime_s - WALLTIME_OFFSET_S, 0)


def parse_walltime(text: str) -> int:
    """Accepts plain seconds or HH:MM:SS."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"walltime {text!r} is neither seconds nor HH:MM:SS")
        hours, minutes, seconds = (int(p) for p in parts)
        return hours * 3600 + minutes * 60 + seconds
    return int(text)


def parse_workflow_file(text: str) -> dict:
    """Parse the key=value workflow format (nnodes, nodetype, walltime, ...)."""
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise WorkflowError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    known = {"nnodes", "nodetype", "walltime", "nodename", "site", "control_plane"}
    unknown = set(fields) - known
    if unknown:
        raise WorkflowError(f"unknown field(s): {', '.join(sorted(unknown))}")
    return fields


@dataclass
class WorkflowSpec:
    id: str
    nnodes: int
    nodetype: str
    site: str
    job_walltime_s: int
    nodename_prefix: str
    control_plane_address: str = ""

    def validate(self) -> list[str]:
        problems = []
        if self.nnodes < 1:
            problems.append(f"nnodes must be >= 1, got {self.nnodes}")
        if not (self.job_walltime_s == 0 or self.job_walltime_s > WALLTIME_OFFSET_S):
            problems.append(
                f"walltime must be 0 (unlimited) or > {WALLTIME_OFFSET_S}s, got {self.job_walltime_s}"
            )
        if not is_identifier(self.nodename_prefix):
            problems.append(f"nodename prefix {self.nodename_prefix!r} is not a valid identifier")
        return problems

    def node_names(self) -> list[str]:
        width = max(2, len(str(self.nnodes)))
        return [f"{self.nodename_prefix}-{str(i).zfill(width)}" for i in range(1, self.nnodes + 1)]


@dataclass
class WorkflowRecord:
    spec: WorkflowSpec
    state: str = PENDING
    handles: list[dict] = field(default_factory=list)  # {"node", "pid"}
    created_at: float = 0.0
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "id": self.spec.id,
            "state": self.state,
            "nnodes": self.spec.nnodes,
            "nodetype": self.spec.nodetype,
            "site": self.spec.site,
            "walltime": self.spec.job_walltime_s,
            "prefix": self.spec.nodename_prefix,
            "created_at": self.created_at,
            "handles": [dict(h) for h in self.handles],
            "detail": self.detail,
        }


def _pid_alive(pid: int) -> bool:
    try:
        state = Path(f"/proc/{pid}/stat").read_bytes().rsplit(b")", 1)[-1].split()[0]
    except OSError:
        return False
    return state not in (b"Z", b"X", b"x")


class Launcher:
    def __init__(
        self,
        store_path,
        control_plane_address: str = "",
        work_root=None,
        stagger_s: float = DEFAULT_STAGGER_S,
        python: str = sys.executable,
    ):
        self.journal = Journal(store_path)
        self.control_plane_address = control_plane_address
        self.work_root = Path(work_root) if work_root else Path(store_path).parent
        self.stagger_s = stagger_s
        self.python = python
        self.records: dict[str, WorkflowRecord] = {}
        self._procs: dict[str, list[subprocess.Popen]] = {}
        self._next_ordinal = 1
        for record in self.journal.replay():
            self._replay(record)

    def _replay(self, record: dict) -> None:
        op = record.get("op")
        if op == "add":
            spec = WorkflowSpec(**record["spec"])
            self.records[spec.id] = WorkflowRecord(spec=spec, created_at=record.get("ts", 0.0))
            tail = spec.id.rsplit("-", 1)[-1]
            if tail.isdigit():
                self._next_ordinal = max(self._next_ordinal, int(tail) + 1)
        elif op == "state":
            existing = self.records.get(record["id"])
            if existing is not None:
                existing.state = record["state"]
                existing.handles = record.get("handles", existing.handles)
                existing.detail = record.get("detail", "")
        else:
            log.warning("workflow journal: unknown op %r", op)

    def _commit_state(self, record: WorkflowRecord) -> None:
        self.journal.append({
            "op": "state", "id": record.spec.id, "state": record.state,
            "handles": record.handles, "detail": record.detail, "ts": time.time(),
        })

    def _active_names(self) -> set[str]:
        names = set()
        for record in self.records.values():
            if record.state in (PENDING, RUNNING):
                names.update(record.spec.node_names())
        return names

    # --- operations -------------------------------------------------------

    def add_wf(self, fields: dict) -> str:
        """Create and launch a workflow from parsed spec-file fields."""
        try:
            nnodes = int(fields.get("nnodes", "1"))
            walltime = parse_walltime(str(fields.get("walltime", "0")))
        except ValueError as exc:
            raise WorkflowError(str(exc))
        wf_id = f"wf-{self._next_ordinal}"
        spec = WorkflowSpec(
            id=wf_id,
            nnodes=nnodes,
            nodetype=fields.get("nodetype", "cpu"),
            site=fields.get("site", "Local"),
            job_walltime_s=walltime,
            nodename_prefix=fields.get("nodename", wf_id),
            control_plane_address=fields.get("control_plane", self.control_plane_address),
        )
        problems = spec.validate()
        if problems:
            raise WorkflowError("; ".join(problems))
        taken = self._active_names() & set(spec.node_names())
        if taken:
            raise WorkflowError(f"node name(s) already in use: {', '.join(sorted(taken))}")
        self._next_ordinal += 1
        record = WorkflowRecord(spec=spec, created_at=time.time())
        self.records[wf_id] = record
        self.journal.append({"op": "add", "id": wf_id, "spec": asdict(spec), "ts": record.created_at})
        self._launch(record)
        return wf_id

    def _launch(self, record: WorkflowRecord) -> None:
        spec = record.spec
        walltime = agent_walltime(spec.job_walltime_s)
        log_dir = self.work_root / spec.id
        log_dir.mkdir(parents=True, exist_ok=True)
        procs: list[subprocess.Popen] = []
        failures: list[str] = []

        def spawn(index, name):
            time.sleep(index * self.stagger_s)
            env = dict(os.environ)
            env.update({
                agent_env.ENV_NODENAME: name,
                agent_env.ENV_KUBELET_PORT: "0",
                agent_env.ENV_WALLTIME: str(walltime),
                agent_env.ENV_NODETYPE: spec.nodetype,
                agent_env.ENV_SITE: spec.site,
                agent_env.ENV_CONTROL_PLANE: spec.control_plane_address,
                agent_env.ENV_WORK_ROOT: str(log_dir / name),
            })
            log_path = log_dir / f"{name}.log"
            with log_path.open("ab") as sink:
                return subprocess.Popen(
                    [self.python, "-m", "podyard.agent"],
                    stdout=sink, stderr=subprocess.STDOUT,
                    env=env, start_new_session=True,
                )

        with ThreadPoolExecutor(max_workers=MAX_IN_FLIGHT) as pool:
            futures = [(name, pool.submit(spawn, i, name)) for i, name in enumerate(spec.node_names())]
            for name, future in futures:
                try:
                    proc = future.result()
                except OSError as exc:
                    failures.append(f"{name}: {exc}")
                    continue
                procs.append(proc)
                record.handles.append({"node": name, "pid": proc.pid})
        self._procs[spec.id] = procs
        if failures:
            for proc in procs:
                self._signal_group(proc.pid, signal.SIGKILL)
            record.state = FAILED
            record.detail = "; ".join(failures)
        else:
            record.state = RUNNING
        self._commit_state(record)

    def get_wf(self) -> list[dict]:
        """All workflow records, with liveness freshly polled."""
        self.refresh()
        # Numeric sort: "wf-10" comes after "wf-9", not after "wf-1".
        ordered = sorted(self.records.items(), key=lambda item: int(item[0].rsplit("-", 1)[1]))
        return [record.as_dict() for _, record in ordered]

    def refresh(self) -> None:
        for record in self.records.values():
            if record.state != RUNNING:
                continue
            for proc in self._procs.get(record.spec.id, []):
                proc.poll()  # reap if exited
            if record.handles and not any(_pid_alive(h["pid"]) for h in record.handles):
                record.state = COMPLETED
                self._commit_state(record)

    def delete_wf(self, wf_id: str) -> dict:
        record = self.records.get(wf_id)
        if record is None:
            raise WorkflowError(f"workflow {wf_id!r} not found")
        if record.state == DELETED:
            raise WorkflowError(f"workflow {wf_id!r} already deleted")
        self.refresh()
        killed = []
        if record.state == RUNNING:
            for handle in record.handles:
                if self._terminate_group(handle["pid"]):
                    killed.append(handle["node"])
        record.state = DELETED
        self._commit_state(record)
        return {"id": wf_id, "killed": killed}

    def _terminate_group(self, pid: int) -> bool:
        if not self._pgid_alive(pid):
            return False
        self._signal_group(pid, signal.SIGTERM)
        deadline = time.time() + KILL_GRACE_S
        while time.time() < deadline:
            if not self._pgid_alive(pid):
                return True
            time.sleep(0.1)
        self._signal_group(pid, signal.SIGKILL)
        return True

    @staticmethod
    def _pgid_alive(pgid: int) -> bool:
        try:
            members = os.listdir("/proc")
        except OSError:
            return False
        for entry in members:
            if entry.isdigit() and _pid_alive(int(entry)):
                try:
                    if os.getpgid(int(entry)) == pgid:
                        return True
                except OSError:
                    continue
        return False

    @staticmethod
    def _signal_group(pgid: int, sig: int) -> None:
        try:
            os.killpg(pgid, sig)
        except OSError:
            pass

    def close(self) -> None:
        self.journal.close()
