"""Pod runtime: process-group launch, status polling, termination.

Every container of a pod runs as one script in its own OS process group
under a per-container directory:

    <work_root>/<podName>/containers/<containerName>/
        pgid            process-group id, ASCII decimal + newline
        stdout, stderr  redirected script output
        <mountPath>/    files materialized from mounted configmaps

Startup walks a fixed sequence of steps; the first failing step fixes the
container's create-phase UID and later containers are still attempted.
Status polls re-read the world (pgid file, process table, stderr file) on
every call and classify each container with a get-phase UID; a container
once seen with nonempty stderr stays failed forever.
"""
from __future__ import annotations

import logging
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..model import ConfigMapSpec, ContainerSpec, PodSpec, normalize_mount_path
from .lifecycle import CreateUid, GetUid

log = logging.getLogger(__name__)

PGID_FILE = "pgid"
STDOUT_FILE = "stdout"
STDERR_FILE = "stderr"
DEFAULT_GRACE_S = 5.0
KILL_POLL_S = 0.1


class StepFailure(Exception):
    """A create step failed; carries the step's UID."""

    def __init__(self, uid: CreateUid, cause: Exception):
        super().__init__(f"{uid.uid_name}: {cause}")
        self.uid = uid
        self.cause = cause


def _get_pgid(pid: int) -> int:
    return os.getpgid(pid)


def _begin_wait(proc: subprocess.Popen) -> None:
    """Synchronous start of the wait step; reap immediately if already done."""
    reaped, status = os.waitpid(proc.pid, os.WNOHANG)
    if reaped == proc.pid:
        proc.returncode = os.waitstatus_to_exitcode(status)


def _scan_group(pgid: int) -> list[int]:
    """Pids of processes in the group that are still executing (not zombies)."""
    pids = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            stat = Path(f"/proc/{entry}/stat").read_bytes()
        except OSError:
            continue
        fields = stat.rsplit(b")", 1)[-1].split()
        if len(fields) < 3:
            continue
        state, group = fields[0].decode("ascii", "replace"), fields[2]
        if group.isdigit() and int(group) == pgid and state not in ("Z", "X", "x"):
            pids.append(int(entry))
    return pids


@dataclass
class ContainerRuntime:
    spec: ContainerSpec
    directory: Path
    create_uid: Optional[CreateUid] = None
    pgid: Optional[int] = None
    started_at: Optional[float] = None
    failed: bool = False
    proc: Optional[subprocess.Popen] = None

    @property
    def pgid_path(self) -> Path:
        return self.directory / PGID_FILE

    @property
    def stdout_path(self) -> Path:
        return self.directory / STDOUT_FILE

    @property
    def stderr_path(self) -> Path:
        return self.directory / STDERR_FILE


@dataclass
class ContainerStatus:
    name: str
    create_uid: Optional[CreateUid]
    get_uid: GetUid
    started_at: Optional[float]
    failed: bool

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "create_uid": self.create_uid.value if self.create_uid is not None else None,
            "create_uid_name": self.create_uid.uid_name if self.create_uid is not None else None,
            "get_uid": self.get_uid.value,
            "get_uid_name": self.get_uid.uid_name,
            "started_at": self.started_at,
            "failed": self.failed,
        }


@dataclass
class PodCondition:
    type: str
    status: bool
    last_transition_time: float

    def as_dict(self) -> dict:
        return {
            "type": self.type,
            "status": self.status,
            "last_transition_time": self.last_transition_time,
        }


@dataclass
class PodStatus:
    name: str
    ready: bool
    phase: str
    containers: list[ContainerStatus]
    conditions: list[PodCondition] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "ready": self.ready,
            "phase": self.phase,
            "containers": [c.as_dict() for c in self.containers],
            "conditions": [c.as_dict() for c in self.conditions],
        }


class PodRuntime:
    """Owns the on-disk and process state of one pod on one node."""

    def __init__(
        self,
        spec: PodSpec,
        configmaps: dict[str, ConfigMapSpec],
        work_root: str | Path,
        extra_env: dict[str, str] | None = None,
        clock=time.time,
    ):
        self.spec = spec
        self.configmaps = configmaps
        self.work_root = Path(work_root)
        self.extra_env = dict(extra_env or {})
        self.clock = clock
        self.pod_start_time: Optional[float] = None
        self.containers: dict[str, ContainerRuntime] = {}

    @property
    def pod_dir(self) -> Path:
        return self.work_root / self.spec.name

    def container_dir(self, container_name: str) -> Path:
        return self.pod_dir / "containers" / container_name

    # --- create phase ---------------------------------------------------

    def create(self) -> dict[str, CreateUid]:
        """Launch every container; returns each one's final create UID."""
        self.pod_start_time = self.clock()
        trail = {}
        for cont_spec in self.spec.containers:
            runtime = ContainerRuntime(spec=cont_spec, directory=self.container_dir(cont_spec.name))
            self.containers[cont_spec.name] = runtime
            try:
                self._create_container(runtime)
                runtime.create_uid = CreateUid.CONTAINER_STARTED
            except StepFailure as failure:
                runtime.create_uid = failure.uid
                log.warning(
                    "pod %s container %s failed at %s: %s",
                    self.spec.name, cont_spec.name, failure.uid.uid_name, failure.cause,
                )
            trail[cont_spec.name] = runtime.create_uid
        return trail

    def _create_container(self, runtime: ContainerRuntime) -> None:
        cont = runtime.spec
        command = self._prepare_volumes(runtime)

        try:
            stdout_fh = open(runtime.stdout_path, "wb")
        except OSError as exc:
            raise StepFailure(CreateUid.CREATE_STDOUT_FILE_ERROR, exc)
        try:
            stderr_fh = open(runtime.stderr_path, "wb")
        except OSError as exc:
            stdout_fh.close()
            raise StepFailure(CreateUid.CREATE_STDERR_FILE_ERROR, exc)

        env = dict(os.environ)
        env.update(self.extra_env)
        env.update(cont.env)
        try:
            proc = subprocess.Popen(
                command,
                stdout=stdout_fh,
                stderr=stderr_fh,
                cwd=runtime.directory,
                env=env,
                start_new_session=True,
            )
        except OSError as exc:
            raise StepFailure(CreateUid.CMD_START_ERROR, exc)
        finally:
            stdout_fh.close()
            stderr_fh.close()

        runtime.proc = proc
        runtime.started_at = self.clock()

        try:
            runtime.pgid = _get_pgid(proc.pid)
        except OSError as exc:
            raise StepFailure(CreateUid.GET_PGID_ERROR, exc)

        try:
            _begin_wait(proc)
        except OSError as exc:
            raise StepFailure(CreateUid.CMD_WAIT_ERROR, exc)
        threading.Thread(target=self._reap, args=(proc,), daemon=True).start()

        try:
            runtime.pgid_path.write_text(f"{runtime.pgid}\n", encoding="ascii")
        except OSError as exc:
            raise StepFailure(CreateUid.WRITE_PGID_ERROR, exc)

    def _prepare_volumes(self, runtime: ContainerRuntime) -> list[str]:
        """Materialize mounted configmaps; returns the path-rewritten command."""
        cont = runtime.spec
        mounts: list[tuple[str, Path]] = []
        try:
            runtime.directory.mkdir(parents=True, exist_ok=True)
            for mount in cont.volume_mounts:
                volume = self.spec.volume_by_name(mount.volume_name)
                if volume is None:
                    raise FileNotFoundError(f"volume {mount.volume_name!r} not in pod spec")
                configmap = self.configmaps.get(volume.configmap_name)
                if configmap is None:
                    raise FileNotFoundError(f"configmap {volume.configmap_name!r} not provided")
                mount_dir = runtime.directory / normalize_mount_path(mount.mount_path)
                mount_dir.mkdir(parents=True, exist_ok=True)
                mounts.append((mount.mount_path, mount_dir))
        except (OSError, ValueError) as exc:
            raise StepFailure(CreateUid.READ_DEFAULT_VOL_DIR_ERROR, exc)

        try:
            for mount, mount_dir in zip(cont.volume_mounts, [m[1] for m in mounts]):
                configmap = self.configmaps[self.spec.volume_by_name(mount.volume_name).configmap_name]
                for filename, content in configmap.data.items():
                    target = mount_dir / filename
                    target.write_text(content, encoding="utf-8")
                    target.chmod(0o755)
        except OSError as exc:
            raise StepFailure(CreateUid.COPY_FILE_ERROR, exc)

        return [self._rewrite_token(token, mounts) for token in list(cont.command) + list(cont.args)]

    @staticmethod
    def _rewrite_token(token: str, mounts: list[tuple[str, Path]]) -> str:
        """Point command tokens at the real mount location on disk."""
        for mount_path, mount_dir in mounts:
            root = mount_path.rstrip("/")
            if token == root:
                return str(mount_dir)
            if token.startswith(root + "/"):
                return str(mount_dir / token[len(root) + 1:])
        return token

    @staticmethod
    def _reap(proc: subprocess.Popen) -> None:
        try:
            proc.wait()
        except OSError:
            pass  # reaped elsewhere

    # --- get phase --------------------------------------------------------

    def poll(self) -> PodStatus:
        statuses = [self._classify(runtime) for runtime in self.containers.values()]
        ready = bool(statuses) and all(
            s.get_uid in (GetUid.RUNNING, GetUid.COMPLETED) for s in statuses
        )
        if any(s.failed or s.get_uid in (GetUid.GET_PIDS_ERROR, GetUid.GET_STDERR_FILE_INFO_ERROR) for s in statuses):
            phase = "Failed"
        elif not statuses or any(s.get_uid == GetUid.CREATE for s in statuses):
            phase = "Pending"
        elif all(s.get_uid == GetUid.COMPLETED for s in statuses):
            phase = "Succeeded"
        else:
            phase = "Running"
        return PodStatus(
            name=self.spec.name,
            ready=ready,
            phase=phase,
            containers=statuses,
            conditions=self._conditions(ready),
        )

    def _classify(self, runtime: ContainerRuntime) -> ContainerStatus:
        get_uid = self._classify_uid(runtime)
        if get_uid == GetUid.STDERR_NOT_EMPTY:
            runtime.failed = True
        return ContainerStatus(
            name=runtime.spec.name,
            create_uid=runtime.create_uid,
            get_uid=get_uid,
            started_at=runtime.started_at,
            failed=runtime.failed,
        )

    def _classify_uid(self, runtime: ContainerRuntime) -> GetUid:
        if runtime.create_uid != CreateUid.CONTAINER_STARTED:
            return GetUid.CREATE
        if runtime.failed:
            return GetUid.STDERR_NOT_EMPTY
        try:
            pgid = int(runtime.pgid_path.read_text(encoding="ascii").strip())
            alive = self._group_alive(pgid)
        except (OSError, ValueError):
            return GetUid.GET_PIDS_ERROR
        try:
            stderr_size = runtime.stderr_path.stat().st_size
        except OSError:
            return GetUid.GET_STDERR_FILE_INFO_ERROR
        if stderr_size > 0:
            return GetUid.STDERR_NOT_EMPTY
        return GetUid.RUNNING if alive else GetUid.COMPLETED

    @staticmethod
    def _group_alive(pgid: int) -> bool:
        try:
            os.killpg(pgid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        # The group exists, but it may consist solely of zombies waiting for
        # init to collect them; those have finished executing and don't count.
        return any(_scan_group(pgid))

    def _conditions(self, ready: bool) -> list[PodCondition]:
        pod_start = self.pod_start_time if self.pod_start_time is not None else self.clock()
        first = self.spec.containers[0].name if self.spec.containers else None
        first_start = pod_start
        if first is not None and first in self.containers:
            started = self.containers[first].started_at
            if started is not None:
                first_start = started
        return [
            PodCondition("PodScheduled", True, pod_start),
            PodCondition("Initialized", True, pod_start),
            PodCondition("Ready", ready, first_start),
        ]

    # --- teardown -----------------------------------------------------------

    def live_pids(self) -> dict[str, list[int]]:
        """Live process ids per container, by process-group membership.

        Zombies are excluded: they have finished executing and merely await
        collection, so they are dead for scheduling and accounting purposes.
        """
        return {
            name: sorted(_scan_group(runtime.pgid))
            for name, runtime in self.containers.items()
            if runtime.pgid is not None
        }

    def terminate(self, grace_s: float = DEFAULT_GRACE_S) -> dict[str, str]:
        """Signal every container's whole process group; returns a report."""
        report = {}
        for name, runtime in self.containers.items():
            if runtime.pgid is None:
                report[name] = "never-started"
                continue
            if not self._group_alive(runtime.pgid):
                report[name] = "no-live-processes"
                continue
            try:
                os.killpg(runtime.pgid, signal.SIGTERM)
            except ProcessLookupError:
                report[name] = "no-live-processes"
                continue
            except OSError as exc:
                report[name] = f"signal-error: {exc}"
                continue
            deadline = time.time() + grace_s
            while time.time() < deadline:
                if not self._group_alive(runtime.pgid):
                    break
                time.sleep(KILL_POLL_S)
            if self._group_alive(runtime.pgid):
                try:
                    os.killpg(runtime.pgid, signal.SIGKILL)
                    report[name] = "killed"
                except OSError as exc:
                    report[name] = f"signal-error: {exc}"
            else:
                report[name] = "terminated"
        return report
