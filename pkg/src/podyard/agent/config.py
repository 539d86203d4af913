"""Agent configuration, settable through environment variables."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

ENV_NODENAME = "NODENAME"
ENV_POD_IP = "VKUBELET_POD_IP"
ENV_KUBELET_PORT = "KUBELET_PORT"
ENV_WALLTIME = "JIRIAF_WALLTIME"
ENV_NODETYPE = "JIRIAF_NODETYPE"
ENV_SITE = "JIRIAF_SITE"
ENV_CONTROL_PLANE = "CONTROL_PLANE"
ENV_WORK_ROOT = "WORK_ROOT"


@dataclass
class AgentConfig:
    nodename: str
    control_plane_address: str = ""
    pod_ip: str = "127.0.0.1"
    kubelet_port: int = 10250
    walltime_s: int = 0
    nodetype: str = "cpu"
    site: str = "Local"
    work_root: str = ""
    agent_host: str = "127.0.0.1"
    heartbeat_interval: float = 10.0

    def __post_init__(self):
        if not self.work_root:
            self.work_root = str(Path.home())

    def validate(self) -> list[str]:
        violations = []
        if not self.nodename:
            violations.append("nodename is required")
        if self.kubelet_port != 0 and not 1024 <= self.kubelet_port <= 65535:
            violations.append(f"kubelet_port {self.kubelet_port} outside [1024, 65535]")
        if self.walltime_s < 0:
            violations.append(f"walltime_s {self.walltime_s} is negative")
        if self.heartbeat_interval <= 0:
            violations.append("heartbeat_interval must be positive")
        return violations

    @classmethod
    def from_env(cls, env: dict | None = None) -> "AgentConfig":
        env = os.environ if env is None else env

        def need(name: str) -> str:
            value = env.get(name)
            if not value:
                raise ValueError(f"environment variable {name} is required")
            return value

        return cls(
            nodename=need(ENV_NODENAME),
            control_plane_address=env.get(ENV_CONTROL_PLANE, ""),
            pod_ip=env.get(ENV_POD_IP, "127.0.0.1"),
            kubelet_port=int(env.get(ENV_KUBELET_PORT, "10250")),
            walltime_s=int(env.get(ENV_WALLTIME, "0")),
            nodetype=env.get(ENV_NODETYPE, "cpu"),
            site=env.get(ENV_SITE, "Local"),
            work_root=env.get(ENV_WORK_ROOT, ""),
        )
