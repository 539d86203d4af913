"""Node agent: runs pods as process groups on one virtual node."""

from .config import AgentConfig
from .lifecycle import CreateUid, GetUid
from .runtime import PodRuntime
from .agent import Agent

__all__ = ["AgentConfig", "CreateUid", "GetUid", "PodRuntime", "Agent"]
