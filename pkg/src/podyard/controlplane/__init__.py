"""Cluster brain: state, scheduler, reconciler and the HTTP API."""
from .scheduler import is_feasible, schedule
from .state import ClusterState, NodeRecord, PodRecord, StateStore
from .server import ControlPlane

__all__ = [
    "ClusterState",
    "ControlPlane",
    "NodeRecord",
    "PodRecord",
    "StateStore",
    "is_feasible",
    "schedule",
]
