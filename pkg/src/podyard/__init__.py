"""podyard: a userspace mini-orchestrator.

Pods are groups of scripts run as OS process groups under per-pod working
directories. A small control plane schedules pods onto registered virtual
nodes, a horizontal autoscaler sizes deployments from scraped CPU metrics,
a batch launcher spawns node agents, and a queue digital twin closes the
loop between thread-count control and observed queue length.
"""

__version__ = "0.1.0"
