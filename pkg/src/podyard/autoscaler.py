"""Horizontal autoscaling: replica formula, readiness gating, stabilization.

The sizing rule is ceil(current * metric / target), computed with exact
rational arithmetic so boundary ratios never suffer float rounding. CPU
samples from pods that are not provably ready are excluded from the mean
before the rule is applied. Upscales apply immediately; downscales wait
out a stabilization window measured from the last applied change.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .model import AutoscalerSpec

log = logging.getLogger(__name__)

READY = "Ready"


@dataclass
class ReadinessGateConfig:
    cpu_initialization_period: float = 300.0
    delay_of_initial_readiness: float = 30.0
    metric_window: float = 30.0


@dataclass
class PodCondition:
    type: str
    status: bool
    last_transition_time: float


@dataclass
class PodView:
    """What the gate needs to know about one pod."""

    name: str
    start_time: Optional[float]
    conditions: list[PodCondition] = field(default_factory=list)

    def condition(self, type_: str) -> Optional[PodCondition]:
        for cond in self.conditions:
            if cond.type == type_:
                return cond
        return None


@dataclass
class HpaState:
    spec: AutoscalerSpec
    last_scale_time: float
    stabilization_window: float = 300.0


@dataclass
class ScaleDecision:
    time: float
    deployment: str
    current: int
    desired: int
    applied: bool
    reason: str


def desired_replicas(current: int, current_metric: float, target_metric: float) -> int:
    """ceil(current * current_metric / target_metric), exactly.

    The caller clamps the result to the autoscaler's replica bounds.
    """
    if current <= 0:
        raise ValueError(f"current replicas must be positive, got {current}")
    if target_metric <= 0:
        raise ValueError(f"target metric must be positive, got {target_metric}")
    if current_metric < 0:
        raise ValueError(f"current metric must be nonnegative, got {current_metric}")
    ratio = Fraction(current) * Fraction(current_metric) / Fraction(target_metric)
    return math.ceil(ratio)


def is_unready(
    pod: PodView,
    metric_ts: Optional[float],
    now: float,
    cfg: ReadinessGateConfig,
) -> bool:
    """Decide whether a pod's CPU sample must be ignored.

    A pod with no ready condition or no start time is always unready.
    While the pod is still inside the CPU initialization period, it is
    unready if not ready or if its sample predates the last readiness
    transition plus the metric window. After that period it is unready
    only if not ready and readiness last flipped within the initial
    readiness delay after start. Comparisons are strict, and a missing
    sample counts as a stale one.
    """
    condition = pod.condition(READY)
    if condition is None or pod.start_time is None:
        return True
    if pod.start_time + cfg.cpu_initialization_period > now:
        stale = metric_ts is None or metric_ts < condition.last_transition_time + cfg.metric_window
        return condition.status is False or stale
    return (
        condition.status is False
        and pod.start_time + cfg.delay_of_initial_readiness > condition.last_transition_time
    )


def filter_unready(
    pods: list[PodView],
    metrics: dict[str, tuple[float, float]],
    now: float,
    cfg: ReadinessGateConfig,
) -> set[str]:
    """Names of pods whose samples are excluded from utilization."""
    excluded = set()
    for pod in pods:
        sample = metrics.get(pod.name)
        metric_ts = sample[0] if sample is not None else None
        if is_unready(pod, metric_ts, now, cfg):
            excluded.add(pod.name)
    return excluded


def reconcile_hpa(
    state: HpaState,
    current: int,
    pods: list[PodView],
    metrics: dict[str, tuple[float, float]],
    now: float,
    gate: ReadinessGateConfig | None = None,
) -> ScaleDecision:
    """One sizing pass; returns the decision, applied or not.

    ``metrics`` maps pod name to its latest (timestamp, cpu-utilization)
    sample. The caller is responsible for acting on an applied decision
    and for feeding back the resulting replica count.
    """
    gate = gate or ReadinessGateConfig()
    spec = state.spec
    excluded = filter_unready(pods, metrics, now, gate)
    usable = [metrics[p.name][1] for p in pods if p.name not in excluded and p.name in metrics]
    if not usable:
        log.info("hpa %s: no usable samples (%d pods, %d excluded)", spec.name, len(pods), len(excluded))
        return ScaleDecision(now, spec.target_deployment, current, current, False, "no-usable-samples")
    mean = sum(usable) / len(usable)
    raw = desired_replicas(max(current, 1), mean, float(spec.target_cpu_utilization_pct))
    desired = min(max(raw, spec.min_replicas), spec.max_replicas)
    if desired > current:
        state.last_scale_time = now
        return ScaleDecision(now, spec.target_deployment, current, desired, True, "upscale")
    if desired < current:
        if now - state.last_scale_time >= state.stabilization_window:
            state.last_scale_time = now
            return ScaleDecision(now, spec.target_deployment, current, desired, True, "downscale")
        return ScaleDecision(now, spec.target_deployment, current, desired, False, "stabilization-window")
    return ScaleDecision(now, spec.target_deployment, current, desired, False, "stable")
