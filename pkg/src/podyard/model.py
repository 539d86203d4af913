"""Declarative workload model.

Typed specs for config maps, pods, deployments and autoscalers, plus the
label/affinity semantics shared by the scheduler and the node agent. All
types are plain immutable-by-convention dataclasses; parsing from manifest
text lives in :mod:`podyard.manifest`.
"""
from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass, field
from typing import Optional

IDENTIFIER_RE = re.compile(r"^[a-z0-9-]{1,63}$")

# Well-known label and taint keys advertised by node agents.
NODETYPE_LABEL = "jiriaf.nodetype"
SITE_LABEL = "jiriaf.site"
ALIVETIME_LABEL = "jiriaf.alivetime"
ROLE_LABEL = "kubernetes.io/role"
ROLE_AGENT = "agent"
PROVIDER_TAINT_KEY = "virtual-kubelet.io/provider"
PROVIDER_TAINT_VALUE = "mock"

AFFINITY_OPERATORS = ("In", "Gt")
TOLERATION_EFFECTS = ("NoSchedule",)
CONTROLS = (16, 32)  # processing capacities used by the queue twin


class AffinityEvaluationError(Exception):
    """A rule or label value could not be evaluated (malformed Gt operand)."""


def is_identifier(name: object) -> bool:
    return isinstance(name, str) and IDENTIFIER_RE.match(name) is not None


def normalize_mount_path(mount_path: str) -> str:
    """Normalize a mount path to a relative directory under the container dir.

    Leading slashes are stripped: ``/stress`` and ``stress`` both land in the
    ``stress`` subdirectory. Returns the normalized relative path, or raises
    ValueError when the path escapes upward or normalizes to nothing.
    """
    rel = posixpath.normpath(mount_path.lstrip("/"))
    if rel in (".", "") or rel.startswith("..") or rel.startswith("/"):
        raise ValueError(f"mount path {mount_path!r} does not normalize to a safe relative path")
    return rel


@dataclass
class ConfigMapSpec:
    name: str
    data: dict[str, str] = field(default_factory=dict)

    kind = "ConfigMap"


@dataclass
class VolumeMount:
    volume_name: str
    mount_path: str


@dataclass
class ContainerSpec:
    name: str
    image: str
    command: list[str] = field(default_factory=list)
    args: list[str] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)
    volume_mounts: list[VolumeMount] = field(default_factory=list)


@dataclass
class AffinityRule:
    key: str
    operator: str  # "In" | "Gt"
    values: list[str] = field(default_factory=list)


@dataclass
class Toleration:
    key: str
    value: str
    effect: str = "NoSchedule"

    def covers(self, taint_key: str, taint_value: str, taint_effect: str) -> bool:
        return self.key == taint_key and self.value == taint_value and self.effect == taint_effect


@dataclass
class VolumeSpec:
    name: str
    configmap_name: str


@dataclass
class PodSpec:
    name: str
    containers: list[ContainerSpec] = field(default_factory=list)
    volumes: list[VolumeSpec] = field(default_factory=list)
    node_selector: dict[str, str] = field(default_factory=dict)
    tolerations: list[Toleration] = field(default_factory=list)
    affinity: list[AffinityRule] = field(default_factory=list)
    labels: dict[str, str] = field(default_factory=dict)

    kind = "Pod"

    def volume_by_name(self, name: str) -> Optional[VolumeSpec]:
        for vol in self.volumes:
            if vol.name == name:
                return vol
        return None


@dataclass
class DeploymentSpec:
    name: str
    replicas: int
    selector: dict[str, str]
    template: PodSpec

    kind = "Deployment"


@dataclass
class AutoscalerSpec:
    name: str
    target_deployment: str
    min_replicas: int
    max_replicas: int
    target_cpu_utilization_pct: int

    kind = "HorizontalAutoscaler"


@dataclass
class NodeLabels:
    """The three scheduling labels a node advertises.

    ``alivetime`` is the remaining walltime budget in seconds and is absent
    exactly when the node runs with an unlimited (zero) walltime.
    """

    nodetype: str
    site: str
    alivetime: Optional[int] = None

    def as_dict(self) -> dict[str, str]:
        labels = {
            NODETYPE_LABEL: self.nodetype,
            SITE_LABEL: self.site,
            ROLE_LABEL: ROLE_AGENT,
        }
        if self.alivetime is not None:
            labels[ALIVETIME_LABEL] = str(self.alivetime)
        return labels


def validate_configmap(spec: ConfigMapSpec) -> list[str]:
    violations = []
    if not is_identifier(spec.name):
        violations.append(f"configmap name {spec.name!r} is not a valid identifier")
    for filename in spec.data:
        if "/" in filename or "\\" in filename or filename in (".", ".."):
            violations.append(f"configmap {spec.name!r}: filename {filename!r} contains a path separator")
    return violations


def validate_pod(spec: PodSpec) -> list[str]:
    """Collect every invariant violation; an empty list means deployable."""
    violations = []
    if not is_identifier(spec.name):
        violations.append(f"pod name {spec.name!r} is not a valid identifier")
    seen = set()
    for cont in spec.containers:
        if cont.name in seen:
            violations.append(f"duplicate container name {cont.name!r}")
        seen.add(cont.name)
        if not is_identifier(cont.name):
            violations.append(f"container name {cont.name!r} is not a valid identifier")
        if not cont.command:
            violations.append(f"container {cont.name!r}: command is empty")
        for mount in cont.volume_mounts:
            if spec.volume_by_name(mount.volume_name) is None:
                violations.append(
                    f"container {cont.name!r}: mount references undeclared volume {mount.volume_name!r}"
                )
            try:
                normalize_mount_path(mount.mount_path)
            except ValueError as exc:
                violations.append(f"container {cont.name!r}: {exc}")
    if not spec.containers:
        violations.append("pod has no containers")
    for tol in spec.tolerations:
        if tol.effect not in TOLERATION_EFFECTS:
            violations.append(f"toleration effect {tol.effect!r} is not supported")
    violations.extend(validate_affinity(spec.affinity))
    return violations


def validate_affinity(rules: list[AffinityRule]) -> list[str]:
    violations = []
    for rule in rules:
        if rule.operator not in AFFINITY_OPERATORS:
            violations.append(f"affinity rule {rule.key!r}: operator {rule.operator!r} not supported")
        elif rule.operator == "In" and not rule.values:
            violations.append(f"affinity rule {rule.key!r}: In requires at least one value")
        elif rule.operator == "Gt":
            if len(rule.values) != 1:
                violations.append(f"affinity rule {rule.key!r}: Gt requires exactly one value")
            else:
                try:
                    int(rule.values[0])
                except ValueError:
                    violations.append(
                        f"affinity rule {rule.key!r}: Gt value {rule.values[0]!r} is not an integer"
                    )
    return violations


def validate_deployment(spec: DeploymentSpec) -> list[str]:
    violations = []
    if not is_identifier(spec.name):
        violations.append(f"deployment name {spec.name!r} is not a valid identifier")
    if spec.replicas < 0:
        violations.append("replicas must be nonnegative")
    for key, value in spec.selector.items():
        if spec.template.labels.get(key) != value:
            violations.append(f"template labels do not satisfy selector {key}={value}")
    violations.extend(validate_pod(spec.template))
    return violations


def validate_autoscaler(spec: AutoscalerSpec) -> list[str]:
    violations = []
    if not is_identifier(spec.name):
        violations.append(f"autoscaler name {spec.name!r} is not a valid identifier")
    if spec.min_replicas < 1 or spec.max_replicas < 1:
        violations.append("min and max replicas must be positive")
    if spec.min_replicas > spec.max_replicas:
        violations.append("min_replicas must not exceed max_replicas")
    if not 0 < spec.target_cpu_utilization_pct <= 100:
        violations.append("target utilization must be in (0, 100]")
    return violations


def validate(spec) -> list[str]:
    if isinstance(spec, ConfigMapSpec):
        return validate_configmap(spec)
    if isinstance(spec, PodSpec):
        return validate_pod(spec)
    if isinstance(spec, DeploymentSpec):
        return validate_deployment(spec)
    if isinstance(spec, AutoscalerSpec):
        return validate_autoscaler(spec)
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def match_affinity(labels, rules: list[AffinityRule]) -> bool:
    """True iff every rule matches the node's labels.

    ``labels`` may be a NodeLabels or a plain label map. ``In`` requires the
    label value to be one of the rule values; ``Gt`` requires the label to be
    present, integer-valued and strictly greater than the rule value. A Gt
    rule over an absent label fails (nodes advertising no lifetime must not
    attract lifetime-constrained pods).
    """
    if isinstance(labels, NodeLabels):
        labels = labels.as_dict()
    for rule in rules:
        value = labels.get(rule.key)
        if rule.operator == "In":
            if value is None or value not in rule.values:
                return False
        elif rule.operator == "Gt":
            try:
                threshold = int(rule.values[0])
            except (IndexError, ValueError) as exc:
                raise AffinityEvaluationError(f"rule {rule.key!r}: malformed Gt value") from exc
            if value is None:
                return False
            try:
                actual = int(value)
            except ValueError as exc:
                raise AffinityEvaluationError(
                    f"rule {rule.key!r}: label value {value!r} is not an integer"
                ) from exc
            if not actual > threshold:
                return False
        else:
            raise AffinityEvaluationError(f"rule {rule.key!r}: operator {rule.operator!r} not supported")
    return True
