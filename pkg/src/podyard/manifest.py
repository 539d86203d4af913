"""Manifest parsing and serialization.

Manifests are multi-document YAML with ``kind:`` discriminators. Four kinds
are understood: ConfigMap, Pod, Deployment and HorizontalAutoscaler (the
``HorizontalPodAutoscaler`` spelling is accepted as an alias). Parsing
yields the typed specs from :mod:`podyard.model`; ``serialize`` is its
inverse, and round-trips are exact.
"""
from __future__ import annotations

from typing import Any

import yaml

from . import model
from .model import (
    AffinityRule,
    AutoscalerSpec,
    ConfigMapSpec,
    ContainerSpec,
    DeploymentSpec,
    PodSpec,
    Toleration,
    VolumeMount,
    VolumeSpec,
)

KNOWN_KINDS = ("ConfigMap", "Pod", "Deployment", "HorizontalAutoscaler", "HorizontalPodAutoscaler")

Spec = ConfigMapSpec | PodSpec | DeploymentSpec | AutoscalerSpec


class ManifestError(Exception):
    """Raised for syntax errors, unknown kinds, or missing/ill-typed fields."""


def parse_manifest(text: str) -> list[Spec]:
    """Parse manifest text into one typed spec per document, in order."""
    try:
        documents = list(yaml.safe_load_all(text))
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ManifestError(f"manifest syntax error{where}: {exc.problem or exc}") from exc
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest syntax error: {exc}") from exc

    specs = []
    for index, doc in enumerate(documents):
        if doc is None:
            continue
        if not isinstance(doc, dict):
            raise ManifestError(f"document {index + 1}: expected a mapping, got {type(doc).__name__}")
        specs.append(_parse_document(doc, index + 1))
    return specs


def serialize(specs: list[Spec] | Spec) -> str:
    """Render specs back to manifest text (inverse of parse_manifest)."""
    if not isinstance(specs, list):
        specs = [specs]
    return yaml.safe_dump_all([to_manifest(spec) for spec in specs], sort_keys=False)


def spec_from_document(doc: dict) -> Spec:
    """Parse one already-decoded manifest document into a typed spec."""
    if not isinstance(doc, dict):
        raise ManifestError(f"expected a mapping, got {type(doc).__name__}")
    return _parse_document(doc, 1)


def to_manifest(spec: Spec) -> dict:
    if isinstance(spec, ConfigMapSpec):
        return {
            "apiVersion": "v1",
            "kind": "ConfigMap",
            "metadata": {"name": spec.name},
            "data": dict(spec.data),
        }
    if isinstance(spec, PodSpec):
        return {"apiVersion": "v1", "kind": "Pod", "metadata": _pod_metadata(spec), "spec": _pod_spec_body(spec)}
    if isinstance(spec, DeploymentSpec):
        return {
            "apiVersion": "apps/v1",
            "kind": "Deployment",
            "metadata": {"name": spec.name},
            "spec": {
                "replicas": spec.replicas,
                "selector": {"matchLabels": dict(spec.selector)},
                "template": {
                    "metadata": _pod_metadata(spec.template),
                    "spec": _pod_spec_body(spec.template),
                },
            },
        }
    if isinstance(spec, AutoscalerSpec):
        return {
            "apiVersion": "autoscaling/v2",
            "kind": "HorizontalPodAutoscaler",
            "metadata": {"name": spec.name},
            "spec": {
                "scaleTargetRef": {"apiVersion": "apps/v1", "kind": "Deployment", "name": spec.target_deployment},
                "minReplicas": spec.min_replicas,
                "maxReplicas": spec.max_replicas,
                "metrics": [
                    {
                        "type": "Resource",
                        "resource": {
                            "name": "cpu",
                            "target": {"type": "Utilization", "averageUtilization": spec.target_cpu_utilization_pct},
                        },
                    }
                ],
            },
        }
    raise TypeError(f"cannot serialize {type(spec).__name__}")


def _pod_metadata(spec: PodSpec) -> dict:
    meta: dict[str, Any] = {"name": spec.name}
    if spec.labels:
        meta["labels"] = dict(spec.labels)
    return meta


def _pod_spec_body(spec: PodSpec) -> dict:
    body: dict[str, Any] = {"containers": [_container_body(c) for c in spec.containers]}
    if spec.volumes:
        body["volumes"] = [{"name": v.name, "configMap": {"name": v.configmap_name}} for v in spec.volumes]
    if spec.node_selector:
        body["nodeSelector"] = dict(spec.node_selector)
    if spec.tolerations:
        body["tolerations"] = [{"key": t.key, "value": t.value, "effect": t.effect} for t in spec.tolerations]
    if spec.affinity:
        body["affinity"] = {
            "nodeAffinity": {
                "requiredDuringSchedulingIgnoredDuringExecution": {
                    "nodeSelectorTerms": [
                        {
                            "matchExpressions": [
                                {"key": r.key, "operator": r.operator, "values": list(r.values)}
                                for r in spec.affinity
                            ]
                        }
                    ]
                }
            }
        }
    return body


def _container_body(cont: ContainerSpec) -> dict:
    body: dict[str, Any] = {"name": cont.name, "image": cont.image, "command": list(cont.command)}
    if cont.args:
        body["args"] = list(cont.args)
    if cont.env:
        body["env"] = [{"name": k, "value": v} for k, v in cont.env.items()]
    if cont.volume_mounts:
        body["volumeMounts"] = [{"name": m.volume_name, "mountPath": m.mount_path} for m in cont.volume_mounts]
    return body


def _parse_document(doc: dict, index: int) -> Spec:
    kind = doc.get("kind")
    if kind is None:
        raise ManifestError(f"document {index}: missing field 'kind'")
    if kind not in KNOWN_KINDS:
        raise ManifestError(f"document {index}: unknown kind {kind!r}")
    where = f"document {index} ({kind})"
    if kind == "ConfigMap":
        return _parse_configmap(doc, where)
    if kind == "Pod":
        name = _required_name(doc, where)
        labels = {str(k): str(v) for k, v in ((doc.get("metadata") or {}).get("labels") or {}).items()}
        return parse_pod_body(_required(doc, "spec", where, dict), name, where, labels)
    if kind == "Deployment":
        return _parse_deployment(doc, where)
    return _parse_autoscaler(doc, where)


def _required(mapping: dict, key: str, where: str, typ=None):
    if key not in mapping or mapping[key] is None:
        raise ManifestError(f"{where}: missing field {key!r}")
    value = mapping[key]
    if typ is not None and not isinstance(value, typ):
        raise ManifestError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _required_name(doc: dict, where: str) -> str:
    metadata = _required(doc, "metadata", where, dict)
    return str(_required(metadata, "name", where))


def _parse_configmap(doc: dict, where: str) -> ConfigMapSpec:
    name = _required_name(doc, where)
    data = doc.get("data") or {}
    if not isinstance(data, dict):
        raise ManifestError(f"{where}: field 'data' must be a mapping")
    return ConfigMapSpec(name=name, data={str(k): str(v) for k, v in data.items()})


def parse_pod_body(spec_body: dict, name: str, where: str, labels: dict | None = None) -> PodSpec:
    containers_raw = _required(spec_body, "containers", where, list)
    containers = [_parse_container(c, where) for c in containers_raw]
    volumes = []
    for vol in spec_body.get("volumes") or []:
        vol_name = str(_required(vol, "name", f"{where} volume"))
        cm = _required(vol, "configMap", f"{where} volume {vol_name!r}", dict)
        volumes.append(VolumeSpec(name=vol_name, configmap_name=str(_required(cm, "name", where))))
    tolerations = [
        Toleration(key=str(_required(t, "key", where)), value=str(t.get("value", "")), effect=str(t.get("effect", "NoSchedule")))
        for t in spec_body.get("tolerations") or []
    ]
    node_selector = {str(k): str(v) for k, v in (spec_body.get("nodeSelector") or {}).items()}
    affinity = _parse_affinity(spec_body.get("affinity") or {}, where)
    return PodSpec(
        name=name,
        containers=containers,
        volumes=volumes,
        node_selector=node_selector,
        tolerations=tolerations,
        affinity=affinity,
        labels=dict(labels or {}),
    )


def _parse_container(raw: dict, where: str) -> ContainerSpec:
    name = str(_required(raw, "name", f"{where} container"))
    cwhere = f"{where} container {name!r}"
    command = _required(raw, "command", cwhere, list)
    env = raw.get("env") or {}
    if isinstance(env, list):  # kubernetes-style [{name, value}] entries
        env = {str(_required(e, "name", cwhere)): str(e.get("value", "")) for e in env}
    elif not isinstance(env, dict):
        raise ManifestError(f"{cwhere}: field 'env' must be a mapping or a list")
    mounts = [
        VolumeMount(
            volume_name=str(_required(m, "name", cwhere)),
            mount_path=str(_required(m, "mountPath", cwhere)),
        )
        for m in raw.get("volumeMounts") or []
    ]
    return ContainerSpec(
        name=name,
        image=str(_required(raw, "image", cwhere)),
        command=[str(c) for c in command],
        args=[str(a) for a in raw.get("args") or []],
        env={str(k): str(v) for k, v in env.items()},
        volume_mounts=mounts,
    )


def _parse_affinity(raw: dict, where: str) -> list[AffinityRule]:
    node_affinity = raw.get("nodeAffinity") or {}
    required = node_affinity.get("requiredDuringSchedulingIgnoredDuringExecution") or {}
    terms = required.get("nodeSelectorTerms") or []
    rules = []
    for term in terms:
        for expr in term.get("matchExpressions") or []:
            operator = str(_required(expr, "operator", f"{where} affinity"))
            if operator not in model.AFFINITY_OPERATORS:
                raise ManifestError(f"{where}: affinity operator {operator!r} not supported")
            values = expr.get("values") or []
            if not isinstance(values, list):
                raise ManifestError(f"{where}: affinity 'values' must be a list")
            rules.append(
                AffinityRule(
                    key=str(_required(expr, "key", f"{where} affinity")),
                    operator=operator,
                    values=[str(v) for v in values],
                )
            )
    return rules


def _parse_deployment(doc: dict, where: str) -> DeploymentSpec:
    name = _required_name(doc, where)
    spec_body = _required(doc, "spec", where, dict)
    selector_raw = _required(spec_body, "selector", where, dict)
    selector = {str(k): str(v) for k, v in (selector_raw.get("matchLabels") or {}).items()}
    template_raw = _required(spec_body, "template", where, dict)
    template_meta = template_raw.get("metadata") or {}
    labels = {str(k): str(v) for k, v in (template_meta.get("labels") or {}).items()}
    template_name = str(template_meta.get("name") or name)
    template = parse_pod_body(_required(template_raw, "spec", where, dict), template_name, where, labels)
    replicas = spec_body.get("replicas", 1)
    if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 0:
        raise ManifestError(f"{where}: 'replicas' must be a nonnegative integer")
    return DeploymentSpec(name=name, replicas=replicas, selector=selector, template=template)


def _parse_autoscaler(doc: dict, where: str) -> AutoscalerSpec:
    name = _required_name(doc, where)
    spec_body = _required(doc, "spec", where, dict)
    target_ref = _required(spec_body, "scaleTargetRef", where, dict)
    target = str(_required(target_ref, "name", where))
    min_replicas = _required(spec_body, "minReplicas", where, int)
    max_replicas = _required(spec_body, "maxReplicas", where, int)
    metrics = _required(spec_body, "metrics", where, list)
    utilization = None
    for metric in metrics:
        resource = metric.get("resource") or {}
        if resource.get("name") == "cpu":
            utilization = (resource.get("target") or {}).get("averageUtilization")
    if utilization is None:
        raise ManifestError(f"{where}: no cpu averageUtilization target found")
    if not isinstance(utilization, int) or isinstance(utilization, bool):
        raise ManifestError(f"{where}: 'averageUtilization' must be an integer")
    return AutoscalerSpec(
        name=name,
        target_deployment=target,
        min_replicas=min_replicas,
        max_replicas=max_replicas,
        target_cpu_utilization_pct=utilization,
    )
