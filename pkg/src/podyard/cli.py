"""kubectl-style command line client.

Every verb is a thin, stateless client: cluster verbs talk to the control
plane over HTTP, workflow verbs drive a local :class:`~podyard.launcher.Launcher`
store, and ``twin`` runs the queue model in-process.  Identical server state
yields byte-identical output, so tables can be compared as golden files.

Exit codes: 0 success, 1 server/runtime error, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import requests

from .launcher import Launcher, WorkflowError, parse_workflow_file
from .model import ALIVETIME_LABEL, CONTROLS, NODETYPE_LABEL, SITE_LABEL
from .twin import experiment, tables

log = logging.getLogger(__name__)

DEFAULT_SERVER = "127.0.0.1:7080"
DEFAULT_WORKFLOW_STORE = "~/.podyard/workflows.ndjson"

GET_KINDS = ("nodes", "pods", "deployments", "autoscalers", "workflows")
DELETE_KINDS = ("pods", "deployments", "autoscalers", "workflows")


class CliError(Exception):
    """Operator-facing failure; ``code`` becomes the process exit status."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# --- HTTP plumbing ----------------------------------------------------------


def _request(server: str, method: str, path: str, **kwargs) -> requests.Response:
    try:
        return requests.request(method, f"http://{server}{path}", timeout=10, **kwargs)
    except requests.RequestException as exc:
        raise CliError(f"cannot reach server at {server}: {exc}") from exc


def _error_detail(response: requests.Response) -> str:
    try:
        payload = response.json()
    except ValueError:
        return response.text.strip() or f"HTTP {response.status_code}"
    if isinstance(payload, dict) and "error" in payload:
        return str(payload["error"])
    return str(payload)


def _get_json(server: str, path: str, params: dict | None = None) -> dict:
    response = _request(server, "GET", path, params=params)
    if response.status_code != 200:
        raise CliError(_error_detail(response))
    return response.json()


# --- rendering --------------------------------------------------------------


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Fixed-width table; three-space gutters, no trailing whitespace."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = []
    for row in [headers] + rows:
        lines.append("   ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def _emit(args, payload: dict, headers: list[str], rows: list[list[str]]) -> None:
    if args.output == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(render_table(headers, rows))


def _pod_state_uid(pod: dict) -> str:
    """The lifecycle-UID name shown in `get pods`: a failed container wins."""
    containers = pod.get("containers") or []
    for status in containers:
        if status.get("failed"):
            return status.get("get_uid_name") or "-"
    if containers:
        return containers[0].get("get_uid_name") or "-"
    return "-"


def _fmt_num(value) -> str:
    return f"{value:g}"


# --- cluster verbs ----------------------------------------------------------


def cmd_apply(args) -> int:
    try:
        text = Path(args.file).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(str(exc), code=2)
    response = _request(
        args.server, "POST", "/apply",
        data=text.encode("utf-8"), headers={"Content-Type": "application/yaml"},
    )
    if response.status_code == 400:
        # Manifest did not parse; the detail carries the document position.
        raise CliError(_error_detail(response), code=2)
    if response.status_code != 200:
        raise CliError(_error_detail(response))
    failed = False
    for result in response.json()["results"]:
        line = f"{result['kind'].lower()}/{result['name']} {result['result']}"
        if result["result"] == "invalid":
            failed = True
            line += f": {result.get('detail', '')}"
        print(line)
    return 1 if failed else 0


def cmd_get(args) -> int:
    if args.kind == "workflows":
        return cmd_get_wf(args)
    if args.kind == "nodes":
        payload = _get_json(args.server, "/nodes")
        rows = [
            [
                node["name"],
                node["status"],
                node["labels"].get(NODETYPE_LABEL, "-"),
                node["labels"].get(SITE_LABEL, "-"),
                node["labels"].get(ALIVETIME_LABEL, "-"),
            ]
            for node in payload["nodes"]
        ]
        _emit(args, payload, ["NAME", "STATUS", "NODETYPE", "SITE", "ALIVETIME"], rows)
    elif args.kind == "pods":
        payload = _get_json(args.server, "/pods")
        rows = [
            [
                pod["name"],
                pod["node"] or "-",
                "true" if pod["ready"] else "false",
                _pod_state_uid(pod),
            ]
            for pod in payload["pods"]
        ]
        _emit(args, payload, ["NAME", "NODE", "READY", "STATE-UID"], rows)
    elif args.kind == "deployments":
        payload = _get_json(args.server, "/deployments")
        pods = _get_json(args.server, "/pods")["pods"]
        ready = {}
        for pod in pods:
            if pod.get("owner") and pod["ready"]:
                ready[pod["owner"]] = ready.get(pod["owner"], 0) + 1
        rows = [
            [dep["name"], str(dep["replicas"]), str(ready.get(dep["name"], 0))]
            for dep in payload["deployments"]
        ]
        _emit(args, payload, ["NAME", "DESIRED", "READY"], rows)
    else:  # autoscalers
        payload = _get_json(args.server, "/autoscalers")
        rows = [
            [
                hpa["name"],
                hpa["deployment"],
                str(hpa["min_replicas"]),
                str(hpa["max_replicas"]),
                f"{hpa['target_cpu_pct']:g}%",
            ]
            for hpa in payload["autoscalers"]
        ]
        _emit(args, payload, ["NAME", "DEPLOYMENT", "MIN", "MAX", "TARGET-CPU"], rows)
    return 0


def cmd_delete(args) -> int:
    if args.kind == "workflows":
        return cmd_delete_wf(args)
    response = _request(args.server, "DELETE", f"/{args.kind}/{args.name}")
    if response.status_code != 200:
        raise CliError(_error_detail(response))
    print(f"{args.kind.rstrip('s')}/{args.name} deleted")
    return 0


def cmd_logs(args) -> int:
    params = {"stream": "stderr" if args.stderr else "stdout"}
    if args.container:
        params["container"] = args.container
    response = _request(args.server, "GET", f"/pods/{args.pod}/logs", params=params)
    if response.status_code != 200:
        raise CliError(_error_detail(response))
    sys.stdout.write(response.text)
    return 0


def cmd_top(args) -> int:
    payload = _get_json(args.server, "/metrics/query", {"metric": "jiriaf_pod_cpu_usage"})
    rows = []
    for series in payload["series"]:
        labels = series["labels"]
        points = series["points"]
        if not points:
            continue
        rows.append([labels.get("pod", "-"), labels.get("node", "-"), f"{points[-1][1]:.1f}"])
    rows.sort()
    _emit(args, payload, ["POD", "NODE", "CPU%"], rows)
    return 0


# --- workflow verbs ---------------------------------------------------------


def _launcher(args, stagger_s: float | None = None) -> Launcher:
    store = Path(args.workflows).expanduser()
    store.parent.mkdir(parents=True, exist_ok=True)
    kwargs = {} if stagger_s is None else {"stagger_s": stagger_s}
    return Launcher(store, control_plane_address=args.server, **kwargs)


def cmd_add_wf(args) -> int:
    try:
        text = Path(args.file).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(str(exc), code=2)
    try:
        fields = parse_workflow_file(text)
    except WorkflowError as exc:
        raise CliError(str(exc), code=2)  # the file itself does not parse
    try:
        wf_id = _launcher(args, stagger_s=args.stagger).add_wf(fields)
    except WorkflowError as exc:
        raise CliError(str(exc))
    print(f"workflow/{wf_id} created")
    return 0


def cmd_get_wf(args) -> int:
    records = _launcher(args).get_wf()
    rows = [
        [
            wf["id"],
            wf["state"],
            str(wf["nnodes"]),
            wf["nodetype"],
            wf["site"],
            str(wf["walltime"]),
            wf["prefix"],
        ]
        for wf in records
    ]
    _emit(args, {"workflows": records},
          ["ID", "STATE", "NODES", "NODETYPE", "SITE", "WALLTIME", "PREFIX"], rows)
    return 0


def cmd_delete_wf(args) -> int:
    wf_id = getattr(args, "id", None) or args.name
    try:
        outcome = _launcher(args).delete_wf(wf_id)
    except WorkflowError as exc:
        raise CliError(str(exc))
    print(f"workflow/{outcome['id']} deleted ({len(outcome['killed'])} agents stopped)")
    return 0


# --- twin verbs -------------------------------------------------------------


def cmd_twin_run(args) -> int:
    try:
        cfg = experiment.load_config(args.config)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc), code=2)
    if args.horizon is not None:
        cfg = dataclasses.replace(cfg, horizon_t=args.horizon)
    records = experiment.run_experiment(cfg)
    if args.out:
        experiment.write_csv(records, args.out)
        print(f"wrote {len(records)} rows to {args.out}")
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=experiment.CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(dataclasses.asdict(record))
    return 0


def cmd_twin_tables(args) -> int:
    rows = []
    for control in CONTROLS:
        for row in tables.TABLES[control]:
            rows.append([
                str(control),
                str(row.state),
                _fmt_num(row.lambda_hz),
                _fmt_num(row.mu_hz),
                str(row.proc_units),
                _fmt_num(row.obs_lq),
                _fmt_num(row.calc_lq),
            ])
    print(render_table(
        ["CONTROL", "STATE", "LAMBDA", "MU", "PROC", "OBS-LQ", "CALC-LQ"], rows))
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="podyard",
        description="Declarative client for the pod orchestrator.",
    )
    parser.add_argument(
        "--server",
        default=os.environ.get("PODYARD_SERVER", DEFAULT_SERVER),
        help="control-plane address host:port (env PODYARD_SERVER)",
    )
    parser.add_argument(
        "--workflows",
        default=os.environ.get("PODYARD_WORKFLOWS", DEFAULT_WORKFLOW_STORE),
        help="local workflow store path (env PODYARD_WORKFLOWS)",
    )
    parser.add_argument(
        "-o", "--output", choices=("table", "json"), default="table",
        help="output format for get/top verbs",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("apply", help="apply a manifest file")
    p.add_argument("-f", "--file", required=True)
    p.set_defaults(handler=cmd_apply)

    p = sub.add_parser("get", help="list objects of a kind")
    p.add_argument("kind", choices=GET_KINDS)
    p.set_defaults(handler=cmd_get)

    p = sub.add_parser("delete", help="delete one object")
    p.add_argument("kind", choices=DELETE_KINDS)
    p.add_argument("name")
    p.set_defaults(handler=cmd_delete)

    p = sub.add_parser("logs", help="print a container's captured output")
    p.add_argument("pod")
    p.add_argument("-c", "--container", default=None)
    p.add_argument("--stderr", action="store_true", help="show stderr instead of stdout")
    p.set_defaults(handler=cmd_logs)

    p = sub.add_parser("top", help="latest resource usage")
    p.add_argument("resource", choices=("pods",))
    p.set_defaults(handler=cmd_top)

    p = sub.add_parser("add-wf", help="launch a workflow of node agents")
    p.add_argument("-f", "--file", required=True)
    p.add_argument("--stagger", type=float, default=None,
                   help="seconds between agent launches")
    p.set_defaults(handler=cmd_add_wf)

    p = sub.add_parser("get-wf", help="list workflows")
    p.set_defaults(handler=cmd_get_wf)

    p = sub.add_parser("delete-wf", help="stop a workflow's agents")
    p.add_argument("id")
    p.set_defaults(handler=cmd_delete_wf)

    p = sub.add_parser("twin", help="queue digital-twin tools")
    twin_sub = p.add_subparsers(dest="twin_verb", required=True)
    run = twin_sub.add_parser("run", help="run the closed-loop experiment, emit CSV")
    run.add_argument("--config", default=None, help="YAML overrides for the run")
    run.add_argument("--horizon", type=int, default=None, help="number of steps")
    run.add_argument("--out", default=None, help="write CSV here instead of stdout")
    run.set_defaults(handler=cmd_twin_run)
    tab = twin_sub.add_parser("tables", help="print the built-in calibration tables")
    tab.set_defaults(handler=cmd_twin_tables)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except WorkflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
