"""Launcher: walltime offset, naming, lifecycle, persistence."""
import time

import pytest
import requests

from podyard.controlplane import ControlPlane
from podyard.launcher import (
    Launcher,
    WorkflowError,
    WorkflowSpec,
    agent_walltime,
    parse_walltime,
    parse_workflow_file,
)


def test_agent_walltime_offset():
    assert agent_walltime(300) == 240
    assert agent_walltime(0) == 0
    assert agent_walltime(61) == 1
    assert agent_walltime(60) == 0  # clamp, not negative


def test_parse_walltime_formats():
    assert parse_walltime("300") == 300
    assert parse_walltime("00:05:00") == 300
    assert parse_walltime("01:02:03") == 3723
    with pytest.raises(ValueError):
        parse_walltime("5:00")
    with pytest.raises(ValueError):
        parse_walltime("soon")


def test_parse_workflow_file():
    text = "# perlmutter-ish\nnnodes=2\nnodetype=cpu\nwalltime=00:05:00\nnodename=vk-test\nsite=local\n"
    fields = parse_workflow_file(text)
    assert fields == {
        "nnodes": "2", "nodetype": "cpu", "walltime": "00:05:00",
        "nodename": "vk-test", "site": "local",
    }
    with pytest.raises(WorkflowError, match="key=value"):
        parse_workflow_file("nnodes 2")
    with pytest.raises(WorkflowError, match="unknown field"):
        parse_workflow_file("qos=debug")


def test_node_names_are_zero_padded():
    spec = WorkflowSpec(id="wf-1", nnodes=2, nodetype="cpu", site="x",
                        job_walltime_s=0, nodename_prefix="vk-nersc")
    assert spec.node_names() == ["vk-nersc-01", "vk-nersc-02"]
    wide = WorkflowSpec(id="wf-2", nnodes=100, nodetype="cpu", site="x",
                        job_walltime_s=0, nodename_prefix="n")
    names = wide.node_names()
    assert names[0] == "n-001"
    assert names[-1] == "n-100"
    assert len(set(names)) == 100


def test_spec_validation():
    bad = WorkflowSpec(id="wf-1", nnodes=0, nodetype="cpu", site="x",
                       job_walltime_s=30, nodename_prefix="Bad_Prefix")
    problems = bad.validate()
    assert len(problems) == 3


def fast_launcher(tmp_path, **kwargs):
    kwargs.setdefault("stagger_s", 0.0)
    return Launcher(tmp_path / "workflows.ndjson", work_root=tmp_path / "wf", **kwargs)


def test_add_get_delete_lifecycle(tmp_path):
    launcher = fast_launcher(tmp_path)
    try:
        wf_id = launcher.add_wf({"nnodes": "2", "walltime": "0", "nodename": "pool"})
        assert wf_id == "wf-1"
        (record,) = launcher.get_wf()
        assert record["state"] == "running"
        assert [h["node"] for h in record["handles"]] == ["pool-01", "pool-02"]
        # Both agent processes are actually alive.
        for handle in record["handles"]:
            assert launcher._pgid_alive(handle["pid"])

        result = launcher.delete_wf(wf_id)
        assert sorted(result["killed"]) == ["pool-01", "pool-02"]
        (record,) = launcher.get_wf()
        assert record["state"] == "deleted"
        with pytest.raises(WorkflowError, match="already deleted"):
            launcher.delete_wf(wf_id)
        with pytest.raises(WorkflowError, match="not found"):
            launcher.delete_wf("wf-99")
    finally:
        for record in launcher.get_wf():
            if record["state"] == "running":
                launcher.delete_wf(record["id"])
        launcher.close()


def test_short_walltime_workflow_completes(tmp_path):
    launcher = fast_launcher(tmp_path)
    try:
        launcher.add_wf({"nnodes": "1", "walltime": "63", "nodename": "brief"})
        # Agents get walltime 63-60=3s; after expiry the record flips on poll.
        deadline = time.time() + 15
        while time.time() < deadline:
            (record,) = launcher.get_wf()
            if record["state"] == "completed":
                break
            time.sleep(0.3)
        assert record["state"] == "completed"
        # Deleting a completed workflow acks without touching processes.
        assert launcher.delete_wf("wf-1")["killed"] == []
    finally:
        launcher.close()


def test_name_collision_across_running_workflows(tmp_path):
    launcher = fast_launcher(tmp_path)
    try:
        launcher.add_wf({"nnodes": "1", "walltime": "0", "nodename": "same"})
        with pytest.raises(WorkflowError, match="already in use"):
            launcher.add_wf({"nnodes": "1", "walltime": "0", "nodename": "same"})
        launcher.delete_wf("wf-1")
        assert launcher.add_wf({"nnodes": "1", "walltime": "0", "nodename": "same"}) == "wf-2"
        launcher.delete_wf("wf-2")
    finally:
        launcher.close()


def test_spawn_failure_marks_workflow_failed(tmp_path):
    launcher = fast_launcher(tmp_path, python="/no/such/interpreter")
    wf_id = launcher.add_wf({"nnodes": "2", "walltime": "0", "nodename": "ghost"})
    (record,) = launcher.get_wf()
    assert record["id"] == wf_id
    assert record["state"] == "failed"
    assert "ghost-01" in record["detail"]
    launcher.close()


def test_store_survives_restart(tmp_path):
    launcher = fast_launcher(tmp_path)
    launcher.add_wf({"nnodes": "1", "walltime": "0", "nodename": "keeper"})
    before = launcher.get_wf()
    launcher.close()

    reloaded = fast_launcher(tmp_path)
    try:
        after = reloaded.get_wf()
        assert after == before
        # Ordinals continue past reloaded history and the old name is taken.
        with pytest.raises(WorkflowError, match="already in use"):
            reloaded.add_wf({"nnodes": "1", "walltime": "0", "nodename": "keeper"})
        assert reloaded.add_wf({"nnodes": "1", "walltime": "0", "nodename": "other"}) == "wf-2"
    finally:
        for record in reloaded.get_wf():
            if record["state"] == "running":
                reloaded.delete_wf(record["id"])
        reloaded.close()


def test_workflow_agents_join_control_plane(tmp_path):
    cp = ControlPlane(port=0, reconcile_interval=0.5, hpa_interval=3600)
    cp.start()
    launcher = fast_launcher(tmp_path, control_plane_address=cp.address)
    try:
        launcher.add_wf({"nnodes": "2", "walltime": "120", "nodename": "joiner", "site": "here"})
        url = f"http://{cp.address}/nodes"

        def nodes():
            return {n["name"]: n for n in requests.get(url, timeout=5).json()["nodes"]}

        deadline = time.time() + 15
        while time.time() < deadline:
            seen = nodes()
            if {"joiner-01", "joiner-02"} <= set(seen) and all(
                n["status"] == "Ready" for n in seen.values()
            ):
                break
            time.sleep(0.3)
        seen = nodes()
        assert set(seen) == {"joiner-01", "joiner-02"}
        # Agent walltime = 120-60: the advertised alivetime starts at 60.
        for node in seen.values():
            assert node["status"] == "Ready"
            assert node["labels"]["jiriaf.site"] == "here"
            assert 50 <= int(node["labels"]["jiriaf.alivetime"]) <= 60

        launcher.delete_wf("wf-1")
        deadline = time.time() + 15
        while time.time() < deadline:
            if all(n["status"] == "NotReady" for n in nodes().values()):
                break
            time.sleep(0.3)
        assert all(n["status"] == "NotReady" for n in nodes().values())
    finally:
        for record in launcher.get_wf():
            if record["state"] == "running":
                launcher.delete_wf(record["id"])
        launcher.close()
        cp.stop()
