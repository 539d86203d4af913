"""Tests for exposition parsing, the series store, and scrape plumbing."""
import random
import string

import pytest

from podyard.metrics import (
    MetricStore,
    PortSpaceExhausted,
    Sample,
    Scraper,
    ScrapeTarget,
    TargetRegistry,
    parse_exposition,
    render_exposition,
    series_key,
)
from podyard.metrics.exposition import ExpositionError
from podyard.metrics.store import StaleSampleError


# --- exposition ---------------------------------------------------------

def test_render_and_parse_basic():
    text = render_exposition(
        [
            Sample("jiriaf_pod_cpu_usage", {"pod": "web-1", "node": "vk-00"}, 42.5),
            Sample("jiriaf_node_alivetime", {}, 120.0),
        ]
    )
    assert 'jiriaf_pod_cpu_usage{node="vk-00",pod="web-1"} 42.5' in text
    assert "jiriaf_node_alivetime 120.0" in text
    parsed = parse_exposition(text)
    assert parsed[0].labels == {"pod": "web-1", "node": "vk-00"}
    assert parsed[1].value == 120.0


def test_parse_skips_comments_and_blanks():
    text = "# HELP something\n\nup 1\n"
    (sample,) = parse_exposition(text)
    assert sample.name == "up"


def test_parse_rejects_garbage():
    with pytest.raises(ExpositionError, match="line 1"):
        parse_exposition("}{ nonsense\n")
    with pytest.raises(ExpositionError, match="bad value"):
        parse_exposition("up one\n")


def test_exposition_round_trip_random():
    rng = random.Random(99)
    alphabet = string.ascii_lowercase + string.digits
    for _ in range(100):
        samples = []
        for _ in range(rng.randint(1, 5)):
            labels = {
                "".join(rng.choices(string.ascii_lowercase, k=3)): (
                    "".join(rng.choices(alphabet, k=4)) + rng.choice(["", '"q"', "\\x", "a\nb"])
                )
                for _ in range(rng.randint(0, 3))
            }
            samples.append(
                Sample(
                    name="m_" + "".join(rng.choices(string.ascii_lowercase, k=5)),
                    labels=labels,
                    value=round(rng.uniform(-1e6, 1e6), 3),
                )
            )
        parsed = parse_exposition(render_exposition(samples))
        assert [(s.name, s.labels, s.value) for s in parsed] == [
            (s.name, s.labels, s.value) for s in samples
        ]


# --- store ---------------------------------------------------------------

def test_store_strictly_increasing():
    store = MetricStore()
    store.append("m", {"a": "1"}, 10.0, 1.0)
    store.append("m", {"a": "1"}, 11.0, 2.0)
    with pytest.raises(StaleSampleError):
        store.append("m", {"a": "1"}, 11.0, 3.0)
    with pytest.raises(StaleSampleError):
        store.append("m", {"a": "1"}, 9.0, 3.0)
    # a different label set is a different series and unaffected
    store.append("m", {"a": "2"}, 5.0, 7.0)


def test_store_window_caps_points():
    store = MetricStore(window=100)
    for i in range(250):
        store.append("m", {}, float(i), float(i))
    points = store.query_range("m", None, 0.0, 1e9)[series_key("m", {})]
    assert len(points) == 100
    assert points[0] == (150.0, 150.0)
    assert points[-1] == (249.0, 249.0)


def test_store_latest_and_filter():
    store = MetricStore()
    store.append("cpu", {"pod": "a", "node": "n1"}, 1.0, 10.0)
    store.append("cpu", {"pod": "b", "node": "n1"}, 1.0, 20.0)
    store.append("cpu", {"pod": "a", "node": "n1"}, 2.0, 30.0)
    latest = store.latest("cpu", {"pod": "a"})
    assert list(latest.values()) == [(2.0, 30.0)]
    assert len(store.latest("cpu")) == 2
    assert store.latest("cpu", {"node": "nope"}) == {}


def test_store_query_range_half_open():
    store = MetricStore()
    for i in range(5):
        store.append("m", {}, float(i), float(i * i))
    window = store.query_range("m", None, 1.0, 3.0)[series_key("m", {})]
    assert window == [(1.0, 1.0), (2.0, 4.0)]


def test_store_persistence_replay(tmp_path):
    store = MetricStore(tmp_path)
    store.append("m", {"pod": "x"}, 100.0, 1.5)
    store.append("m", {"pod": "x"}, 101.0, 2.5)
    # crossing a UTC day boundary rolls to a second file
    store.append("m", {"pod": "x"}, 100.0 + 86400.0, 3.5)
    store.close()
    assert len(list(tmp_path.glob("metrics-*.ndjson"))) == 2

    reopened = MetricStore(tmp_path)
    points = reopened.query_range("m", {"pod": "x"}, 0.0, 1e9)[series_key("m", {"pod": "x"})]
    assert points == [(100.0, 1.5), (101.0, 2.5), (86500.0, 3.5)]
    # appends continue past the replayed history
    reopened.append("m", {"pod": "x"}, 86501.0, 4.5)
    with pytest.raises(StaleSampleError):
        reopened.append("m", {"pod": "x"}, 50.0, 9.9)
    reopened.close()


# --- target registry -------------------------------------------------------

def test_registry_identity_mapping_when_free():
    reg = TargetRegistry()
    target = reg.register("pod-a", {"pod": "pod-a"}, "10.0.0.5", 8000, "127.0.0.1", 34001)
    assert target.mapped_port == 8000
    assert target.url == "http://127.0.0.1:34001/metrics"


def test_registry_remaps_shared_pair():
    reg = TargetRegistry()
    first = reg.register("pod-a", {"pod": "pod-a"}, "10.0.0.5", 8000, "127.0.0.1", 34001)
    second = reg.register("pod-b", {"pod": "pod-b"}, "10.0.0.5", 8000, "127.0.0.1", 34002)
    assert first.mapped_port == 8000
    assert 20000 <= second.mapped_port <= 49999
    assert second.mapped_port != first.mapped_port
    third = reg.register("pod-c", {"pod": "pod-c"}, "10.0.0.5", 8000, "127.0.0.1", 34003)
    assert len({first.mapped_port, second.mapped_port, third.mapped_port}) == 3


def test_registry_remaps_port_collision_across_ips():
    reg = TargetRegistry()
    reg.register("a", {}, "10.0.0.5", 25000, "127.0.0.1", 1)
    moved = reg.register("b", {}, "10.0.0.6", 25000, "127.0.0.1", 2)
    assert moved.mapped_port != 25000


def test_registry_unregister_frees_port():
    reg = TargetRegistry(port_range=(20000, 20001))
    reg.register("a", {}, "ip", 9999, "h", 1)  # identity, outside the range
    b = reg.register("b", {}, "ip", 9999, "h", 2)  # collision -> 20000
    reg.register("c", {}, "ip", 9999, "h", 3)  # collision -> 20001
    assert b.mapped_port == 20000
    with pytest.raises(PortSpaceExhausted):
        reg.register("d", {}, "ip", 9999, "h", 4)
    reg.unregister("b")
    revived = reg.register("d", {}, "ip", 9999, "h", 4)
    assert revived.mapped_port == 20000
    assert reg.by_mapped_port(20000).name == "d"


def test_registry_duplicate_name_rejected():
    reg = TargetRegistry()
    reg.register("a", {}, "ip", 1, "h", 1)
    with pytest.raises(ValueError):
        reg.register("a", {}, "ip", 2, "h", 2)


def test_registry_mapped_ports_always_unique_property():
    rng = random.Random(5)
    reg = TargetRegistry(port_range=(20000, 20100))
    live = {}
    for step in range(300):
        if live and rng.random() < 0.4:
            name = rng.choice(sorted(live))
            reg.unregister(name)
            del live[name]
        else:
            name = f"t{step}"
            try:
                target = reg.register(
                    name, {}, f"10.0.0.{rng.randint(1, 3)}", rng.choice([8000, 8001, 25000]),
                    "127.0.0.1", step,
                )
            except PortSpaceExhausted:
                continue
            live[name] = target.mapped_port
        ports = [t.mapped_port for t in reg.targets()]
        assert len(ports) == len(set(ports))


# --- scraper ----------------------------------------------------------------

def test_scrape_once_applies_owner_labels():
    reg = TargetRegistry()
    store = MetricStore()
    target = reg.register("pod-a", {"pod": "pod-a", "node": "vk-00"}, "ip", 8000, "h", 1)
    payload = 'jiriaf_pod_cpu_usage{pod="impostor",core="0"} 55\n'
    clock = iter([100.0, 101.0])
    scraper = Scraper(reg, store, fetch=lambda t: payload, time_source=lambda: next(clock))
    assert scraper.scrape_once(target) == 1
    ((key, (ts, value)),) = store.latest("jiriaf_pod_cpu_usage").items()
    labels = dict(key[1])
    assert labels["pod"] == "pod-a"  # owner identity wins over what the exporter claims
    assert labels["node"] == "vk-00"
    assert labels["core"] == "0"
    assert (ts, value) == (100.0, 55.0)


def test_scrape_once_failure_counts():
    reg = TargetRegistry()
    store = MetricStore()
    target = reg.register("pod-a", {}, "ip", 8000, "h", 1)

    def boom(_):
        raise ConnectionError("refused")

    scraper = Scraper(reg, store, fetch=boom)
    assert scraper.scrape_once(target) == 0
    assert scraper.scrape_once(target) == 0
    assert target.consecutive_failures == 2
    scraper._fetch = lambda t: "up 1\n"
    assert scraper.scrape_once(target) == 1
    assert target.consecutive_failures == 0


def test_scraper_loop_polls_independently():
    reg = TargetRegistry()
    store = MetricStore()
    reg.register("good", {"pod": "good"}, "ip", 8000, "h", 1)
    reg.register("bad", {"pod": "bad"}, "ip", 8000, "h", 2)

    def fetch(target):
        if target.name == "bad":
            raise ConnectionError("down")
        return "up 1\n"

    scraper = Scraper(reg, store, interval=0.05, fetch=fetch, seed=1)
    scraper.start()
    try:
        import time

        deadline = time.time() + 5
        while time.time() < deadline:
            points = store.query_range("up", {"pod": "good"}, 0, 1e12)
            if points and len(next(iter(points.values()))) >= 3:
                break
            time.sleep(0.02)
        else:
            pytest.fail("good target never accumulated samples")
    finally:
        scraper.stop()
    assert reg.get("bad").consecutive_failures > 0
