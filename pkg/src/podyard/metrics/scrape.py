"""Scrape targets, port remapping, and the scrape loop.

Pods on one node advertise the node's IP, so several exporters can claim
the same ip:port pair. The registry gives every target its own mapped
port: the advertised port is kept when it is still free and no other
target advertises the same pair, otherwise a fresh port is allocated from
a fixed range. The real listening endpoint is tracked separately from the
advertised one, and scraping always talks to the real endpoint.
"""
from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field

import requests

from .exposition import parse_exposition
from .store import MetricStore, StaleSampleError

log = logging.getLogger(__name__)

PORT_RANGE = (20000, 49999)


class PortSpaceExhausted(RuntimeError):
    """No free mapped port remains in the allocation range."""


@dataclass
class ScrapeTarget:
    name: str
    owner_labels: dict[str, str] = field(default_factory=dict)
    advertised_ip: str = ""
    advertised_port: int = 0
    real_host: str = "127.0.0.1"
    real_port: int = 0
    mapped_port: int = 0
    path: str = "/metrics"
    consecutive_failures: int = 0
    last_scrape: float = 0.0

    @property
    def url(self) -> str:
        return f"http://{self.real_host}:{self.real_port}{self.path}"


class TargetRegistry:
    def __init__(self, port_range: tuple[int, int] = PORT_RANGE):
        self._range = port_range
        self._lock = threading.Lock()
        self._targets: dict[str, ScrapeTarget] = {}
        self._used_ports: set[int] = set()

    def register(
        self,
        name: str,
        owner_labels: dict[str, str],
        advertised_ip: str,
        advertised_port: int,
        real_host: str,
        real_port: int,
        path: str = "/metrics",
    ) -> ScrapeTarget:
        with self._lock:
            if name in self._targets:
                raise ValueError(f"target {name!r} already registered")
            mapped = self._pick_port(advertised_ip, advertised_port)
            target = ScrapeTarget(
                name=name,
                owner_labels=dict(owner_labels),
                advertised_ip=advertised_ip,
                advertised_port=advertised_port,
                real_host=real_host,
                real_port=real_port,
                mapped_port=mapped,
                path=path,
            )
            self._targets[name] = target
            self._used_ports.add(mapped)
            if mapped != advertised_port:
                log.info(
                    "target %s advertised %s:%d remapped to port %d",
                    name, advertised_ip, advertised_port, mapped,
                )
            return target

    def _pick_port(self, ip: str, port: int) -> int:
        pair_taken = any(
            t.advertised_ip == ip and t.advertised_port == port for t in self._targets.values()
        )
        if port not in self._used_ports and not pair_taken:
            return port
        lo, hi = self._range
        for candidate in range(lo, hi + 1):
            if candidate not in self._used_ports:
                return candidate
        raise PortSpaceExhausted(f"no free port in {lo}-{hi}")

    def unregister(self, name: str) -> None:
        with self._lock:
            target = self._targets.pop(name, None)
            if target is not None:
                self._used_ports.discard(target.mapped_port)

    def get(self, name: str) -> ScrapeTarget | None:
        with self._lock:
            return self._targets.get(name)

    def by_mapped_port(self, port: int) -> ScrapeTarget | None:
        with self._lock:
            for target in self._targets.values():
                if target.mapped_port == port:
                    return target
        return None

    def targets(self) -> list[ScrapeTarget]:
        with self._lock:
            return list(self._targets.values())


class Scraper:
    """Pulls every registered target on its own absolute-deadline tick.

    Targets are polled independently so one stalled exporter cannot delay
    the rest. Per-tick jitter (at most 10% of the interval) keeps targets
    from drifting into lockstep.
    """

    def __init__(
        self,
        registry: TargetRegistry,
        store: MetricStore,
        interval: float = 5.0,
        jitter: float = 0.1,
        timeout: float = 2.0,
        fetch=None,
        time_source=time.time,
        seed: int | None = None,
    ):
        self.registry = registry
        self.store = store
        self.interval = interval
        self.jitter = min(jitter, 0.1)
        self.timeout = timeout
        self._fetch = fetch or self._http_fetch
        self._time = time_source
        self._rng = random.Random(seed)
        self._stop = threading.Event()
        self._threads: dict[str, threading.Thread] = {}
        self._manager: threading.Thread | None = None

    def _http_fetch(self, target: ScrapeTarget) -> str:
        response = requests.get(target.url, timeout=self.timeout)
        response.raise_for_status()
        return response.text

    def scrape_once(self, target: ScrapeTarget) -> int:
        """Scrape one target now; returns the number of stored samples."""
        try:
            text = self._fetch(target)
            samples = parse_exposition(text)
        except Exception as exc:
            target.consecutive_failures += 1
            log.warning("scrape of %s (%s) failed: %s", target.name, target.url, exc)
            return 0
        ts = self._time()
        stored = 0
        for sample in samples:
            labels = {**sample.labels, **target.owner_labels}
            try:
                self.store.append(sample.name, labels, ts, sample.value)
                stored += 1
            except StaleSampleError:
                pass
        target.consecutive_failures = 0
        target.last_scrape = ts
        return stored

    def start(self):
        self._stop.clear()
        self._manager = threading.Thread(target=self._manage, name="scrape-manager", daemon=True)
        self._manager.start()

    def stop(self):
        self._stop.set()
        if self._manager is not None:
            self._manager.join(timeout=5)
        for thread in list(self._threads.values()):
            thread.join(timeout=5)
        self._threads.clear()

    def _manage(self):
        while not self._stop.is_set():
            for target in self.registry.targets():
                thread = self._threads.get(target.name)
                if thread is None or not thread.is_alive():
                    thread = threading.Thread(
                        target=self._run_target, args=(target.name,),
                        name=f"scrape-{target.name}", daemon=True,
                    )
                    self._threads[target.name] = thread
                    thread.start()
            self._stop.wait(min(1.0, self.interval))

    def _run_target(self, name: str):
        # spread the first tick so targets registered together desynchronize
        deadline = time.time() + self._rng.uniform(0, self.interval)
        while not self._stop.is_set():
            delay = deadline - time.time()
            if delay > 0 and self._stop.wait(delay):
                break
            target = self.registry.get(name)
            if target is None:
                break
            self.scrape_once(target)
            deadline += self.interval * (1 + self._rng.uniform(-self.jitter, self.jitter))
            now = time.time()
            if deadline < now:
                deadline = now
