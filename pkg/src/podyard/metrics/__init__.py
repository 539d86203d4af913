"""Metrics: text exposition, time-series storage, and endpoint scraping."""

from .exposition import Sample, parse_exposition, render_exposition

POD_CPU_METRIC = "jiriaf_pod_cpu_usage"
NODE_ALIVETIME_METRIC = "jiriaf_node_alivetime"
from .store import MetricStore, SeriesKey, series_key
from .scrape import ScrapeTarget, Scraper, TargetRegistry, PortSpaceExhausted

__all__ = [
    "Sample",
    "parse_exposition",
    "render_exposition",
    "MetricStore",
    "SeriesKey",
    "series_key",
    "ScrapeTarget",
    "Scraper",
    "TargetRegistry",
    "PortSpaceExhausted",
]
