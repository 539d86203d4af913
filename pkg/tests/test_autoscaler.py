"""Tests for the sizing formula, readiness gate, and stabilization window."""
import math
import random
from fractions import Fraction

import pytest

from podyard.autoscaler import (
    HpaState,
    PodCondition,
    PodView,
    ReadinessGateConfig,
    ScaleDecision,
    desired_replicas,
    filter_unready,
    is_unready,
    reconcile_hpa,
)
from podyard.model import AutoscalerSpec


def make_spec(**kwargs):
    defaults = dict(
        name="hpa",
        target_deployment="web",
        min_replicas=1,
        max_replicas=10,
        target_cpu_utilization_pct=30,
    )
    defaults.update(kwargs)
    return AutoscalerSpec(**defaults)


def ready_pod(name, start, transition, status=True):
    return PodView(name, start, [PodCondition("Ready", status, transition)])


# --- formula ----------------------------------------------------------------

def test_desired_replicas_worked_example():
    assert desired_replicas(4, 90, 50) == 8  # ceil(7.2)


def test_desired_replicas_identity_and_half():
    for n in (1, 3, 9):
        for m in (1, 25, 100):
            assert desired_replicas(n, m, m) == n
    assert desired_replicas(1, 30, 60) == 1


def test_desired_replicas_rejects_bad_inputs():
    with pytest.raises(ValueError):
        desired_replicas(0, 50, 50)
    with pytest.raises(ValueError):
        desired_replicas(1, 50, 0)
    with pytest.raises(ValueError):
        desired_replicas(1, -5, 50)


def test_desired_replicas_matches_exact_integer_oracle():
    rng = random.Random(123)
    for _ in range(1000):
        current = rng.randint(1, 40)
        metric = rng.randint(0, 400)
        target = rng.randint(1, 120)
        assert desired_replicas(current, metric, target) == -((-current * metric) // target)


def test_desired_replicas_monotone_and_scale_invariant():
    rng = random.Random(321)
    for _ in range(300):
        current = rng.randint(1, 20)
        target = rng.uniform(1, 100)
        m1 = rng.uniform(0, 200)
        m2 = rng.uniform(0, 200)
        lo, hi = min(m1, m2), max(m1, m2)
        assert desired_replicas(current, lo, target) <= desired_replicas(current, hi, target)
        k = rng.uniform(0.1, 10)
        # scale both by the same exact factor: the rational ratio is unchanged
        ratio = Fraction(current) * Fraction(lo) / Fraction(target)
        scaled = Fraction(current) * (Fraction(lo) * Fraction(k)) / (Fraction(target) * Fraction(k))
        assert math.ceil(ratio) == math.ceil(scaled)


def test_desired_replicas_exact_at_boundaries():
    # exactly divisible ratios must not ceil upward
    assert desired_replicas(3, 100, 50) == 6
    assert desired_replicas(7, 30, 30) == 7
    assert desired_replicas(10, 0, 30) == 0


# --- readiness gate -----------------------------------------------------------

GATE = ReadinessGateConfig(cpu_initialization_period=300, delay_of_initial_readiness=30, metric_window=30)


def test_gate_missing_condition_or_start():
    now = 1000.0
    assert is_unready(PodView("p", 900.0, []), now, now, GATE)
    assert is_unready(PodView("p", None, [PodCondition("Ready", True, 900.0)]), now, now, GATE)


def test_gate_inside_init_period():
    now = 1000.0
    start = now - 60
    # not ready -> excluded regardless of sample age
    assert is_unready(ready_pod("p", start, start, status=False), now, now, GATE)
    # ready but the sample is older than transition+window -> excluded
    assert is_unready(ready_pod("p", start, start + 20), start + 45, now, GATE)
    # ready with a sample past the window -> included
    assert not is_unready(ready_pod("p", start, start), start + 31, now, GATE)
    # missing sample counts as stale
    assert is_unready(ready_pod("p", start, start), None, now, GATE)


def test_gate_after_init_period():
    now = 1000.0
    start = now - 600
    # ready -> included, sample age irrelevant
    assert not is_unready(ready_pod("p", start, start + 5), start + 1, now, GATE)
    # not ready, but readiness flipped long after startup -> included (flapping, not cold)
    assert not is_unready(ready_pod("p", start, start + 200, status=False), now, now, GATE)
    # not ready and never became ready near start -> excluded
    assert is_unready(ready_pod("p", start, start + 10, status=False), now, now, GATE)


def test_gate_era_boundary_is_strict():
    start = 0.0
    cfg = ReadinessGateConfig(cpu_initialization_period=300, delay_of_initial_readiness=30, metric_window=30)
    pod = ready_pod("p", start, start + 10, status=False)
    # inside (now=299.9): unready because not ready
    assert is_unready(pod, 400.0, 299.9, cfg)
    # outside (now=300.0): transition at start+10 is within the 30 s delay -> unready
    assert is_unready(pod, 400.0, 300.0, cfg)
    late_flip = ready_pod("p", start, start + 30, status=False)
    # delay comparison is strict too: transition exactly at start+delay -> ready enough
    assert not is_unready(late_flip, 400.0, 300.0, cfg)


def test_filter_unready_mixed_pods():
    now = 1000.0
    pods = [
        ready_pod("ok", now - 600, now - 590),
        ready_pod("cold", now - 10, now - 10),
        PodView("bare", now - 600, []),
    ]
    metrics = {"ok": (now - 1, 80.0), "cold": (now - 1, 80.0), "bare": (now - 1, 80.0)}
    excluded = filter_unready(pods, metrics, now, GATE)
    assert excluded == {"cold", "bare"}


# --- reconcile ----------------------------------------------------------------

def test_reconcile_upscale_immediate():
    state = HpaState(make_spec(), last_scale_time=0.0)
    now = 1000.0
    pods = [ready_pod("a", now - 600, now - 590)]
    decision = reconcile_hpa(state, 1, pods, {"a": (now - 1, 90.0)}, now)
    assert decision.applied and decision.desired == 3 and decision.reason == "upscale"
    assert state.last_scale_time == now


def test_reconcile_downscale_waits_for_window():
    state = HpaState(make_spec(), last_scale_time=990.0, stabilization_window=300.0)
    now = 1000.0
    pods = [ready_pod(f"p{i}", now - 600, now - 590) for i in range(3)]
    metrics = {p.name: (now - 1, 10.0) for p in pods}
    held = reconcile_hpa(state, 3, pods, metrics, now)
    assert not held.applied and held.reason == "stabilization-window" and held.desired == 1
    assert state.last_scale_time == 990.0

    later = 990.0 + 300.0
    applied = reconcile_hpa(state, 3, pods, metrics, later)
    assert applied.applied and applied.reason == "downscale" and applied.desired == 1
    assert state.last_scale_time == later


def test_reconcile_stable_at_target():
    state = HpaState(make_spec(), last_scale_time=0.0)
    now = 1000.0
    pods = [ready_pod("a", now - 600, now - 590)]
    decision = reconcile_hpa(state, 2, pods, {"a": (now - 1, 30.0)}, now)
    assert not decision.applied and decision.reason == "stable"


def test_reconcile_no_usable_samples():
    state = HpaState(make_spec(), last_scale_time=0.0)
    now = 1000.0
    pods = [ready_pod("cold", now - 5, now - 5)]
    decision = reconcile_hpa(state, 2, pods, {"cold": (now - 1, 500.0)}, now)
    assert not decision.applied and decision.reason == "no-usable-samples"
    assert decision.desired == 2


def test_reconcile_clamps_to_bounds():
    state = HpaState(make_spec(max_replicas=4), last_scale_time=0.0)
    now = 1000.0
    pods = [ready_pod("a", now - 600, now - 590)]
    decision = reconcile_hpa(state, 2, pods, {"a": (now - 1, 1000.0)}, now)
    assert decision.desired == 4
    low = HpaState(make_spec(min_replicas=2), last_scale_time=0.0, stabilization_window=0.0)
    decision = reconcile_hpa(low, 3, pods, {"a": (now - 1, 0.0)}, now)
    assert decision.desired == 2


def test_reconcile_mean_over_included_pods_only():
    state = HpaState(make_spec(), last_scale_time=0.0)
    now = 1000.0
    pods = [
        ready_pod("hot", now - 600, now - 590),
        ready_pod("cold-booting", now - 5, now - 5),
    ]
    metrics = {"hot": (now - 1, 60.0), "cold-booting": (now - 1, 100000.0)}
    decision = reconcile_hpa(state, 1, pods, metrics, now)
    # mean must be 60 (only the warmed-up pod), so desired is 2, not thousands
    assert decision.desired == 2


def test_no_two_downscales_within_window_over_trace():
    """Simulated decreasing load: applied downscales are spaced by the window."""
    state = HpaState(make_spec(), last_scale_time=0.0, stabilization_window=60.0)
    current = 8
    pods = [ready_pod("a", -1000, -990)]
    applied_times = []
    for tick in range(0, 400, 5):
        now = float(tick)
        decision = reconcile_hpa(state, current, pods, {"a": (now, 5.0)}, now)
        if decision.applied:
            current = decision.desired
            if decision.reason == "downscale":
                applied_times.append(now)
    assert applied_times, "load trace never downscaled"
    for a, b in zip(applied_times, applied_times[1:]):
        assert b - a >= 60.0
    assert current == 1
