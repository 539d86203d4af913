"""Closed-loop control experiment.

Each step advances a scripted ground-truth load state, observes the queue
under the currently applied thread count, filters the observation into a
belief, and records two control signals: one estimated directly from the
raw observation and one recommended from the filtered belief. The
recommendation becomes the next step's physical control.
"""
from __future__ import annotations

import csv
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .filtering import (
    Belief,
    TwinConfig,
    correct,
    posterior_mean,
    predict,
    recommend_control,
    uniform_belief,
    validate_config,
)
from .tables import estimate_control, observe

STATE_MIN = 0.0
STATE_MAX = 4.0

CSV_COLUMNS = (
    "t",
    "true_state",
    "physical_control",
    "obs_lq",
    "posterior_mean",
    "estimated_control",
    "predicted_control",
)


@dataclass
class StepRecord:
    t: int
    true_state: float
    physical_control: int
    obs_lq: float
    posterior_mean: float
    estimated_control: int
    predicted_control: int


def ground_truth_step(t: int, state: float) -> float:
    """Scripted load trajectory: two ramps up and two ramps down.

    Rises by 0.4 per step for t < 10 and 40 <= t < 50, falls by 0.4 for
    20 <= t < 30 and 60 <= t < 70, and holds otherwise; always clamped to
    the [0, 4] state range.
    """
    if t < 10 or 40 <= t < 50:
        delta = 0.4
    elif 20 <= t < 30 or 60 <= t < 70:
        delta = -0.4
    else:
        delta = 0.0
    return round(min(STATE_MAX, max(STATE_MIN, state + delta)), 12)


def run_experiment(
    cfg: TwinConfig,
    observation_source=None,
    initial_state: float = 0.0,
    initial_control: int = 16,
    ground_truth=ground_truth_step,
) -> list[StepRecord]:
    """Run the closed loop for cfg.horizon_t steps.

    ``observation_source(t, control)``, when given, replaces the synthetic
    table observation — for example to consume a live metric series.
    """
    problems = validate_config(cfg)
    if problems:
        raise ValueError("; ".join(problems))
    rng = random.Random(cfg.seed)
    belief: Belief = uniform_belief(cfg)
    true_state = initial_state
    predicted = initial_control
    records = []
    for t in range(cfg.horizon_t):
        true_state = ground_truth(t, true_state)
        physical = predicted
        if observation_source is not None:
            obs = float(observation_source(t, physical))
        else:
            obs = observe(true_state, physical)
            if cfg.noise_sigma > 0:
                obs *= math.exp(rng.gauss(0.0, cfg.noise_sigma))
        belief = correct(predict(belief, cfg), obs, physical, cfg)
        estimated = estimate_control(obs)
        predicted = recommend_control(belief, cfg)
        records.append(
            StepRecord(
                t=t,
                true_state=true_state,
                physical_control=physical,
                obs_lq=round(obs, 6),
                posterior_mean=round(posterior_mean(belief), 6),
                estimated_control=estimated,
                predicted_control=predicted,
            )
        )
    return records


def write_csv(records: list[StepRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(asdict(record))


def read_csv(path: str | Path) -> list[StepRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                StepRecord(
                    t=int(row["t"]),
                    true_state=float(row["true_state"]),
                    physical_control=int(row["physical_control"]),
                    obs_lq=float(row["obs_lq"]),
                    posterior_mean=float(row["posterior_mean"]),
                    estimated_control=int(row["estimated_control"]),
                    predicted_control=int(row["predicted_control"]),
                )
            )
    return records


def load_config(path: str | Path | None) -> TwinConfig:
    """Load a config file whose keys mirror TwinConfig field names."""
    if path is None:
        return TwinConfig()
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError("twin config must be a mapping")
    known = set(TwinConfig.__dataclass_fields__)
    kwargs = {}
    for key, value in raw.items():
        field_name = key.lower()
        if field_name not in known:
            raise ValueError(f"unknown twin config key {key!r}")
        if field_name == "state_grid":
            value = tuple(float(v) for v in value)
        elif field_name == "transition_probs":
            value = tuple(float(v) for v in value)
        kwargs[field_name] = value
    return TwinConfig(**kwargs)
