"""Discrete-grid Bayesian filtering over the hidden load state.

The hidden state lives on a fixed grid (0.0 to 4.0 in steps of 0.2 by
default). Prediction applies a lazy random walk whose moves span exactly
the ground-truth step of 0.4; moves that would leave the grid are
cancelled, so the kernel is doubly stochastic and a uniform belief is
stationary. Correction multiplies by a Gaussian likelihood in log queue
length and renormalizes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tables import observe

STATE_DELTA = 0.4


def default_grid() -> tuple[float, ...]:
    return tuple(round(0.2 * i, 10) for i in range(21))


@dataclass
class TwinConfig:
    state_grid: tuple[float, ...] = field(default_factory=default_grid)
    obs_sigma: float = 0.1
    transition_probs: tuple[float, float, float] = (0.25, 0.5, 0.25)
    control_threshold: float = 2.5
    horizon_t: int = 80
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def grid_step(self) -> float:
        return self.state_grid[1] - self.state_grid[0]

    @property
    def move_cells(self) -> int:
        return round(STATE_DELTA / self.grid_step)


def validate_config(cfg: TwinConfig) -> list[str]:
    violations = []
    grid = cfg.state_grid
    if len(grid) < 2:
        violations.append("state_grid needs at least two points")
        return violations
    steps = [round(b - a, 9) for a, b in zip(grid, grid[1:])]
    if any(s <= 0 for s in steps):
        violations.append("state_grid must be strictly increasing")
    if len(set(steps)) > 1:
        violations.append("state_grid must be evenly spaced")
    if abs(sum(cfg.transition_probs) - 1.0) > 1e-9:
        violations.append("transition_probs must sum to 1")
    if any(p < 0 for p in cfg.transition_probs):
        violations.append("transition_probs must be nonnegative")
    step = steps[0]
    if step > 0 and abs(STATE_DELTA / step - round(STATE_DELTA / step)) > 1e-9:
        violations.append(f"grid step {step} must divide the state move {STATE_DELTA}")
    if cfg.obs_sigma <= 0:
        violations.append("obs_sigma must be positive")
    if cfg.horizon_t < 0:
        violations.append("horizon_t must be nonnegative")
    if cfg.noise_sigma < 0:
        violations.append("noise_sigma must be nonnegative")
    return violations


@dataclass
class Belief:
    """Probability weights aligned to a state grid."""

    grid: tuple[float, ...]
    weights: np.ndarray

    def normalized(self) -> "Belief":
        total = float(self.weights.sum())
        if total <= 0:
            raise ValueError("belief has no mass")
        return Belief(self.grid, self.weights / total)


def uniform_belief(cfg: TwinConfig) -> Belief:
    n = len(cfg.state_grid)
    return Belief(tuple(cfg.state_grid), np.full(n, 1.0 / n))


def point_belief(cfg: TwinConfig, state: float) -> Belief:
    weights = np.zeros(len(cfg.state_grid))
    index = min(range(len(cfg.state_grid)), key=lambda i: abs(cfg.state_grid[i] - state))
    weights[index] = 1.0
    return Belief(tuple(cfg.state_grid), weights)


def posterior_mean(belief: Belief) -> float:
    return float(np.dot(np.asarray(belief.grid), belief.weights))


def predict(belief: Belief, cfg: TwinConfig) -> Belief:
    """One transition step: stay, or move one state delta up or down.

    A move that would land outside the grid is cancelled (the mass stays
    where it is), which keeps the kernel doubly stochastic.
    """
    p_dec, p_stay, p_inc = cfg.transition_probs
    shift = cfg.move_cells
    w = belief.weights
    out = p_stay * w.copy()
    out[:-shift] += p_dec * w[shift:]
    out[:shift] += p_dec * w[:shift]
    out[shift:] += p_inc * w[:-shift]
    out[-shift:] += p_inc * w[-shift:]
    return Belief(belief.grid, out).normalized()


def likelihood(cfg: TwinConfig, obs_lq: float, control: int) -> np.ndarray:
    """Gaussian likelihood in log queue length, up to a constant factor.

    The squared residuals are shifted by their minimum before
    exponentiating so the best grid state always gets weight 1.0; the
    constant cancels on normalization and keeps extreme observations from
    underflowing the whole vector to zero.
    """
    if obs_lq <= 0:
        raise ValueError(f"queue length must be positive, got {obs_lq}")
    log_obs = math.log(obs_lq)
    expected = np.array([observe(s, control) for s in cfg.state_grid])
    z2 = ((log_obs - np.log(expected)) / cfg.obs_sigma) ** 2
    return np.exp(-0.5 * (z2 - z2.min()))


def correct(belief: Belief, obs_lq: float, control: int, cfg: TwinConfig) -> Belief:
    """Bayes update with a Gaussian likelihood in log queue length.

    If the posterior underflows to zero everywhere (prior and likelihood
    with disjoint support), fall back to the likelihood alone.
    """
    like = likelihood(cfg, obs_lq, control)
    post = belief.weights * like
    if float(post.sum()) <= 0.0:
        post = like
    return Belief(belief.grid, post).normalized()


def recommend_control(belief: Belief, cfg: TwinConfig) -> int:
    return 32 if posterior_mean(belief) >= cfg.control_threshold else 16
