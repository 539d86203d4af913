"""Measured operating-regime tables and observation synthesis.

Each control value (16 or 32 worker threads) has five measured rows,
indexed by integer load state 0-4. ``observe`` linearly interpolates the
observed-queue-length column between adjacent rows; ``estimate_control``
inverts that mapping, attributing a raw observation to whichever regime's
observation curve passes closer in log space.

The recorded calc_lq column of the 16-thread regime does not equal the
M/M/1 formula applied to its own rates (for example 162, 167 gives 31.43-
versus the recorded 33.74) while the 32-thread rows agree to rounding.
Both recorded columns are kept verbatim as data; ``formula_residuals``
exposes the gap instead of hiding it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .mm1 import calc_lq

CONTROLS = (16, 32)


@dataclass(frozen=True)
class TableRow:
    state: int
    lambda_hz: float
    mu_hz: float
    proc_units: int
    obs_lq: float
    calc_lq: float


TABLE_16 = (
    TableRow(0, 162.0, 167.0, 16, 32.0, 33.74),
    TableRow(1, 163.0, 167.0, 16, 41.0, 43.48),
    TableRow(2, 164.0, 167.0, 16, 58.0, 60.52),
    TableRow(3, 165.0, 167.0, 16, 97.0, 98.01),
    TableRow(4, 166.0, 167.0, 16, 241.0, 248.00),
)

TABLE_32 = (
    TableRow(0, 162.0, 222.0, 32, 1.56, 1.96),
    TableRow(1, 163.0, 222.0, 32, 2.5, 2.02),
    TableRow(2, 164.0, 222.0, 32, 2.56, 2.08),
    TableRow(3, 165.0, 222.0, 32, 3.5, 2.14),
    TableRow(4, 166.0, 222.0, 32, 3.56, 2.21),
)

TABLES: dict[int, tuple[TableRow, ...]] = {16: TABLE_16, 32: TABLE_32}


def observe(state: float, control: int) -> float:
    """Queue length a load state produces under a control, by interpolation."""
    rows = TABLES[control]
    lo, hi = rows[0].state, rows[-1].state
    if not lo <= state <= hi:
        raise ValueError(f"state {state} outside [{lo}, {hi}]")
    i = min(int(math.floor(state)), hi - 1)
    frac = state - i
    return rows[i].obs_lq + frac * (rows[i + 1].obs_lq - rows[i].obs_lq)


def log_distance(obs_lq: float, control: int) -> float:
    """Smallest |ln obs - ln observe(s, control)| over the state range.

    The observation curve is increasing in the state, so the closest point
    is the observation itself when it falls inside the curve's range and
    the nearer endpoint otherwise.
    """
    if obs_lq <= 0:
        raise ValueError(f"queue length must be positive, got {obs_lq}")
    rows = TABLES[control]
    nearest = min(max(obs_lq, rows[0].obs_lq), rows[-1].obs_lq)
    return abs(math.log(obs_lq) - math.log(nearest))


def estimate_control(obs_lq: float) -> int:
    """Attribute a raw queue-length observation to a control regime.

    Returns the control whose observation curve is nearest in log space;
    16 wins ties.
    """
    d16 = log_distance(obs_lq, 16)
    d32 = log_distance(obs_lq, 32)
    return 32 if d32 < d16 else 16


def formula_residuals(control: int) -> list[tuple[TableRow, float]]:
    """Rows paired with the queue length the M/M/1 formula actually yields."""
    return [(row, calc_lq(row.lambda_hz, row.mu_hz)) for row in TABLES[control]]
