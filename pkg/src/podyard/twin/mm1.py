"""M/M/1 queue math."""
from __future__ import annotations


class QueueUnstableError(ValueError):
    """Arrival rate at or above service rate: the queue diverges."""


def calc_lq(lambda_hz: float, mu_hz: float) -> float:
    """Expected queue length of an M/M/1 queue: lambda^2 / (mu * (mu - lambda)).

    Requires 0 <= lambda_hz < mu_hz.
    """
    if lambda_hz < 0:
        raise ValueError(f"arrival rate must be nonnegative, got {lambda_hz}")
    if mu_hz <= 0:
        raise ValueError(f"service rate must be positive, got {mu_hz}")
    if lambda_hz >= mu_hz:
        raise QueueUnstableError(
            f"arrival rate {lambda_hz} >= service rate {mu_hz}: queue length diverges"
        )
    return lambda_hz * lambda_hz / (mu_hz * (mu_hz - lambda_hz))
