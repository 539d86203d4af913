"""Digital twin of a FIFO stream-processing queue.

Combines M/M/1 queue math, two measured thread-count operating regimes,
a discrete-grid Bayesian filter over the hidden load state, and a
threshold policy that recommends switching between 16 and 32 worker
threads. The experiment runner closes the loop: each step's recommended
control becomes the next step's physical control.
"""

from .mm1 import QueueUnstableError, calc_lq
from .tables import CONTROLS, TABLES, TableRow, estimate_control, observe
from .filtering import Belief, TwinConfig, posterior_mean, predict, correct, recommend_control, uniform_belief
from .experiment import StepRecord, ground_truth_step, load_config, run_experiment, write_csv

__all__ = [
    "QueueUnstableError",
    "calc_lq",
    "CONTROLS",
    "TABLES",
    "TableRow",
    "estimate_control",
    "observe",
    "Belief",
    "TwinConfig",
    "posterior_mean",
    "predict",
    "correct",
    "recommend_control",
    "uniform_belief",
    "StepRecord",
    "ground_truth_step",
    "load_config",
    "run_experiment",
    "write_csv",
]
