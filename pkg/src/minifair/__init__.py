"""Active-learning data minimization on matrix factorization, with group-fairness tracking."""

from minifair.data import CandidatePool, Group, GroupMap, Interaction, RatingSet, group_partition
from minifair.mf import MfHyperParams, MfModel, predict, rmse, squared_errors, train
from minifair.simulation import SimulationConfig, run

__version__ = "0.1.0"
