"""Streaming Bayesian clustering with sequential Monte Carlo over factorised particle sets."""

from .core import Cluster, CrpPrior, Partition, ewens_log_posterior, exact_posterior
from .metrics import bcubed
from .models import DirichletBigramModel, LikelihoodCache, NigGaussianModel, UnitModel
from .smc import ParticleSet, run_smc
from .splitsmc import FactorisedState, run_split_smc

__all__ = [
    "Cluster",
    "CrpPrior",
    "DirichletBigramModel",
    "FactorisedState",
    "LikelihoodCache",
    "NigGaussianModel",
    "ParticleSet",
    "Partition",
    "UnitModel",
    "bcubed",
    "ewens_log_posterior",
    "exact_posterior",
    "run_smc",
    "run_split_smc",
]
