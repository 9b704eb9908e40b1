"""Latent-variable recommendation from organic sessions and bandit feedback."""
from .bandit import BLOB, BanditHyperPriors
from .organic import BLO, OrganicParams, OrganicSession
from .simulator import GroundTruth, SimConfig

__version__ = "0.1.0"

__all__ = ["BLO", "BLOB", "BanditHyperPriors", "OrganicParams", "OrganicSession", "SimConfig", "GroundTruth"]
