"""Organic session model: bounds, variational EM and the BLO estimator."""
from .bounds import (
    elbo_bouchard,
    elbo_bouchard_negsampled,
    elbo_logconcave,
    elbo_reparam,
    kl_standard_normal,
    log_likelihood,
    optimal_a,
    optimal_phi,
    optimal_xi,
)
from .em import OnlineEMState, em_batch, em_cycle, infer_posterior, next_item_probs, online_em, online_em_step
from .model import BLO, OrganicTrainConfig, fit_vae, model_from_dict, model_to_dict, sessions_to_counts
from .types import (
    BouchardState,
    DiagGaussianPosterior,
    FullGaussianPosterior,
    LinearEncoder,
    OrganicParams,
    OrganicSession,
)

__all__ = [
    "BLO", "OrganicTrainConfig", "fit_vae", "model_to_dict", "model_from_dict", "sessions_to_counts",
    "elbo_reparam", "elbo_bouchard", "elbo_bouchard_negsampled", "elbo_logconcave", "kl_standard_normal",
    "log_likelihood", "optimal_a", "optimal_xi", "optimal_phi",
    "em_cycle", "em_batch", "OnlineEMState", "online_em_step", "online_em", "infer_posterior", "next_item_probs",
    "OrganicParams", "OrganicSession", "DiagGaussianPosterior", "FullGaussianPosterior", "BouchardState",
    "LinearEncoder",
]
