"""Fast amortized inference of time-varying learner ability under 2PL IRT.

A recognition network turns each interaction into a local Gaussian ability
potential; a backward sweep fuses the potentials with a random-walk prior
into a linear Gaussian chain whose marginals, samples and KL terms are all
closed form. Training maximizes a reparameterized ELBO with a small
reverse-mode tape; inference is a single forward pass.
"""

from .engine import NonFiniteError, OptimizerState, ParamStore, Var, adam_step, evaluate_with_gradients
from .evaluation import (
    PredictionRecord,
    RecoveryReport,
    auroc,
    bench_inference,
    kfold_learners,
    next_step_predictions,
    pearson,
    recovery_report,
)
from .kernel import (
    AbilityPotential,
    BackwardAggregate,
    LgmPosterior,
    backward_pass,
    dense_oracle,
    lgm_logpdf,
    make_posterior,
    rollout_marginals,
    sample_trajectory,
    step_conditional,
    step_kl,
    vacuous_potential,
)
from .model import (
    InteractionRecord,
    ItemParams,
    ModelConfig,
    Trajectory,
    bernoulli_loglik,
    irt2pl_prob,
    wiener_logpdf,
)
from .recognition import (
    ItemPosterior,
    PotentialNet,
    UnknownItemError,
    item_kl,
    item_sample,
    potential_forward,
    potential_grid,
)
from .synth import SynthConfig, SynthDataset, sample_items, simulate
from .training import (
    TrainConfig,
    TrainedModel,
    TrainingError,
    elbo_dir_loc,
    elbo_vibo,
    elbo_vtirt,
    fit,
    infer_trajectories,
    infer_trajectory,
    infer_transfer,
    poe_posterior,
)

__version__ = "0.1.0"

__all__ = [
    "AbilityPotential",
    "BackwardAggregate",
    "InteractionRecord",
    "ItemParams",
    "ItemPosterior",
    "LgmPosterior",
    "ModelConfig",
    "NonFiniteError",
    "OptimizerState",
    "ParamStore",
    "PotentialNet",
    "PredictionRecord",
    "RecoveryReport",
    "SynthConfig",
    "SynthDataset",
    "TrainConfig",
    "TrainedModel",
    "TrainingError",
    "Trajectory",
    "UnknownItemError",
    "Var",
    "adam_step",
    "auroc",
    "backward_pass",
    "bench_inference",
    "bernoulli_loglik",
    "dense_oracle",
    "elbo_dir_loc",
    "elbo_vibo",
    "elbo_vtirt",
    "evaluate_with_gradients",
    "fit",
    "infer_trajectories",
    "infer_trajectory",
    "infer_transfer",
    "irt2pl_prob",
    "item_kl",
    "item_sample",
    "kfold_learners",
    "lgm_logpdf",
    "make_posterior",
    "next_step_predictions",
    "pearson",
    "poe_posterior",
    "potential_forward",
    "potential_grid",
    "recovery_report",
    "rollout_marginals",
    "sample_items",
    "sample_trajectory",
    "simulate",
    "step_conditional",
    "step_kl",
    "vacuous_potential",
    "wiener_logpdf",
]
