"""Simulation study: generator, truth oracle and Monte Carlo runner."""

from .dgp import (
    DGPConfig,
    SimDraw,
    draw_cluster,
    draw_population,
    draw_trial,
    misspecify_features,
    outcome_mean,
    to_dataset,
    to_individual,
    uptake_prob,
)

__all__ = [
    "DGPConfig", "SimDraw", "draw_cluster", "draw_population", "draw_trial",
    "misspecify_features", "outcome_mean", "to_dataset", "to_individual", "uptake_prob",
]
