"""Nuisance models for the uptake and outcome surfaces."""

from .ensemble import ForestParams, StackedLearner, fit_stack, project_simplex, stack_weights
from .fit import (
    FittedNuisance,
    FoldAssignment,
    NuisanceSpec,
    NuisanceTable,
    cross_fit,
    crossfit_table,
    fit_nuisance,
    full_table,
    make_folds,
)
from .forest import Forest, fit_forest
from .formula import Design
from .glm import LinearFit, LogisticFit, expit, fit_linear, fit_logistic

__all__ = [
    "Design", "FittedNuisance", "FoldAssignment", "Forest", "ForestParams", "LinearFit",
    "LogisticFit", "NuisanceSpec", "NuisanceTable", "StackedLearner", "cross_fit",
    "crossfit_table", "expit", "fit_forest", "fit_linear", "fit_logistic", "fit_nuisance",
    "fit_stack", "full_table", "make_folds", "project_simplex", "stack_weights",
]
