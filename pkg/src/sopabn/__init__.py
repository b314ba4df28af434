"""Shapley-Owen interaction effects for policy-augmented Bayesian networks."""
from .allocation import AllocationBudget, algorithm2
from .estimators import InteractionResult, NestedBudget, algorithm1
from .exceptions import SopabnError
from .oracle import GroundTruth, exact_shapley_owen, mse, posterior_truth

__version__ = "0.1.0"

__all__ = [
    "AllocationBudget", "GroundTruth", "InteractionResult", "NestedBudget", "SopabnError",
    "algorithm1", "algorithm2", "exact_shapley_owen", "mse", "posterior_truth",
]
