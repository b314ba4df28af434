"""scikit-learn style estimators.

The "data" an estimator is fitted to is a :class:`PabnProblem` (a model plus
a posterior over its parameters) rather than an ``(X, y)`` array pair, but
the usual contract holds: hyper-parameters live in ``__init__``, ``fit``
returns ``self`` and learned quantities carry a trailing underscore.  Being
:class:`~sklearn.base.BaseEstimator` subclasses they support ``get_params``,
``set_params`` and :func:`sklearn.base.clone`.

>>> from sopabn.api import PabnProblem, SequentialShapleyOwen
>>> problem = PabnProblem.from_instance("linear_d4")
>>> est = SequentialShapleyOwen(N=200, N0=20, random_state=0).fit(problem)
>>> sorted(est.interactions_)[:2]
[(0, 1), (0, 2)]
"""
from __future__ import annotations

import numbers
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_scalar

from .allocation import AllocationBudget, algorithm2
from .estimators import NestedBudget, algorithm1
from .instances import load_linear
from .linear import LinearPabn
from .oracle import posterior_truth
from .pabn import PabnModel
from .sampling import ParameterPosterior


@dataclass
class PabnProblem:
    """A model together with the posterior of its parameters."""

    model: PabnModel
    posterior: ParameterPosterior

    @classmethod
    def from_instance(cls, name: str = "linear_d6", degenerate: bool = False) -> "PabnProblem":
        params, policy, posterior = load_linear(name, degenerate=degenerate)
        return cls(LinearPabn(policy), posterior)

    @property
    def n_inputs(self) -> int:
        return self.model.n_inputs


def check_problem(problem) -> PabnProblem:
    if isinstance(problem, tuple) and len(problem) == 2:
        problem = PabnProblem(*problem)
    if not isinstance(problem, PabnProblem):
        raise TypeError(f"expected a PabnProblem or (model, posterior), got {type(problem).__name__}")
    if problem.model.n_inputs < 2:
        raise ValueError("need at least two random inputs")
    return problem


def _seed(random_state) -> int:
    if random_state is None:
        return 0
    check_scalar(random_state, "random_state", numbers.Integral, min_val=0)
    return int(random_state)


class _ShapleyOwenBase(BaseEstimator):
    def _store(self, result, problem):
        self.pairs_ = list(result.pairs)
        self.estimates_ = np.asarray(result.estimates, dtype=float)
        self.interactions_ = dict(zip(self.pairs_, self.estimates_.tolist()))
        self.counts_ = np.asarray(result.counts)
        self.n_simulations_ = int(result.n_simulations)
        self.n_inputs_ = problem.n_inputs
        self.result_ = result

    def interaction_matrix(self) -> np.ndarray:
        """Symmetric ``(n, n)`` matrix of the estimates, zero diagonal."""
        check_is_fitted(self, "estimates_")
        out = np.zeros((self.n_inputs_, self.n_inputs_))
        for (i, j), v in zip(self.pairs_, self.estimates_):
            out[i, j] = out[j, i] = v
        return out


class NestedShapleyOwen(_ShapleyOwenBase):
    """Equal allocation with nested value-function estimates.

    Parameters
    ----------
    K, M : int
        Posterior draws and permutations per draw.
    n_outer, n_inner : int
        Outer and inner sample sizes of each nested value estimate.
    use_cache : bool
        Reuse value estimates shared between pairs within an iteration.
    random_state : int or None
    """

    def __init__(self, K=6, M=3, n_outer=6, n_inner=2, use_cache=True, random_state=None):
        self.K = K
        self.M = M
        self.n_outer = n_outer
        self.n_inner = n_inner
        self.use_cache = use_cache
        self.random_state = random_state

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        check_scalar(self.K, "K", numbers.Integral, min_val=1)
        check_scalar(self.M, "M", numbers.Integral, min_val=1)
        check_scalar(self.n_outer, "n_outer", numbers.Integral, min_val=2)
        check_scalar(self.n_inner, "n_inner", numbers.Integral, min_val=1)
        budget = NestedBudget(self.K, self.M, self.n_outer, self.n_inner)
        res = algorithm1(problem.model, problem.posterior, budget, _seed(self.random_state),
                         use_cache=self.use_cache)
        self._store(res, problem)
        self.variances_ = res.variances
        return self


class SequentialShapleyOwen(_ShapleyOwenBase):
    """Sequential budget allocation with non-nested value estimates.

    Parameters
    ----------
    N, N0 : int
        Total and pilot iterations.
    m : int
        Group size updated per allocation step.
    alpha : float
        Confidence level parameter of the reported intervals and of gHL.
    sampler : {"mc", "qmc"}
    freeze_sigma : bool
        Keep the pilot standard deviations during allocation.
    rule : {"unbiased", "leftmost"}
        How the leading input of the group is chosen; see ``select_group``.
    max_simulations : int or None
        Stop early once this many trajectories have been simulated.
    random_state : int or None
    """

    def __init__(self, N=1000, N0=20, m=2, alpha=0.1, sampler="mc", freeze_sigma=False, rule="unbiased",
                 max_simulations=None, random_state=None):
        self.N = N
        self.N0 = N0
        self.m = m
        self.alpha = alpha
        self.sampler = sampler
        self.freeze_sigma = freeze_sigma
        self.rule = rule
        self.max_simulations = max_simulations
        self.random_state = random_state

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        check_scalar(self.N0, "N0", numbers.Integral, min_val=2)
        check_scalar(self.N, "N", numbers.Integral, min_val=self.N0)
        check_scalar(self.m, "m", numbers.Integral, min_val=1)
        check_scalar(self.alpha, "alpha", numbers.Real, min_val=0, max_val=1, include_boundaries="neither")
        if self.sampler not in ("mc", "qmc"):
            raise ValueError(f"sampler must be 'mc' or 'qmc', got {self.sampler!r}")
        res = algorithm2(problem.model, problem.posterior, AllocationBudget(self.N, self.N0, self.m, self.alpha),
                         _seed(self.random_state), sampler=self.sampler, freeze_sigma=self.freeze_sigma,
                         rule=self.rule, max_simulations=self.max_simulations)
        self._store(res, problem)
        self.ci_ = np.column_stack([res.extra["ci_low"], res.extra["ci_high"]])
        self.sigma_ = np.sqrt(res.variances)
        return self


class ExactShapleyOwen(_ShapleyOwenBase):
    """Posterior-averaged exact indices of a linear Gaussian model.

    Parameters
    ----------
    n_draws : int
        Posterior draws averaged (one suffices for a degenerate posterior).
    random_state : int or None
    """

    def __init__(self, n_draws=10_000, random_state=None):
        self.n_draws = n_draws
        self.random_state = random_state

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        check_scalar(self.n_draws, "n_draws", numbers.Integral, min_val=1)
        if not isinstance(problem.model, LinearPabn):
            raise TypeError("exact indices need a linear Gaussian model")
        truth = posterior_truth(problem.model, problem.posterior, self.n_draws, _seed(self.random_state))
        self.pairs_ = list(truth.pairs)
        self.estimates_ = truth.interactions
        self.interactions_ = truth.as_dict()
        self.standard_errors_ = truth.interaction_se
        self.shapley_ = truth.shapley
        self.variance_ = truth.variance
        self.n_inputs_ = problem.n_inputs
        self.n_simulations_ = 0
        self.truth_ = truth
        return self
