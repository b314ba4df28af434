"""Exact Shapley-Owen indices and posterior-averaged ground truth."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .estimators import (EXACT_LIMIT, _as_table, all_pairs, delta_from, popcounts,
                         precedence_set, shapley_weight)
from .exceptions import PairSetMismatch, SizeLimit
from .linear import LinearPabn, value_table
from .pabn import full_mask
from .sampling import ParameterPosterior, stream

PERMUTATION_LIMIT = 8


def exact_shapley_owen(value_fn, n_inputs: int) -> dict:
    """Subset-form Shapley-Owen index for every unordered pair.

    ``value_fn`` is either a callable on subset masks or a precomputed table
    of length ``2**n_inputs``; the callable is evaluated once per mask.
    """
    if n_inputs > EXACT_LIMIT:
        raise SizeLimit(f"exact enumeration limited to {EXACT_LIMIT} inputs")
    table = _as_table(value_fn, n_inputs)
    sizes = popcounts(n_inputs)
    weights = np.array([shapley_weight(n_inputs, s, 1) for s in range(max(n_inputs - 1, 1))])
    masks = np.arange(1 << n_inputs)
    out = {}
    for i, j in all_pairs(n_inputs):
        bi, bj = 1 << i, 1 << j
        u = masks[(masks & (bi | bj)) == 0]
        terms = weights[sizes[u]] * (table[u | bi | bj] - table[u | bi] - table[u | bj] + table[u])
        out[(i, j)] = math.fsum(terms.tolist())
    return out


def exact_via_permutations(value_fn, n_inputs: int) -> dict:
    """Average of ``Delta_{i,j}(pi)`` over all ``n!`` permutations."""
    if n_inputs > PERMUTATION_LIMIT:
        raise SizeLimit(f"permutation enumeration limited to {PERMUTATION_LIMIT} inputs")
    table = _as_table(value_fn, n_inputs)
    pairs = all_pairs(n_inputs)
    sums = {pair: [] for pair in pairs}
    for perm in itertools.permutations(range(n_inputs)):
        for i, j in pairs:
            p = precedence_set(perm, i, j)
            sums[(i, j)].append(delta_from(table, i, j, p))
    n_perm = math.factorial(n_inputs)
    return {pair: math.fsum(v) / n_perm for pair, v in sums.items()}


def pair_weight_matrix(n_inputs: int) -> np.ndarray:
    """Linear map from a value table to all Shapley-Owen indices, ``(2^n, pairs)``."""
    sizes = popcounts(n_inputs)
    pairs = all_pairs(n_inputs)
    out = np.zeros((1 << n_inputs, len(pairs)))
    masks = np.arange(1 << n_inputs)
    for k, (i, j) in enumerate(pairs):
        bi, bj = 1 << i, 1 << j
        u = masks[(masks & (bi | bj)) == 0]
        wts = np.array([shapley_weight(n_inputs, s, 1) for s in sizes[u]])
        for sign, shifted in ((1, u | bi | bj), (-1, u | bi), (-1, u | bj), (1, u)):
            np.add.at(out[:, k], shifted, sign * wts)
    return out


def single_weight_matrix(n_inputs: int) -> np.ndarray:
    sizes = popcounts(n_inputs)
    out = np.zeros((1 << n_inputs, n_inputs))
    masks = np.arange(1 << n_inputs)
    for i in range(n_inputs):
        bit = 1 << i
        u = masks[(masks & bit) == 0]
        wts = np.array([shapley_weight(n_inputs, s, 0) for s in sizes[u]])
        np.add.at(out[:, i], u | bit, wts)
        np.add.at(out[:, i], u, -wts)
    return out


@dataclass
class GroundTruth:
    """Posterior-averaged exact indices with their Monte Carlo standard errors."""

    pairs: list
    interactions: np.ndarray
    interaction_se: np.ndarray
    shapley: np.ndarray
    shapley_se: np.ndarray
    variance: float
    n_draws: int

    def as_dict(self) -> dict:
        return {pair: float(v) for pair, v in zip(self.pairs, self.interactions)}


def posterior_value_tables(model: LinearPabn, posterior: ParameterPosterior, n_draws: int,
                           seed: int = 0) -> np.ndarray:
    """Analytic value tables for ``n_draws`` posterior draws, ``(K, 2^d)``."""
    rng = stream(seed, "truth")
    if posterior.degenerate:
        w = posterior.sample(rng)
        return np.repeat(value_table(model.decompose(w), model.residual_law(w))[None], n_draws, axis=0)
    draws = [posterior.from_normals(z) for z in rng.standard_normal((n_draws, posterior.dim))]
    laws = {id(model.residual_law(w)) for w in draws}
    if len(laws) == 1:
        R = np.array([model.decompose(w).R for w in draws])
        return value_table(R, model.residual_law(draws[0]))
    return np.array([value_table(model.decompose(w), model.residual_law(w)) for w in draws])


def posterior_truth(model: LinearPabn, posterior: ParameterPosterior, n_draws: int = 10_000,
                    seed: int = 0) -> GroundTruth:
    """Exact per-draw indices averaged over ``n_draws`` posterior samples."""
    n = model.n_inputs
    if n > EXACT_LIMIT:
        raise SizeLimit(f"exact enumeration limited to {EXACT_LIMIT} inputs")
    tables = posterior_value_tables(model, posterior, n_draws, seed)
    inter = tables @ pair_weight_matrix(n)
    single = tables @ single_weight_matrix(n)
    k = tables.shape[0]

    def se(a):
        # identical tables (degenerate posterior) have an exactly zero standard error
        if k < 2 or posterior.degenerate:
            return np.zeros(a.shape[1])
        return a.std(axis=0, ddof=1) / math.sqrt(k)

    return GroundTruth(all_pairs(n), inter.mean(axis=0), se(inter), single.mean(axis=0), se(single),
                       float(tables[:, full_mask(n)].mean()), k)


def _aligned(values, pairs) -> np.ndarray:
    if isinstance(values, dict):
        if set(values) != set(pairs):
            raise PairSetMismatch("estimate and truth cover different pairs")
        return np.array([values[p] for p in pairs], dtype=float)
    arr = np.asarray(values, dtype=float)
    if arr.shape != (len(pairs),):
        raise PairSetMismatch(f"expected {len(pairs)} pair values, got shape {arr.shape}")
    return arr


def mse(estimates, truth) -> float:
    """Mean squared error over all pairs.

    ``truth`` may be a :class:`GroundTruth`, a dict keyed by pair, or an
    array; ``estimates`` must cover the same pairs.
    """
    if isinstance(truth, GroundTruth):
        pairs, ref = truth.pairs, truth.interactions
    elif isinstance(truth, dict):
        pairs = sorted(truth)
        ref = np.array([truth[p] for p in pairs])
    else:
        ref = np.asarray(truth, dtype=float)
        pairs = list(range(ref.size))
    if hasattr(estimates, "pairs") and hasattr(estimates, "estimates"):
        estimates = dict(zip(estimates.pairs, estimates.estimates))
    est = _aligned(estimates, pairs)
    return float(np.mean((est - ref) ** 2))
