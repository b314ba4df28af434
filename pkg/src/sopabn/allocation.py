"""Sequential budget allocation for Shapley-Owen estimation.

A pilot stage updates every pair for ``N_0`` iterations.  Afterwards each
iteration draws ``(w, pi)``, picks the pair whose confidence half-length
would shrink fastest with one more sample (largest ``gHL``), and updates a
small group of pairs that share that pair's leading input, so the two
value-function terms common to the group are simulated once.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .estimators import (InteractionResult, NonNestedValuer, ValueCache, all_pairs, delta_from,
                         delta_masks, pair_deltas, prefix_masks)
from .exceptions import InsufficientSamples
from .pabn import PabnModel
from .sampling import (HaltonStream, ParameterPosterior, StreamFactory, qmc_dimension, qmc_to_sample,
                       sample_permutation)

GROUP_RULES = ("unbiased", "leftmost")


@lru_cache(maxsize=64)
def z_value(alpha: float) -> float:
    """Upper ``alpha / 2`` standard normal quantile."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(-ndtri(alpha / 2))


class InteractionTracker:
    """Running mean and variance of marginal-contribution draws per pair.

    Uses Welford updates; ``sum_delta`` and ``sum_sq`` are derived views.
    """

    def __init__(self, pairs: Sequence[tuple[int, int]]):
        self.pairs = list(pairs)
        self.index = {p: k for k, p in enumerate(self.pairs)}
        n = len(self.pairs)
        self.count = np.zeros(n, dtype=np.int64)
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)
        self.frozen_sigma: np.ndarray | None = None

    def add(self, k: int, delta: float) -> None:
        self.count[k] += 1
        d = delta - self.mean[k]
        self.mean[k] += d / self.count[k]
        self.m2[k] += d * (delta - self.mean[k])

    def add_all(self, deltas: np.ndarray) -> None:
        for k, d in enumerate(deltas):
            self.add(k, float(d))

    @property
    def sum_delta(self) -> np.ndarray:
        return self.mean * self.count

    @property
    def sum_sq(self) -> np.ndarray:
        return self.m2 + self.count * self.mean ** 2

    @property
    def sigma(self) -> np.ndarray:
        """Sample standard deviation (0 for fewer than two draws)."""
        if self.frozen_sigma is not None:
            return self.frozen_sigma
        return self.running_sigma

    @property
    def running_sigma(self) -> np.ndarray:
        out = np.zeros(len(self.pairs))
        ok = self.count >= 2
        out[ok] = np.sqrt(np.maximum(self.m2[ok], 0.0) / (self.count[ok] - 1))
        return out

    def freeze(self) -> None:
        self.frozen_sigma = self.running_sigma.copy()

    def _k(self, pair) -> int:
        return self.index[tuple(sorted(pair))] if not isinstance(pair, (int, np.integer)) else int(pair)


def confidence_interval(tracker: InteractionTracker, pair, alpha: float = 0.1) -> tuple[float, float]:
    """Asymptotic ``1 - alpha`` interval ``mean +/- z sigma / sqrt(N)``."""
    k = tracker._k(pair)
    n = tracker.count[k]
    if n < 2:
        raise InsufficientSamples(f"pair {tracker.pairs[k]} has {n} < 2 samples")
    half = z_value(alpha) * tracker.running_sigma[k] / math.sqrt(n)
    return float(tracker.mean[k] - half), float(tracker.mean[k] + half)


def ghl(tracker: InteractionTracker, pair=None, alpha: float = 0.1):
    """Magnitude of d(half-length)/dN: ``z sigma / (2 N^{3/2})``.

    Returns the value for ``pair``, or the array over all pairs.
    """
    n = tracker.count.astype(float)
    if np.any(n < 1):
        raise InsufficientSamples("gHL needs at least one sample per pair")
    vals = z_value(alpha) * tracker.sigma / (2.0 * n ** 1.5)
    return vals if pair is None else float(vals[tracker._k(pair)])


def _ranked(tracker: InteractionTracker, scores: np.ndarray, candidates: Sequence[int]) -> list[int]:
    """Candidates ordered by (score desc, count asc, pair lexicographic)."""
    cand = np.asarray(candidates, dtype=np.intp)
    order = np.lexsort((cand, tracker.count[cand], -scores[cand]))
    return [int(c) for c in cand[order]]


def _best(tracker: InteractionTracker, scores: np.ndarray) -> int:
    # same order as _ranked(...)[0]; pair indices are already lexicographic
    top = np.flatnonzero(scores == scores.max())
    if top.size == 1:
        return int(top[0])
    counts = tracker.count[top]
    return int(top[np.argmin(counts)])


def select_group(tracker: InteractionTracker, perm: Sequence[int], m: int, alpha: float = 0.1,
                 rule: str = "unbiased", lead: int = 0) -> tuple[int, list[int]]:
    """Leading input ``i*`` and the pair indices of ``G_m(i*, perm)``.

    ``rule="leftmost"`` takes ``i*`` as the element of the argmax pair that
    comes first in ``perm`` and only groups partners after ``i*``.
    ``rule="unbiased"`` takes element ``lead`` (0 or 1, chosen independently
    of ``perm``) of the argmax pair and may group any partner.  Either way the
    argmax pair is in the group.
    """
    if rule not in GROUP_RULES:
        raise ValueError(f"unknown group rule {rule!r}")
    scores = ghl(tracker, alpha=alpha)
    best = _best(tracker, scores)
    a, b = tracker.pairs[best]
    if rule == "leftmost":
        perm = list(perm)
        pa, pb = perm.index(a), perm.index(b)
        lead_input = a if pa < pb else b
        partners = perm[min(pa, pb) + 1:]
    else:
        lead_input = (a, b)[lead]
        partners = [j for j in range(len(perm)) if j != lead_input]
    group = [tracker.index[(lead_input, j) if lead_input < j else (j, lead_input)] for j in partners]
    if m == 1:
        return lead_input, [best]
    chosen = _ranked(tracker, scores, group)[:m]
    if best not in chosen:
        chosen[-1] = best
    return lead_input, chosen


@dataclass(frozen=True)
class AllocationBudget:
    N: int
    N0: int
    m: int = 2
    alpha: float = 0.1

    def __post_init__(self):
        if not 2 <= self.N0 <= self.N:
            raise ValueError("need 2 <= N0 <= N")
        if self.m < 1:
            raise ValueError("group size m must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


class _Draws:
    """Sequence of ``(w, pi)`` draws from plain Monte Carlo or scrambled Halton."""

    def __init__(self, posterior: ParameterPosterior, n_inputs: int, sampler: str, seed: int):
        if sampler not in ("mc", "qmc"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.posterior = posterior
        self.n_inputs = n_inputs
        self.sampler = sampler
        self.seed = seed
        self._halton = HaltonStream(qmc_dimension(posterior, n_inputs), seed=seed) if sampler == "qmc" else None
        self._streams = StreamFactory()
        self._buffer = np.empty((0, 0))
        self._pos = 0

    def __call__(self, n: int):
        if self._halton is None:
            w = self.posterior.sample(self._streams.get(self.seed, "w", n))
            return w, sample_permutation(self.n_inputs, self._streams.get(self.seed, "perm", n))
        if self._pos >= len(self._buffer):
            self._buffer = self._halton.points(1024)
            self._pos = 0
        point = self._buffer[self._pos]
        self._pos += 1
        return qmc_to_sample(point, self.posterior, self.n_inputs)


def pilot(model: PabnModel, posterior: ParameterPosterior, n_pilot: int, seed: int = 0,
          valuer=None, sampler: str = "mc", pairs=None, _draws=None) -> InteractionTracker:
    """Equal allocation over all pairs for ``n_pilot`` iterations."""
    if n_pilot < 2:
        raise ValueError("pilot needs at least two iterations")
    valuer = valuer or NonNestedValuer(model, seed)
    pairs = pairs or all_pairs(model.n_inputs)
    draws = _draws or _Draws(posterior, model.n_inputs, sampler, seed)
    tracker = InteractionTracker(pairs)
    for n in range(n_pilot):
        w, perm = draws(n)
        tracker.add_all(pair_deltas(ValueCache(valuer, w, ("pilot", n)), perm, pairs))
    return tracker


def algorithm2(model: PabnModel, posterior: ParameterPosterior, budget: AllocationBudget, seed: int = 0,
               sampler: str = "mc", valuer=None, freeze_sigma: bool = False, rule: str = "unbiased",
               max_simulations: int | None = None) -> InteractionResult:
    """Sequential gHL-driven allocation with non-nested value estimates.

    Runs ``budget.N`` iterations in total, or stops earlier once the valuer
    has used ``max_simulations`` trajectory simulations (checked after each
    iteration of the allocation stage).
    """
    valuer = valuer or NonNestedValuer(model, seed)
    pairs = all_pairs(model.n_inputs)
    draws = _Draws(posterior, model.n_inputs, sampler, seed)
    tracker = pilot(model, posterior, budget.N0, seed, valuer, pairs=pairs, _draws=draws)
    if freeze_sigma:
        tracker.freeze()
    allocated = 0
    n = budget.N0
    while n < budget.N:
        if max_simulations is not None and valuer.n_simulations >= max_simulations:
            break
        w, perm = draws(n)
        lead, group = select_group(tracker, perm, budget.m, budget.alpha, rule, lead=n % 2)
        pos, prefix = prefix_masks(perm)
        shared = prefix[pos[lead]]
        terms = []
        for k in group:
            a, b = tracker.pairs[k]
            j = b if a == lead else a
            terms.append((k, j, shared & ~(1 << j)))
        masks = dict.fromkeys(m for _, j, p in terms for m in delta_masks(lead, j, p))
        values = ValueCache(valuer, w, ("alloc", n)).fetch(list(masks))
        for k, j, p in terms:
            tracker.add(k, delta_from(values, lead, j, p))
        allocated += len(group)
        n += 1

    z = z_value(budget.alpha)
    sigma = tracker.running_sigma
    half = z * sigma / np.sqrt(np.maximum(tracker.count, 1))
    return InteractionResult(
        pairs, tracker.mean.copy(), sigma ** 2, tracker.count.copy(), valuer.n_simulations, valuer.n_values,
        {"ci_low": tracker.mean - half, "ci_high": tracker.mean + half, "iterations": n,
         "allocated": allocated, "tracker": tracker})
