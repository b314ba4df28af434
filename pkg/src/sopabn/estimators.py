"""Value-function estimators and the permutation-sampling interaction estimator.

A *valuer* maps a parameter draw and a list of subset masks to value-function
estimates ``g(U | w)``.  Each mask is evaluated with its own random stream,
derived from the valuer seed, the caller's labels and the mask itself, so an
evaluation is reproducible regardless of which other masks are batched with
it or whether a cache sits in front of it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DimensionMismatch, SizeLimit
from .pabn import ConditionalFactor, PabnModel, full_mask, indices_of
from .sampling import ParameterPosterior, StreamFactory, derive_key, sample_permutation, stream

EXACT_LIMIT = 20


def all_pairs(n_inputs: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n_inputs), 2))


def precedence_set(perm: Sequence[int], i: int, j: int) -> int:
    """Mask of the inputs strictly before ``i`` in ``perm``, without ``j``."""
    if i == j:
        raise ValueError("precedence set needs two distinct inputs")
    mask = 0
    for x in perm:
        if x == i:
            return mask & ~(1 << j)
        mask |= 1 << x
    raise ValueError(f"input {i} not in permutation")


def prefix_masks(perm: Sequence[int]) -> tuple[np.ndarray, list[int]]:
    """Position of every input and the mask of the first ``k`` elements."""
    pos = np.empty(len(perm), dtype=np.intp)
    prefix = [0]
    for k, x in enumerate(perm):
        pos[x] = k
        prefix.append(prefix[-1] | (1 << x))
    return pos, prefix


def delta_masks(i: int, j: int, p: int) -> tuple[int, int, int, int]:
    bi, bj = 1 << i, 1 << j
    return p | bi | bj, p | bi, p | bj, p


def delta_from(values: dict, i: int, j: int, p: int) -> float:
    a, b, c, d = delta_masks(i, j, p)
    return values[a] - values[b] - values[c] + values[d]


# -- single value-function estimators -----------------------------------------

def nonnested_residuals(factor: ConditionalFactor, rng: np.random.Generator) -> np.ndarray:
    """Three residual rows: two given ``x^(0)`` and one given ``x^(1)``."""
    z = rng.standard_normal((3, factor.joint.shape[0]))
    z[1, factor.is_given] = z[0, factor.is_given]
    return z @ factor.joint.T


def nested_residuals(factor: ConditionalFactor, n_outer: int, n_inner: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``n_outer * n_inner`` rows, grouped by outer draw."""
    dim = factor.joint.shape[0]
    z = rng.standard_normal((n_outer, n_inner, dim))
    z[:, 1:, factor.is_given] = z[:, :1, factor.is_given]
    return z.reshape(-1, dim) @ factor.joint.T


def nonnested_from_outputs(y) -> float:
    y = np.asarray(y, dtype=float)
    return float(y[0] * (y[1] - y[2]))


def nested_from_outputs(y) -> float:
    """Nested estimate from an ``(N_O, N_I)`` table of outputs.

    With ``N_I = 1`` the inner-variance correction is taken as zero.
    """
    y = np.asarray(y, dtype=float)
    n_outer, n_inner = y.shape
    if n_outer < 2:
        raise ValueError("nested estimator needs at least two outer samples")
    row_means = y.mean(axis=1)
    between = float(np.sum((row_means - row_means.mean()) ** 2) / (n_outer - 1))
    if n_inner == 1:
        return between
    within = float(np.sum((y - row_means[:, None]) ** 2) / (n_outer * n_inner * (n_inner - 1)))
    return between - within


def _batch_nested(y: np.ndarray, n_outer: int, n_inner: int) -> np.ndarray:
    y = y.reshape(-1, n_outer, n_inner)
    row_means = y.mean(axis=2)
    between = np.sum((row_means - row_means.mean(axis=1, keepdims=True)) ** 2, axis=1) / (n_outer - 1)
    if n_inner == 1:
        return between
    within = np.sum((y - row_means[:, :, None]) ** 2, axis=(1, 2)) / (n_outer * n_inner * (n_inner - 1))
    return between - within


def nonnested_value(model: PabnModel, w, subset: int, rng: np.random.Generator) -> float:
    """One draw of ``y1 * (y2 - y3)``; exactly zero for the empty subset."""
    subset = int(subset)
    if subset == 0:
        return 0.0
    rows = nonnested_residuals(model.residual_law(w).factor(subset), rng)
    return nonnested_from_outputs(model.simulate(w, rows))


def nested_value(model: PabnModel, w, subset: int, n_outer: int, n_inner: int,
                 rng: np.random.Generator) -> float:
    if n_outer < 2 or n_inner < 1:
        raise ValueError("need n_outer >= 2 and n_inner >= 1")
    subset = int(subset)
    if subset == 0:
        return 0.0
    rows = nested_residuals(model.residual_law(w).factor(subset), n_outer, n_inner, rng)
    return nested_from_outputs(model.simulate(w, rows).reshape(n_outer, n_inner))


# -- valuers ------------------------------------------------------------------

class NonNestedValuer:
    """Batched non-nested estimator ``y1 (y2 - y3)`` (three simulations each)."""

    simulations_per_value = 3

    def __init__(self, model: PabnModel, seed: int = 0):
        self.model = model
        self.seed = seed
        self._streams = StreamFactory()
        self.n_simulations = 0
        self.n_values = 0

    def __call__(self, w, masks: Sequence[int], labels: tuple = ()) -> np.ndarray:
        law = self.model.residual_law(w)
        out = np.zeros(len(masks))
        live = [k for k, mask in enumerate(masks) if mask]
        if not live:
            return out
        dim = law.dim
        key = derive_key(self.seed, *labels)
        factors = [law.factor(masks[k]) for k in live]
        z = np.stack([self._streams.substream(key, f.mask).standard_normal((3, dim)) for f in factors])
        given = np.stack([f.is_given for f in factors])
        z[:, 1] = np.where(given, z[:, 0], z[:, 1])
        joint = np.stack([f.joint for f in factors])
        rows = np.matmul(z, joint.transpose(0, 2, 1)).reshape(-1, dim)
        y = self.model.simulate(w, rows).reshape(-1, 3)
        out[live] = y[:, 0] * (y[:, 1] - y[:, 2])
        self.n_simulations += 3 * len(live)
        self.n_values += len(live)
        return out


class NestedValuer:
    """Batched nested estimator with ``N_O`` outer and ``N_I`` inner samples."""

    def __init__(self, model: PabnModel, n_outer: int, n_inner: int, seed: int = 0):
        if n_outer < 2 or n_inner < 1:
            raise ValueError("need n_outer >= 2 and n_inner >= 1")
        self.model = model
        self.n_outer = n_outer
        self.n_inner = n_inner
        self.seed = seed
        self._streams = StreamFactory()
        self.n_simulations = 0
        self.n_values = 0

    @property
    def simulations_per_value(self) -> int:
        return self.n_outer * self.n_inner

    def __call__(self, w, masks: Sequence[int], labels: tuple = ()) -> np.ndarray:
        law = self.model.residual_law(w)
        out = np.zeros(len(masks))
        live = [k for k, mask in enumerate(masks) if mask]
        if not live:
            return out
        key = derive_key(self.seed, *labels)
        rows = np.concatenate([
            nested_residuals(law.factor(masks[k]), self.n_outer, self.n_inner,
                             self._streams.substream(key, masks[k])) for k in live])
        y = self.model.simulate(w, rows)
        out[live] = _batch_nested(y, self.n_outer, self.n_inner)
        self.n_simulations += self.simulations_per_value * len(live)
        self.n_values += len(live)
        return out


class ExactValuer:
    """Analytic value function of a linear model (no simulation)."""

    simulations_per_value = 0

    def __init__(self, model):
        from .linear import value_table

        self.model = model
        self._table = value_table
        self._last = (None, None)
        self.n_simulations = 0
        self.n_values = 0

    def table(self, w) -> np.ndarray:
        if self._last[0] is not w:
            self._last = (w, self._table(self.model.decompose(w), self.model.residual_law(w)))
        return self._last[1]

    def __call__(self, w, masks: Sequence[int], labels: tuple = ()) -> np.ndarray:
        self.n_values += len(masks)
        return self.table(w)[np.asarray(masks, dtype=np.int64)]


class ValueCache(dict):
    """Subset mask -> value estimate, scoped to one ``(w, pi)`` iteration."""

    def __init__(self, valuer, w, labels: tuple = (), enabled: bool = True):
        super().__init__()
        self.valuer = valuer
        self.w = w
        self.labels = labels
        self.enabled = enabled
        self.hits = 0
        self.misses = 0

    def fetch(self, masks: Sequence[int]) -> dict:
        """Values for ``masks``; cache misses are evaluated in one batch."""
        if not self.enabled:
            vals = self.valuer(self.w, list(masks), self.labels)
            self.misses += len(masks)
            return dict(zip(masks, vals))
        missing = []
        for mask in masks:
            if mask in self or mask in missing:
                self.hits += 1
            else:
                missing.append(mask)
        if missing:
            self.update(zip(missing, self.valuer(self.w, missing, self.labels)))
            self.misses += len(missing)
        return self


def delta_pair(valuer, perm: Sequence[int], i: int, j: int, w, cache: ValueCache | None = None,
               labels: tuple = ()) -> float:
    """Second-order marginal contribution of ``{i, j}`` along ``perm``."""
    cache = cache if cache is not None else ValueCache(valuer, w, labels)
    p = precedence_set(perm, i, j)
    return delta_from(cache.fetch(delta_masks(i, j, p)), i, j, p)


def pair_deltas(cache: ValueCache, perm: Sequence[int], pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """``Delta_{i,j}(perm)`` for every pair, with one batched evaluation."""
    pos, prefix = prefix_masks(perm)
    ps = [prefix[pos[i]] & ~(1 << j) for i, j in pairs]
    if not cache.enabled:
        # every term evaluated on its own; per-mask streams keep values identical
        return np.array([delta_from(cache.fetch(delta_masks(i, j, p)), i, j, p) for (i, j), p in zip(pairs, ps)])
    masks = []
    for (i, j), p in zip(pairs, ps):
        masks.extend(delta_masks(i, j, p))
    values = cache.fetch(list(dict.fromkeys(masks)))
    return np.array([delta_from(values, i, j, p) for (i, j), p in zip(pairs, ps)])


# -- permutation sampling with nested value estimates -----------------

@dataclass(frozen=True)
class NestedBudget:
    K: int
    M: int
    n_outer: int
    n_inner: int

    def __post_init__(self):
        if min(self.K, self.M, self.n_inner) < 1 or self.n_outer < 2:
            raise ValueError("need K, M, n_inner >= 1 and n_outer >= 2")

    @property
    def product(self) -> int:
        return self.K * self.M * self.n_outer * self.n_inner


@dataclass
class InteractionResult:
    """Per-pair interaction estimates from a sampling run."""

    pairs: list
    estimates: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    n_simulations: int = 0
    n_values: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {pair: float(v) for pair, v in zip(self.pairs, self.estimates)}

    def matrix(self, n_inputs: int) -> np.ndarray:
        out = np.zeros((n_inputs, n_inputs))
        for (i, j), v in zip(self.pairs, self.estimates):
            out[i, j] = out[j, i] = v
        return out


def algorithm1(model: PabnModel, posterior: ParameterPosterior, budget: NestedBudget, seed: int = 0,
               valuer=None, use_cache: bool = True) -> InteractionResult:
    """Equal-allocation estimator: ``K`` parameter draws times ``M`` permutations.

    Every pair is updated in every iteration with nested value estimates
    (or with ``valuer`` if given).  Returns the mean and sample variance of
    the ``K * M`` marginal-contribution draws per pair.
    """
    n = model.n_inputs
    if n < 2:
        raise ValueError("need at least two inputs")
    valuer = valuer or NestedValuer(model, budget.n_outer, budget.n_inner, seed)
    pairs = all_pairs(n)
    total = np.zeros(len(pairs))
    total_sq = np.zeros(len(pairs))
    hits = 0
    for k in range(budget.K):
        w = posterior.sample(stream(seed, "w", k))
        for m in range(budget.M):
            perm = sample_permutation(n, stream(seed, "perm", k, m))
            cache = ValueCache(valuer, w, ("alg1", k, m), enabled=use_cache)
            d = pair_deltas(cache, perm, pairs)
            total += d
            total_sq += d * d
            hits += cache.hits
    count = budget.K * budget.M
    mean = total / count
    var = (total_sq - count * mean ** 2) / (count - 1) if count > 1 else np.full(len(pairs), np.nan)
    return InteractionResult(pairs, mean, var, np.full(len(pairs), count), valuer.n_simulations,
                             valuer.n_values, {"cache_hits": hits})


# -- exact Shapley effects -------------------------------------------------------

def _as_table(value_fn, n: int) -> np.ndarray:
    if callable(value_fn):
        return np.array([value_fn(mask) for mask in range(1 << n)], dtype=float)
    table = np.asarray(value_fn, dtype=float)
    if table.shape != (1 << n,):
        raise DimensionMismatch(f"value table must have {1 << n} entries")
    return table


def shapley_weight(n: int, size: int, offset: int) -> float:
    """``(n - size - 1 - offset)! size! / (n - offset)!`` in log space.

    ``offset = 0`` gives the single-input Shapley weight and ``offset = 1``
    the pair (Shapley-Owen) weight.
    """
    return math.exp(math.lgamma(n - size - offset) + math.lgamma(size + 1) - math.lgamma(n - offset + 1))


def popcounts(n: int) -> np.ndarray:
    return np.array([bin(m).count("1") for m in range(1 << n)])


def shapley_effects_exact(value_fn: Callable[[int], float] | np.ndarray, n_inputs: int) -> np.ndarray:
    """Exact first-order Shapley effects by subset enumeration."""
    if n_inputs > EXACT_LIMIT:
        raise SizeLimit(f"exact enumeration limited to {EXACT_LIMIT} inputs")
    table = _as_table(value_fn, n_inputs)
    sizes = popcounts(n_inputs)
    weights = [shapley_weight(n_inputs, s, 0) for s in range(n_inputs)]
    out = np.empty(n_inputs)
    full = full_mask(n_inputs)
    for i in range(n_inputs):
        bit = 1 << i
        terms = [weights[sizes[u]] * (table[u | bit] - table[u]) for u in range(full + 1) if not u & bit]
        out[i] = math.fsum(terms)
    return out


__all__ = [
    "ExactValuer", "InteractionResult", "NestedBudget", "NestedValuer", "NonNestedValuer", "ValueCache",
    "algorithm1", "all_pairs", "delta_pair", "indices_of", "nested_value", "nonnested_value",
    "pair_deltas", "precedence_set", "shapley_effects_exact",
]
