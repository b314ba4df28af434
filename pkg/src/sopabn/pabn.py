"""Policy-augmented Bayesian network (PABN) core.

The random inputs of a PABN are the state residuals ``e_t^n`` for periods
``t = 1..H`` and state components ``n = 1..d_s``.  They are addressed by a flat
index ``(t - 1) * d_s + (n - 1)`` and subsets of inputs are plain ``int``
bitmasks over those flat indices.

Every concrete model implements :class:`PabnModel`.  The important entry
point for the estimators is :meth:`PabnModel.simulate`, which maps a batch of
full residual vectors to a batch of outputs in one call.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable, Sequence

import numpy as np

from .exceptions import DimensionMismatch, NonFiniteState, SingularSubmatrix

_JITTER_REL = 1e-10
_JITTER_ESCALATIONS = 3


# -- input indexing ----------------------------------------------------------

def flatten_index(t: int, n: int, n_states: int) -> int:
    """Flat index of residual ``e_t^n`` (both ``t`` and ``n`` are 1-based)."""
    if t < 1 or not 1 <= n <= n_states:
        raise IndexError(f"residual (t={t}, n={n}) out of range")
    return (t - 1) * n_states + (n - 1)


def unflatten_index(flat: int, n_states: int) -> tuple[int, int]:
    if flat < 0:
        raise IndexError(f"negative flat index {flat}")
    t, n = divmod(flat, n_states)
    return t + 1, n + 1


def mask_from(indices: Iterable[int]) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << int(i)
    return mask


@lru_cache(maxsize=None)
def indices_of(mask: int) -> tuple[int, ...]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


def full_mask(n_inputs: int) -> int:
    return (1 << n_inputs) - 1


# -- Gaussian residual law ---------------------------------------------------

def robust_cholesky(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, repaired by bounded diagonal jitter.

    Jitter starts at ``1e-10 * trace / dim`` and grows tenfold up to three
    times; :class:`SingularSubmatrix` is raised when all attempts fail.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        return np.zeros_like(mat)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    dim = mat.shape[0]
    jitter = _JITTER_REL * max(np.trace(mat), 0.0) / dim
    if jitter > 0:
        eye = np.eye(dim)
        for _ in range(_JITTER_ESCALATIONS + 1):
            try:
                return np.linalg.cholesky(mat + jitter * eye)
            except np.linalg.LinAlgError:
                jitter *= 10.0
    raise SingularSubmatrix(f"covariance block of size {dim} is not positive definite")


def _psd_factor(mat: np.ndarray) -> np.ndarray:
    # conditional covariances may be exactly singular (deterministic relations)
    if mat.size == 0:
        return np.zeros_like(mat)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(mat)
        scale = max(abs(vals).max(), 1.0)
        if vals.min() < -1e-8 * scale:
            raise SingularSubmatrix("conditional covariance is not positive semi-definite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of the free residuals given the conditioned ones."""

    free: tuple[int, ...]
    mean: np.ndarray
    cov: np.ndarray


class ConditionalFactor:
    """Precomputed pieces to sample ``e`` jointly as (given, free | given).

    ``coef`` maps given values to the conditional mean of the free block,
    ``given_chol`` factors the marginal covariance of the given block and
    ``free_chol`` the conditional covariance of the free block.
    """

    __slots__ = ("mask", "given", "free", "coef", "given_chol", "free_chol", "free_cov", "joint", "is_given")

    def __init__(self, cov: np.ndarray, mask: int):
        dim = cov.shape[0]
        given = np.array(indices_of(mask), dtype=np.intp)
        free = np.array([i for i in range(dim) if not (mask >> i) & 1], dtype=np.intp)
        self.mask = mask
        self.given = given
        self.free = free
        if given.size == 0:
            self.given_chol = np.zeros((0, 0))
            self.coef = np.zeros((free.size, 0))
            self.free_cov = cov
        else:
            s_uu = cov[np.ix_(given, given)]
            self.given_chol = robust_cholesky(s_uu)
            if free.size:
                s_fu = cov[np.ix_(free, given)]
                # coef = S_fu S_uu^{-1}, via two triangular solves on the factor
                tmp = np.linalg.solve(self.given_chol, s_fu.T)
                self.coef = np.linalg.solve(self.given_chol.T, tmp).T
                free_cov = cov[np.ix_(free, free)] - tmp.T @ tmp
                self.free_cov = 0.5 * (free_cov + free_cov.T)
            else:
                self.coef = np.zeros((0, given.size))
                self.free_cov = np.zeros((0, 0))
        self.free_chol = _psd_factor(self.free_cov)
        # e = joint @ z reproduces (given, free | given) in one product
        joint = np.zeros((dim, dim))
        joint[np.ix_(given, given)] = self.given_chol
        joint[np.ix_(free, given)] = self.coef @ self.given_chol
        joint[np.ix_(free, free)] = self.free_chol
        self.joint = joint
        self.is_given = np.zeros(dim, dtype=bool)
        self.is_given[given] = True

    def draw_given(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals of shape ``(..., |U|)`` to marginal draws."""
        return z @ self.given_chol.T

    def draw_free(self, given_values: np.ndarray, z: np.ndarray) -> np.ndarray:
        return given_values @ self.coef.T + z @ self.free_chol.T


class ResidualLaw:
    """Zero-mean Gaussian law ``N(0, V)`` over the flattened residual vector.

    Conditional factorizations are memoized per subset mask, so a law should
    be shared across all evaluations that use the same ``V``.
    """

    def __init__(self, cov):
        cov = np.array(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        cov.setflags(write=False)
        self.cov = cov
        self._factors: dict[int, ConditionalFactor] = {}

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def factor(self, mask: int) -> ConditionalFactor:
        f = self._factors.get(mask)
        if f is None:
            if mask >> self.dim:
                raise IndexError("subset mask refers to inputs beyond the law dimension")
            f = self._factors[mask] = ConditionalFactor(self.cov, mask)
        return f

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        chol = self.factor(full_mask(self.dim)).given_chol
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.standard_normal(shape) @ chol.T

    def __repr__(self):
        return f"ResidualLaw(dim={self.dim})"


def condition_residuals(law: ResidualLaw, subset, values) -> ConditionalGaussian:
    """Gaussian law of the complement of ``subset`` given ``e_U = values``.

    ``subset`` is a bitmask or an iterable of flat indices; ``values`` are
    ordered by increasing flat index.
    """
    mask = subset if isinstance(subset, (int, np.integer)) else mask_from(subset)
    mask = int(mask)
    if mask == 0:
        raise ValueError("conditioning subset must be nonempty")
    f = law.factor(mask)
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != f.given.size:
        raise DimensionMismatch(f"expected {f.given.size} conditioned values, got {values.size}")
    return ConditionalGaussian(tuple(int(i) for i in f.free), f.coef @ values, f.free_cov.copy())


def assemble_residuals(factor: ConditionalFactor, given_values, free_values) -> np.ndarray:
    """Full residual rows with given values and free draws at their flat slots."""
    given_values = np.atleast_2d(given_values)
    free_values = np.atleast_2d(free_values)
    n = max(given_values.shape[0], free_values.shape[0])
    out = np.empty((n, factor.given.size + factor.free.size))
    out[:, factor.given] = given_values
    out[:, factor.free] = free_values
    return out


# -- models -------------------------------------------------------------------

@dataclass(frozen=True)
class OutputSelector:
    """Which scalar of a trajectory is the output ``Y``.

    ``kind`` is ``"reward"`` for the cumulative reward or ``"state"`` for the
    state component ``s_t^n`` (1-based ``period`` and ``component``).
    """

    kind: str = "reward"
    period: int | None = None
    component: int | None = None

    def __post_init__(self):
        if self.kind not in ("reward", "state"):
            raise ValueError(f"unknown output kind {self.kind!r}")
        if self.kind == "state" and (self.period is None or self.component is None):
            raise ValueError("state selector needs period and component")

    @classmethod
    def cumulative_reward(cls) -> "OutputSelector":
        return cls("reward")

    @classmethod
    def state(cls, period: int, component: int) -> "OutputSelector":
        return cls("state", period, component)

    def validate(self, horizon: int, n_states: int) -> None:
        if self.kind == "state" and not (1 <= self.period <= horizon and 1 <= self.component <= n_states):
            raise IndexError(f"state selector ({self.period}, {self.component}) outside model")


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())


class PabnModel(abc.ABC):
    """A PABN under a fixed policy.

    Subclasses bind the policy and reward at construction; a parameter draw
    ``w`` is passed to every call so the same model object can be shared
    across posterior samples.
    """

    n_states: int
    n_actions: int
    horizon: int
    selector: OutputSelector

    @property
    def n_inputs(self) -> int:
        return self.n_states * self.horizon

    @abc.abstractmethod
    def residual_law(self, w) -> ResidualLaw:
        """Gaussian law of the residual vector under parameters ``w``."""

    @abc.abstractmethod
    def trajectory(self, w, residuals) -> Trajectory:
        """Full trajectory for one residual vector."""

    @abc.abstractmethod
    def simulate(self, w, residuals: np.ndarray) -> np.ndarray:
        """Outputs for a batch of residual vectors, shape ``(n, d_e) -> (n,)``."""

    def select(self, traj: Trajectory) -> float:
        sel = self.selector
        if sel.kind == "reward":
            return traj.cumulative_reward
        return float(traj.states[sel.period - 1, sel.component - 1])

    def _check_outputs(self, y: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(y)):
            raise NonFiniteState("simulation produced a non-finite output")
        return y


def sample_trajectory(model: PabnModel, w, residuals) -> float:
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape != (model.n_inputs,):
        raise DimensionMismatch(f"expected {model.n_inputs} residuals, got shape {residuals.shape}")
    return float(model.simulate(w, residuals[None, :])[0])


def sample_output_given_subset(model: PabnModel, w, subset, x_u: Sequence[float] | None,
                               rng: np.random.Generator, law: ResidualLaw | None = None) -> float:
    """One draw of ``Y`` given ``e_U = x_u``; the complement is sampled."""
    law = law or model.residual_law(w)
    mask = int(subset) if isinstance(subset, (int, np.integer)) else mask_from(subset)
    f = law.factor(mask)
    x_u = np.zeros(0) if x_u is None else np.asarray(x_u, dtype=float).reshape(-1)
    if x_u.size != f.given.size:
        raise DimensionMismatch(f"expected {f.given.size} conditioned values, got {x_u.size}")
    if f.free.size:
        free = f.draw_free(x_u, rng.standard_normal(f.free.size))
    else:
        free = np.zeros(0)
    e = assemble_residuals(f, x_u, free)[0]
    return sample_trajectory(model, w, e)


def as_mask(subset: Any) -> int:
    if isinstance(subset, (int, np.integer)):
        return int(subset)
    return mask_from(subset)
