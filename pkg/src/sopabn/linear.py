"""Linear Gaussian PABN with its closed-form pathway decomposition.

Dynamics, in deviation form around the nominal trajectory ``mu_s``::

    s_1     = mu_s[1] + e_1
    a_t     = mu_a[t] + theta_t^T (s_t - mu_s[t])
    s_{t+1} = mu_s[t+1] + beta_s[t]^T (s_t - mu_s[t]) + beta_a[t]^T (a_t - mu_a[t]) + e_{t+1}
    r_t     = m_t + b_t^T a_t + c_t^T s_t          (no action at t = H)

so the cumulative reward is ``gamma + R @ e`` for a fixed coefficient row
``R``.  Time indices in the arrays are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DimensionMismatch, NegativeValueFunction
from .pabn import OutputSelector, PabnModel, ResidualLaw, Trajectory, full_mask


@dataclass(eq=False)
class LinearModelParams:
    """Model parameters ``w = (mu_s, mu_a, beta_s, beta_a, V)``.

    Shapes: ``mu_s (H, d_s)``, ``mu_a (H-1, d_a)``, ``beta_s (H-1, d_s, d_s)``,
    ``beta_a (H-1, d_a, d_s)`` and ``cov (d_s*H, d_s*H)``.
    """

    mu_s: np.ndarray
    mu_a: np.ndarray
    beta_s: np.ndarray
    beta_a: np.ndarray
    cov: np.ndarray
    _law: ResidualLaw | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu_s = np.atleast_2d(np.asarray(self.mu_s, dtype=float))
        horizon, d_s = self.mu_s.shape
        self.mu_a = np.asarray(self.mu_a, dtype=float).reshape(horizon - 1, -1)
        d_a = self.mu_a.shape[1]
        self.beta_s = np.asarray(self.beta_s, dtype=float).reshape(horizon - 1, d_s, d_s)
        self.beta_a = np.asarray(self.beta_a, dtype=float).reshape(horizon - 1, d_a, d_s)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (d_s * horizon, d_s * horizon):
            raise DimensionMismatch(f"cov must be {(d_s * horizon,) * 2}, got {self.cov.shape}")

    @property
    def horizon(self) -> int:
        return self.mu_s.shape[0]

    @property
    def n_states(self) -> int:
        return self.mu_s.shape[1]

    @property
    def n_actions(self) -> int:
        return self.mu_a.shape[1]

    @property
    def law(self) -> ResidualLaw:
        if self._law is None:
            self._law = ResidualLaw(self.cov)
        return self._law

    def with_updates(self, **fields) -> "LinearModelParams":
        # keep the memoized law when V is untouched
        law = self.law if "cov" not in fields else None
        return replace(self, _law=law, **fields)


@dataclass(eq=False)
class LinearPolicyReward:
    """Linear policy ``theta`` and linear reward ``(m, b, c)``.

    ``theta`` is ``(H-1, d_s, d_a)``; ``m`` is ``(H,)``; ``c`` is ``(H, d_s)``;
    ``b`` may be ``(H-1, d_a)`` or ``(H, d_a)`` (the last row is unused).
    """

    theta: np.ndarray
    m: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float).reshape(-1)
        horizon = self.m.size
        self.c = np.asarray(self.c, dtype=float).reshape(horizon, -1)
        d_s = self.c.shape[1]
        b = np.asarray(self.b, dtype=float)
        b = b.reshape(b.shape[0], -1) if b.ndim else b.reshape(1, 1)
        if b.shape[0] == horizon:
            b = b[:-1]
        if b.shape[0] != horizon - 1:
            raise DimensionMismatch(f"b must have H-1 or H rows, got {b.shape[0]}")
        self.b = b
        self.theta = np.asarray(self.theta, dtype=float).reshape(horizon - 1, d_s, b.shape[1])

    def check(self, params: LinearModelParams) -> None:
        if (self.m.size, self.c.shape[1], self.b.shape[1]) != (params.horizon, params.n_states, params.n_actions):
            raise DimensionMismatch("policy/reward dimensions do not match the model parameters")


@dataclass(frozen=True)
class PathwayDecomposition:
    """``Y = gamma + R @ e`` with per-period pieces.

    ``chain[(t0, t)]`` is the propagation matrix from the residual entering at
    period ``t0`` to the state deviation at period ``t + 1`` (1-based, so
    ``chain[(t0, t0 - 1)]`` is the identity).
    """

    gamma: float
    alpha: np.ndarray
    chain: dict
    R: np.ndarray

    def block(self, period: int) -> np.ndarray:
        d_s = self.alpha.shape[1]
        return self.R[(period - 1) * d_s: period * d_s]


def _step_matrices(params: LinearModelParams, pr: LinearPolicyReward) -> np.ndarray:
    # M_t acts on column deviations: delta_{t+1} = M_t delta_t + e_{t+1}
    return np.transpose(params.beta_s, (0, 2, 1)) + np.einsum(
        "tas,tsb->tab", np.transpose(params.beta_a, (0, 2, 1)), np.transpose(pr.theta, (0, 2, 1)))


def decompose(params: LinearModelParams, pr: LinearPolicyReward) -> PathwayDecomposition:
    pr.check(params)
    horizon, d_s = params.horizon, params.n_states
    steps = _step_matrices(params, pr)

    alpha = pr.c.copy()
    alpha[:-1] += np.einsum("ta,tsa->ts", pr.b, pr.theta)

    chain = {}
    for t0 in range(1, horizon + 1):
        mat = np.eye(d_s)
        chain[(t0, t0 - 1)] = mat
        for t in range(t0, horizon):
            mat = steps[t - 1] @ mat
            chain[(t0, t)] = mat

    R = np.zeros(d_s * horizon)
    for t0 in range(1, horizon + 1):
        block = np.zeros(d_s)
        for t in range(t0, horizon + 1):
            block += alpha[t - 1] @ chain[(t0, t - 1)]
        R[(t0 - 1) * d_s: t0 * d_s] = block

    gamma = float(pr.m.sum() + np.sum(pr.b * params.mu_a) + np.sum(pr.c * params.mu_s))
    return PathwayDecomposition(gamma, alpha, chain, R)


def analytic_variance(dec: PathwayDecomposition, cov) -> float:
    cov = cov.cov if isinstance(cov, ResidualLaw) else np.asarray(cov, dtype=float)
    if cov.shape != (dec.R.size, dec.R.size):
        raise DimensionMismatch("covariance does not match the coefficient row")
    return float(dec.R @ cov @ dec.R)


def analytic_value_function(dec: PathwayDecomposition, cov, subset: int) -> float:
    """``g(U) = Var[E[Y | e_U]]`` for the linear model.

    Evaluated as ``u Sigma_U u^T`` with ``u = R_U + R_{-U} Sigma_{-U,U} Sigma_U^{-1}``
    using one factorization of ``Sigma_U``.
    """
    law = cov if isinstance(cov, ResidualLaw) else ResidualLaw(cov)
    if law.dim != dec.R.size:
        raise DimensionMismatch("covariance does not match the coefficient row")
    subset = int(subset)
    if subset == 0:
        return 0.0
    total = analytic_variance(dec, law)
    if subset == full_mask(law.dim):
        return total
    f = law.factor(subset)
    u = dec.R[f.given] + dec.R[f.free] @ f.coef
    half = u @ f.given_chol
    g = float(half @ half)
    if g < -1e-12 * max(total, 1e-300):
        raise NegativeValueFunction(f"g(U) = {g} < 0 for U mask {subset}")
    return g


def explained_covariances(law: ResidualLaw) -> np.ndarray:
    """Stack of ``Var[E[e | e_U]]`` over all subset masks, shape ``(2^d, d, d)``.

    With these, ``g(U) = R Q_U R^T`` for any coefficient row, which makes a
    full value table for many posterior draws a single contraction.
    """
    cached = getattr(law, "_explained", None)
    if cached is not None:
        return cached
    d = law.dim
    cov = law.cov
    out = np.zeros((1 << d, d, d))
    for mask in range(1, 1 << d):
        f = law.factor(mask)
        half = np.linalg.solve(f.given_chol, cov[f.given, :])
        out[mask] = half.T @ half
    law._explained = out
    return out


def value_table(dec_or_R, law: ResidualLaw) -> np.ndarray:
    """Analytic ``g(U)`` for every mask; accepts one R row or a stack of rows."""
    R = dec_or_R.R if isinstance(dec_or_R, PathwayDecomposition) else np.asarray(dec_or_R, dtype=float)
    Q = explained_covariances(law)
    if R.ndim == 1:
        return np.einsum("i,uij,j->u", R, Q, R)
    return np.einsum("ki,uij,kj->ku", R, Q, R)


class LinearPabn(PabnModel):
    """Linear Gaussian PABN under a fixed linear policy and reward."""

    def __init__(self, policy: LinearPolicyReward, selector: OutputSelector | None = None,
                 affine: bool = True):
        self.policy = policy
        # the output is affine in e for fixed w, so batches can skip the rollout
        self.affine = affine
        self._affine_cache = (None, None, None)
        self.horizon = policy.m.size
        self.n_states = policy.c.shape[1]
        self.n_actions = policy.b.shape[1]
        self.selector = selector or OutputSelector.cumulative_reward()
        self.selector.validate(self.horizon, self.n_states)

    def residual_law(self, w: LinearModelParams) -> ResidualLaw:
        return w.law

    def decompose(self, w: LinearModelParams) -> PathwayDecomposition:
        return decompose(w, self.policy)

    def _rollout(self, w: LinearModelParams, e: np.ndarray):
        pr = self.policy
        H, d_s = self.horizon, self.n_states
        n = e.shape[0]
        e = e.reshape(n, H, d_s)
        states = np.empty((n, H, d_s))
        actions = np.zeros((n, max(H - 1, 0), self.n_actions))
        rewards = np.empty((n, H))
        states[:, 0] = w.mu_s[0] + e[:, 0]
        for t in range(H):
            dev = states[:, t] - w.mu_s[t]
            rewards[:, t] = pr.m[t] + states[:, t] @ pr.c[t]
            if t == H - 1:
                break
            a_dev = dev @ pr.theta[t]
            actions[:, t] = w.mu_a[t] + a_dev
            rewards[:, t] += actions[:, t] @ pr.b[t]
            states[:, t + 1] = w.mu_s[t + 1] + dev @ w.beta_s[t] + a_dev @ w.beta_a[t] + e[:, t + 1]
        return states, actions, rewards

    def trajectory(self, w, residuals) -> Trajectory:
        e = np.asarray(residuals, dtype=float).reshape(1, -1)
        states, actions, rewards = self._rollout(w, e)
        traj = Trajectory(states[0], actions[0], rewards[0])
        self._check_outputs(np.array([traj.cumulative_reward]))
        return traj

    def simulate(self, w, residuals: np.ndarray) -> np.ndarray:
        e = np.asarray(residuals, dtype=float)
        if e.ndim != 2 or e.shape[1] != self.n_inputs:
            raise DimensionMismatch(f"residual batch must be (n, {self.n_inputs}), got {e.shape}")
        if self.affine:
            return self._check_outputs(self._affine_map(w, e))
        states, _, rewards = self._rollout(w, e)
        sel = self.selector
        y = rewards.sum(axis=1) if sel.kind == "reward" else states[:, sel.period - 1, sel.component - 1]
        return self._check_outputs(y)

    def _affine_map(self, w, e: np.ndarray) -> np.ndarray:
        cached_w, offset, slope = self._affine_cache
        if cached_w is not w:
            # probe the rollout at e = 0 and along each unit residual
            probe = np.vstack([np.zeros(self.n_inputs), np.eye(self.n_inputs)])
            states, _, rewards = self._rollout(w, probe)
            sel = self.selector
            y = rewards.sum(axis=1) if sel.kind == "reward" else states[:, sel.period - 1, sel.component - 1]
            offset, slope = y[0], y[1:] - y[0]
            self._affine_cache = (w, offset, slope)
        return offset + e @ slope


def random_linear_instance(n_states: int, n_actions: int, horizon: int, rng: np.random.Generator,
                           correlation: float = 1.0, diagonal: bool = False):
    """Random well-conditioned ``(LinearModelParams, LinearPolicyReward)`` pair.

    ``correlation`` scales the off-diagonal part of the residual covariance;
    ``diagonal=True`` gives independent residuals.
    """
    d_e = n_states * horizon
    if diagonal:
        cov = np.diag(rng.uniform(0.5, 2.0, d_e))
    else:
        a = rng.normal(size=(d_e, d_e))
        cov = a @ a.T / d_e
        sd = np.sqrt(np.diag(cov))
        corr = cov / np.outer(sd, sd)
        corr = correlation * corr + (1 - correlation) * np.eye(d_e)
        scale = rng.uniform(0.5, 2.0, d_e)
        cov = corr * np.outer(scale, scale)
        cov = 0.5 * (cov + cov.T)
    params = LinearModelParams(
        mu_s=rng.normal(size=(horizon, n_states)),
        mu_a=rng.normal(size=(horizon - 1, n_actions)),
        beta_s=rng.normal(scale=0.5, size=(horizon - 1, n_states, n_states)),
        beta_a=rng.normal(scale=0.5, size=(horizon - 1, n_actions, n_states)),
        cov=cov,
    )
    policy = LinearPolicyReward(
        theta=rng.normal(scale=0.5, size=(horizon - 1, n_states, n_actions)),
        m=rng.normal(size=horizon),
        b=rng.normal(size=(horizon - 1, n_actions)),
        c=rng.normal(size=(horizon, n_states)),
    )
    return params, policy
