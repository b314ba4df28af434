"""Mature cell-progenitor negative feedback model with media dilution.

States are progenitor density ``S``, product density ``P`` and inhibitor
concentration ``I``::

    dS/dt = r_g / (1 + exp(a (I - b))) - r_c S
    dP/dt = r_c S - r_d P
    dI/dt = r_p P

Each period the policy dilutes ``I`` by a fraction, the ODE is integrated
with classical RK4 over one period, the residual is added and negative
components are clamped to zero.  Residuals share a culture-pH factor within
a period and are independent across periods.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .exceptions import NonFiniteState
from .pabn import OutputSelector, PabnModel, ResidualLaw, Trajectory

N_STATES = 3
STATE_NAMES = ("S", "P", "I")


@dataclass(frozen=True)
class PhCorrelation:
    """Residual structure ``e_t^i = l^i e_t^PH + e_t^i'``."""

    loadings: tuple = (0.0, 0.0, 0.0)
    ph_variance: float = 0.04
    own_variances: tuple = (0.04, 0.04, 0.04)

    def __post_init__(self):
        if len(self.loadings) != N_STATES or len(self.own_variances) != N_STATES:
            raise ValueError("loadings and own_variances need one entry per state")
        if self.ph_variance < 0 or min(self.own_variances) <= 0:
            raise ValueError("pH variance must be >= 0 and own variances > 0")

    def block(self) -> np.ndarray:
        l = np.asarray(self.loadings, dtype=float)
        return np.outer(l, l) * self.ph_variance + np.diag(np.asarray(self.own_variances, dtype=float))


def build_covariance(corr: PhCorrelation, horizon: int) -> ResidualLaw:
    return ResidualLaw(np.kron(np.eye(horizon), corr.block()))


@dataclass(eq=False)
class FeedbackParams:
    """Kinetic rates, integration grid and residual covariance (``w``)."""

    r_g: float = 1.0
    r_c: float = 0.3
    r_d: float = 0.1
    r_p: float = 0.2
    a: float = 2.0
    b: float = 1.5
    period: float = 1.0
    step: float = 0.01
    cov: np.ndarray | None = None
    _law: ResidualLaw | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("r_g", "r_c", "r_d", "r_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.step <= 0 or self.period <= 0:
            raise ValueError("period and step must be positive")
        ratio = self.period / self.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("period must be an integer multiple of step")
        if self.cov is not None:
            self.cov = np.asarray(self.cov, dtype=float)

    @property
    def n_steps(self) -> int:
        return int(round(self.period / self.step))

    @property
    def law(self) -> ResidualLaw:
        if self._law is None:
            if self.cov is None:
                raise ValueError("no residual covariance configured")
            self._law = ResidualLaw(self.cov)
        return self._law

    def with_updates(self, **fields) -> "FeedbackParams":
        law = self.law if "cov" not in fields and self.cov is not None else None
        return replace(self, _law=law, **fields)

    def rates(self) -> np.ndarray:
        return np.array([self.r_g, self.r_c, self.r_d, self.r_p, self.a, self.b])


@dataclass(frozen=True)
class DilutionPolicy:
    """Per-period dilution fraction of ``I`` and reward coefficients."""

    fraction: float | tuple = 0.5
    dilution_cost: float = 0.1
    product_value: float = 1.0

    def fractions(self, horizon: int) -> np.ndarray:
        f = np.broadcast_to(np.asarray(self.fraction, dtype=float), (horizon - 1,)).copy()
        if np.any(f < 0) or np.any(f >= 1):
            raise ValueError("dilution fractions must lie in [0, 1)")
        return f


@numba.njit(cache=True, inline="always")
def _sigmoid_growth(r_g, a, b, inhib):
    z = a * (inhib - b)
    if z > 0.0:
        ez = math.exp(-z)
        return r_g * ez / (1.0 + ez)
    return r_g / (1.0 + math.exp(z))


@numba.njit(cache=True)
def _rk4(s, p, i, rates, n_steps, h):
    r_g, r_c, r_d, r_p, a, b = rates[0], rates[1], rates[2], rates[3], rates[4], rates[5]
    for _ in range(n_steps):
        k1s = _sigmoid_growth(r_g, a, b, i) - r_c * s
        k1p = r_c * s - r_d * p
        k1i = r_p * p
        s2, p2, i2 = s + 0.5 * h * k1s, p + 0.5 * h * k1p, i + 0.5 * h * k1i
        k2s = _sigmoid_growth(r_g, a, b, i2) - r_c * s2
        k2p = r_c * s2 - r_d * p2
        k2i = r_p * p2
        s3, p3, i3 = s + 0.5 * h * k2s, p + 0.5 * h * k2p, i + 0.5 * h * k2i
        k3s = _sigmoid_growth(r_g, a, b, i3) - r_c * s3
        k3p = r_c * s3 - r_d * p3
        k3i = r_p * p3
        s4, p4, i4 = s + h * k3s, p + h * k3p, i + h * k3i
        k4s = _sigmoid_growth(r_g, a, b, i4) - r_c * s4
        k4p = r_c * s4 - r_d * p4
        k4i = r_p * p4
        s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
    return s, p, i


@numba.njit(cache=True)
def _rollout(resid, init, fractions, rates, n_steps, h, clamp):
    n = resid.shape[0]
    horizon = resid.shape[1] // 3
    states = np.empty((n, horizon, 3))
    pre_inhib = np.zeros((n, max(horizon - 1, 0)))
    for k in range(n):
        s = init[0] + resid[k, 0]
        p = init[1] + resid[k, 1]
        i = init[2] + resid[k, 2]
        if clamp:
            s, p, i = max(s, 0.0), max(p, 0.0), max(i, 0.0)
        states[k, 0, 0], states[k, 0, 1], states[k, 0, 2] = s, p, i
        for t in range(horizon - 1):
            pre_inhib[k, t] = i
            i = (1.0 - fractions[t]) * i
            s, p, i = _rk4(s, p, i, rates, n_steps, h)
            s += resid[k, 3 * (t + 1)]
            p += resid[k, 3 * (t + 1) + 1]
            i += resid[k, 3 * (t + 1) + 2]
            if clamp:
                s, p, i = max(s, 0.0), max(p, 0.0), max(i, 0.0)
            states[k, t + 1, 0], states[k, t + 1, 1], states[k, t + 1, 2] = s, p, i
    return states, pre_inhib


def integrate_period(params: FeedbackParams, state) -> np.ndarray:
    """RK4 solution after one period from ``state = (S, P, I)``."""
    s, p, i = (float(x) for x in state)
    if not all(math.isfinite(x) for x in (s, p, i)):
        raise NonFiniteState("initial state is not finite")
    out = np.array(_rk4(s, p, i, params.rates(), params.n_steps, params.step))
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("integration diverged")
    return out


def transition(params: FeedbackParams, state, fraction: float, residual) -> np.ndarray:
    """Dilute ``I``, integrate one period, add the residual, clamp at zero."""
    if not 0 <= fraction < 1:
        raise ValueError("dilution fraction must lie in [0, 1)")
    s, p, i = (float(x) for x in state)
    nxt = integrate_period(params, (s, p, (1.0 - fraction) * i)) + np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(nxt)):
        raise NonFiniteState("state became non-finite")
    return np.maximum(nxt, 0.0)


def reward(traj: Trajectory, policy: DilutionPolicy) -> float:
    """Final product value minus the cost of the removed inhibitor."""
    states = traj.states
    fractions = policy.fractions(states.shape[0])
    removed = float(np.sum(fractions * states[:-1, 2]))
    return policy.product_value * float(states[-1, 1]) - policy.dilution_cost * removed


class FeedbackPabn(PabnModel):
    """Negative-feedback PABN (``d_s = 3``, ``d_a = 1``) under a dilution policy."""

    n_states = N_STATES
    n_actions = 1

    def __init__(self, policy: DilutionPolicy | None = None, horizon: int = 5,
                 initial_state=(1.0, 0.0, 0.0), selector: OutputSelector | None = None,
                 clamp: bool = True):
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        self.policy = policy or DilutionPolicy()
        self.horizon = horizon
        self.initial_state = np.asarray(initial_state, dtype=float)
        self.selector = selector or OutputSelector.cumulative_reward()
        self.selector.validate(horizon, N_STATES)
        self.clamp = clamp
        self._fractions = self.policy.fractions(horizon)

    def residual_law(self, w: FeedbackParams) -> ResidualLaw:
        return w.law

    def _run(self, w: FeedbackParams, e: np.ndarray):
        e = np.ascontiguousarray(e, dtype=float)
        if e.ndim != 2 or e.shape[1] != self.n_inputs:
            raise ValueError(f"residual batch must be (n, {self.n_inputs}), got {e.shape}")
        return _rollout(e, self.initial_state, self._fractions, w.rates(), w.n_steps, w.step, self.clamp)

    def trajectory(self, w, residuals) -> Trajectory:
        states, pre = self._run(w, np.asarray(residuals, dtype=float).reshape(1, -1))
        states, pre = states[0], pre[0]
        rewards = np.zeros(self.horizon)
        rewards[:-1] = -self.policy.dilution_cost * self._fractions * pre
        rewards[-1] = self.policy.product_value * states[-1, 1]
        if not np.all(np.isfinite(states)):
            raise NonFiniteState("state became non-finite")
        return Trajectory(states, self._fractions.reshape(-1, 1), rewards)

    def simulate(self, w, residuals: np.ndarray) -> np.ndarray:
        states, pre = self._run(w, residuals)
        sel = self.selector
        if sel.kind == "state":
            y = states[:, sel.period - 1, sel.component - 1]
        else:
            y = self.policy.product_value * states[:, -1, 1] - self.policy.dilution_cost * (pre @ self._fractions)
        return self._check_outputs(y)


def default_params(corr: PhCorrelation | None = None, horizon: int = 5, **rates) -> FeedbackParams:
    corr = corr or PhCorrelation()
    return FeedbackParams(cov=np.kron(np.eye(horizon), corr.block()), **rates)
