"""Frozen model instances shipped with the package.

The linear instances were drawn once with :func:`generate_linear_instance`
and written to ``data/*.yaml``; loading them never touches an RNG, so
experiments on them are reproducible across versions.
"""
from __future__ import annotations

from importlib import resources

import numpy as np
import yaml

from .linear import LinearModelParams, LinearPolicyReward, random_linear_instance
from .sampling import ParameterPosterior, format_slot, stream

SHIPPED = ("linear_d4", "linear_d6", "feedback")


def _read(name: str) -> dict:
    if name not in SHIPPED:
        raise KeyError(f"unknown shipped instance {name!r}; choose from {SHIPPED}")
    text = resources.files("sopabn").joinpath(f"data/{name}.yaml").read_text()
    return yaml.safe_load(text)


def transition_slots(params: LinearModelParams) -> list[str]:
    """Every ``beta_s`` and ``beta_a`` entry, in C order."""
    slots = []
    for name in ("beta_s", "beta_a"):
        for idx in np.ndindex(getattr(params, name).shape):
            slots.append(format_slot((name, idx)))
    return slots


def generate_linear_instance(n_states: int, n_actions: int, horizon: int, seed: int,
                             posterior_sd: float = 0.2, decimals: int = 4) -> dict:
    """Random linear instance with a diagonal Gaussian posterior on the transitions.

    Values are rounded to ``decimals`` places (the covariance is rounded and
    then checked for positive definiteness) so the frozen file is readable.
    """
    params, policy = random_linear_instance(n_states, n_actions, horizon, stream(seed, "instance"))
    cov = np.round(params.cov, decimals)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("rounded covariance is not positive definite; pick another seed")
    r = lambda a: np.round(np.asarray(a, dtype=float), decimals).tolist()
    slots = transition_slots(params)
    return {
        "params": {"mu_s": r(params.mu_s), "mu_a": r(params.mu_a), "beta_s": r(params.beta_s),
                   "beta_a": r(params.beta_a), "cov": cov.tolist()},
        "policy": {"theta": r(policy.theta), "m": r(policy.m), "b": r(policy.b), "c": r(policy.c)},
        "posterior": {"slots": slots, "sd": [posterior_sd] * len(slots)},
        "generator": {"seed": seed, "n_states": n_states, "n_actions": n_actions, "horizon": horizon,
                      "posterior_sd": posterior_sd},
    }


def linear_from_spec(spec: dict):
    """``(params, policy)`` from a ``{"params": ..., "policy": ...}`` mapping."""
    params = LinearModelParams(**{k: np.asarray(v, dtype=float) for k, v in spec["params"].items()})
    policy = LinearPolicyReward(**{k: np.asarray(v, dtype=float) for k, v in spec["policy"].items()})
    policy.check(params)
    return params, policy


def posterior_from_spec(base, spec: dict | None, degenerate: bool = False) -> ParameterPosterior:
    """Gaussian posterior from ``{"slots", "sd" | "cov", "mean"?}``; ``None`` is degenerate."""
    if spec is None or not spec.get("slots"):
        return ParameterPosterior(base)
    slots = list(spec["slots"])
    if degenerate:
        return ParameterPosterior(base, slots)
    if spec.get("cov") is not None:
        cov = np.asarray(spec["cov"], dtype=float)
    else:
        sd = np.broadcast_to(np.asarray(spec.get("sd", 0.0), dtype=float), (len(slots),))
        cov = np.diag(sd ** 2)
    return ParameterPosterior(base, slots, spec.get("mean"), cov)


def load_linear(name: str = "linear_d6", degenerate: bool = False):
    """``(params, policy, posterior)`` for a shipped linear instance."""
    spec = _read(name)
    params, policy = linear_from_spec(spec)
    return params, policy, posterior_from_spec(params, spec.get("posterior"), degenerate)


def feedback_defaults() -> dict:
    return _read("feedback")
