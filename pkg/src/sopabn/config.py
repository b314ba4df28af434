"""Experiment configuration: YAML text validated by a strict pydantic schema.

Unknown keys are rejected everywhere and numeric preconditions of the
algorithms are checked at parse time, so a config that loads will run.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError

MAX_SEED = 2 ** 64 - 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SelectorSpec(_Block):
    kind: Literal["reward", "state"] = "reward"
    period: Optional[int] = Field(None, ge=1)
    component: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "state" and (self.period is None or self.component is None):
            raise ValueError("state selector needs period and component")
        if self.kind == "reward" and (self.period is not None or self.component is not None):
            raise ValueError("reward selector takes no period/component")
        return self


class PosteriorSpec(_Block):
    slots: list[str] = []
    mean: Optional[list[float]] = None
    sd: Optional[list[float]] = None
    cov: Optional[list[list[float]]] = None
    degenerate: bool = False

    @model_validator(mode="after")
    def _check(self):
        n = len(self.slots)
        if self.sd is not None and self.cov is not None:
            raise ValueError("give either sd or cov, not both")
        if self.sd is not None and (len(self.sd) != n or min(self.sd, default=0) < 0):
            raise ValueError("sd needs one nonnegative entry per slot")
        if self.cov is not None and (len(self.cov) != n or any(len(r) != n for r in self.cov)):
            raise ValueError("cov must be square with one row per slot")
        if self.mean is not None and len(self.mean) != n:
            raise ValueError("mean needs one entry per slot")
        return self


class LinearSpec(_Block):
    mu_s: list[list[float]]
    mu_a: list[list[float]]
    beta_s: list[list[list[float]]]
    beta_a: list[list[list[float]]]
    cov: list[list[float]]
    theta: list[list[list[float]]]
    m: list[float]
    b: list[list[float]]
    c: list[list[float]]


class FeedbackSpec(_Block):
    r_g: float = Field(1.0, ge=0)
    r_c: float = Field(0.3, ge=0)
    r_d: float = Field(0.1, ge=0)
    r_p: float = Field(0.2, ge=0)
    a: float = 2.0
    b: float = 1.5
    period: float = Field(1.0, gt=0)
    step: float = Field(0.01, gt=0)
    horizon: int = Field(5, ge=2)
    initial_state: tuple[float, float, float] = (1.0, 0.0, 0.0)
    fraction: float = Field(0.5, ge=0, lt=1)
    dilution_cost: float = 0.1
    product_value: float = 1.0
    loadings: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ph_variance: float = Field(0.04, ge=0)
    own_variances: tuple[float, float, float] = (0.04, 0.04, 0.04)
    clamp: bool = True

    @model_validator(mode="after")
    def _check(self):
        ratio = self.period / self.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("period must be an integer multiple of step")
        if min(self.own_variances) <= 0:
            raise ValueError("own_variances must be positive")
        return self


class ModelSpec(_Block):
    kind: Literal["linear", "feedback"] = "linear"
    instance: Optional[str] = None
    linear: Optional[LinearSpec] = None
    feedback: Optional[FeedbackSpec] = None
    posterior: Optional[PosteriorSpec] = None
    selector: SelectorSpec = SelectorSpec()

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "linear":
            if self.feedback is not None:
                raise ValueError("feedback block given for a linear model")
            if (self.instance is None) == (self.linear is None):
                raise ValueError("linear model needs exactly one of instance or linear")
            if self.instance is not None and self.instance not in ("linear_d4", "linear_d6"):
                raise ValueError(f"unknown linear instance {self.instance!r}")
        else:
            if self.linear is not None or self.instance is not None:
                raise ValueError("feedback model takes a feedback block only")
        return self


class Alg1Spec(_Block):
    K: int = Field(6, ge=1)
    M: int = Field(3, ge=1)
    n_outer: int = Field(6, ge=2)
    n_inner: int = Field(1, ge=1)
    use_cache: bool = True


class Alg2Spec(_Block):
    N: int = Field(1000, ge=2)
    N0: int = Field(20, ge=2)
    m: int = Field(2, ge=1)
    alpha: float = Field(0.1, gt=0, lt=1)
    sampler: Literal["mc", "qmc"] = "mc"
    freeze_sigma: bool = False
    rule: Literal["unbiased", "leftmost"] = "unbiased"
    max_simulations: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.N0 > self.N:
            raise ValueError("N0 must not exceed N")
        return self


class AlgorithmSpec(_Block):
    name: Literal["alg1", "alg2"] = "alg2"
    alg1: Alg1Spec = Alg1Spec()
    alg2: Alg2Spec = Alg2Spec()


class TruthSpec(_Block):
    K_truth: int = Field(10_000, ge=1)


def _positive_ratio(r: list[float]) -> list[float]:
    if len(r) != 4 or min(r) <= 0:
        raise ValueError("a ratio has four positive entries K:M:N_O:N_I")
    return r


class AblationSpec(_Block):
    budget: int = Field(30_000, ge=1)
    ratios: list[list[float]] = [[6, 3, 6, 1]]

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v):
        if not v:
            raise ValueError("at least one ratio required")
        for r in v:
            _positive_ratio(r)
        return v

    @model_validator(mode="after")
    def _fits(self):
        for r in self.ratios:
            if math.prod(r) > self.budget:
                raise ValueError(f"ratio {r} has a product above the budget {self.budget}")
        return self


class CompareSpec(_Block):
    budgets: list[int] = [300_000]
    ratio: list[float] = [6, 3, 6, 1]
    samplers: list[Literal["mc", "qmc"]] = ["mc"]
    include_alg1: bool = True
    pilot_fraction: float = Field(0.02, gt=0, le=1)
    m: int = Field(2, ge=1)
    alpha: float = Field(0.1, gt=0, lt=1)
    rule: Literal["unbiased", "leftmost"] = "unbiased"
    freeze_sigma: bool = False

    @field_validator("ratio")
    @classmethod
    def _ratio(cls, v):
        return _positive_ratio(v)

    @field_validator("budgets")
    @classmethod
    def _budgets(cls, v):
        if not v or min(v) < 100:
            raise ValueError("budgets must be at least 100 trajectory simulations")
        return v

    @field_validator("samplers")
    @classmethod
    def _samplers(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("duplicate sampler")
        return v


class DependenceSpec(_Block):
    levels: dict[str, tuple[float, float, float]] = {
        "none": (0.0, 0.0, 0.0), "low": (-0.5, 0.5, 0.5), "strong": (-1.0, 1.0, 1.0)}
    budget: int = Field(1_000_000, ge=100)
    pilot_fraction: float = Field(0.02, gt=0, le=1)
    m: int = Field(2, ge=1)
    alpha: float = Field(0.1, gt=0, lt=1)
    sampler: Literal["mc", "qmc"] = "mc"
    rule: Literal["unbiased", "leftmost"] = "unbiased"


class ExperimentConfig(_Block):
    seed: int = Field(0, ge=0, le=MAX_SEED)
    macro_replications: int = Field(1, ge=1)
    threads: int = Field(1, ge=1)
    model: ModelSpec = ModelSpec(instance="linear_d6")
    algorithm: AlgorithmSpec = AlgorithmSpec()
    truth: Optional[TruthSpec] = None
    ablation: Optional[AblationSpec] = None
    compare: Optional[CompareSpec] = None
    dependence: Optional[DependenceSpec] = None

    @model_validator(mode="after")
    def _check(self):
        if self.dependence is not None and self.model.kind != "feedback":
            raise ValueError("dependence study needs a feedback model")
        if self.truth is not None and self.model.kind != "linear":
            raise ValueError("exact truth is only available for linear models")
        return self


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data) -> ExperimentConfig:
    """Validate a mapping (or YAML text) into an :class:`ExperimentConfig`."""
    if isinstance(data, str):
        try:
            data = yaml.safe_load(data)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json", exclude_none=True)


def dump_config(cfg: ExperimentConfig) -> str:
    """YAML text that parses back to an equal config."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=None, width=100)


def config_hash(cfg: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form.

    ``threads`` is left out: it never changes the results.
    """
    data = to_dict(cfg)
    data.pop("threads", None)
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def with_overrides(cfg: ExperimentConfig, **fields) -> ExperimentConfig:
    data = to_dict(cfg)
    data.update({k: v for k, v in fields.items() if v is not None})
    return parse_config(data)
