"""Experiment drivers behind the command line interface.

Each ``run_*`` function takes a validated :class:`ExperimentConfig` and
returns a list of :class:`Table`.  Macro-replication ``r`` always uses the
seed ``replication_seed(seed, r)``, so results do not depend on the number
of worker processes or the order in which replications finish.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import stats

from .allocation import AllocationBudget, algorithm2, z_value
from .config import ExperimentConfig, FeedbackSpec, ModelSpec, config_hash, parse_config, to_dict
from .estimators import InteractionResult, NestedBudget, algorithm1, all_pairs, prefix_masks
from .exceptions import ConfigError
from .feedback import DilutionPolicy, FeedbackPabn, FeedbackParams, PhCorrelation, STATE_NAMES
from .instances import linear_from_spec, load_linear, posterior_from_spec
from .linear import LinearPabn
from .oracle import GroundTruth, mse, posterior_truth
from .pabn import OutputSelector, unflatten_index
from .results import Table
from .sampling import derive_key, sample_permutation, stream

UNCAPPED = 10 ** 15


# -- model construction -----------------------------------------------------------

def _selector(spec: ModelSpec) -> OutputSelector:
    sel = spec.selector
    if sel.kind == "reward":
        return OutputSelector.cumulative_reward()
    return OutputSelector.state(sel.period, sel.component)


def build_problem(spec: ModelSpec, loadings=None):
    """``(model, posterior)`` described by a model block.

    ``loadings`` overrides the feedback pH loadings (dependence studies).
    """
    post_spec = spec.posterior.model_dump() if spec.posterior is not None else None
    degenerate = bool(post_spec and post_spec.pop("degenerate"))
    if spec.kind == "linear":
        if spec.instance is not None:
            params, policy, shipped = load_linear(spec.instance, degenerate=degenerate)
            posterior = shipped if post_spec is None else posterior_from_spec(params, post_spec, degenerate)
        else:
            lin = spec.linear.model_dump()
            params, policy = linear_from_spec({
                "params": {k: lin[k] for k in ("mu_s", "mu_a", "beta_s", "beta_a", "cov")},
                "policy": {k: lin[k] for k in ("theta", "m", "b", "c")}})
            posterior = posterior_from_spec(params, post_spec, degenerate)
        return LinearPabn(policy, _selector(spec)), posterior
    fb = spec.feedback or FeedbackSpec()
    corr = PhCorrelation(tuple(loadings if loadings is not None else fb.loadings), fb.ph_variance,
                         tuple(fb.own_variances))
    params = FeedbackParams(fb.r_g, fb.r_c, fb.r_d, fb.r_p, fb.a, fb.b, fb.period, fb.step,
                            cov=np.kron(np.eye(fb.horizon), corr.block()))
    policy = DilutionPolicy(fb.fraction, fb.dilution_cost, fb.product_value)
    model = FeedbackPabn(policy, fb.horizon, fb.initial_state, _selector(spec), fb.clamp)
    return model, posterior_from_spec(params, post_spec, degenerate)


def input_label(model, k: int) -> tuple[int, str]:
    """``(period, component name)`` of flat input ``k`` (both 1-based)."""
    t, n = unflatten_index(k, model.n_states)
    name = STATE_NAMES[n - 1] if isinstance(model, FeedbackPabn) else f"s{n}"
    return t, name


# -- budgets ----------------------------------------------------------------------

def replication_seed(seed: int, rep: int) -> int:
    return derive_key(seed, "replication", rep)[0]


def scale_ratio(ratio, product_budget: float) -> NestedBudget:
    """Levels ``max(1, round(r * c))`` with ``c = (B / prod(r))^(1/4)``.

    Raises :class:`ConfigError` for non-positive entries or a product above ``B``.
    """
    ratio = [float(r) for r in ratio]
    if len(ratio) != 4 or min(ratio) <= 0:
        raise ConfigError("a ratio has four positive entries K:M:N_O:N_I")
    if math.prod(ratio) > product_budget:
        raise ConfigError(f"ratio {ratio} does not fit the budget {product_budget}")
    c = (product_budget / math.prod(ratio)) ** 0.25
    K, M, n_outer, n_inner = (max(1, round(r * c)) for r in ratio)
    return NestedBudget(K, M, max(2, n_outer), n_inner)


def expected_masks(n_inputs: int, n_samples: int = 4000) -> float:
    """Mean number of distinct non-empty subsets one all-pairs iteration evaluates."""
    rng = stream(0, "expected-masks", n_inputs)
    pairs = all_pairs(n_inputs)
    total = 0
    for _ in range(n_samples):
        pos, prefix = prefix_masks(sample_permutation(n_inputs, rng))
        masks = set()
        for i, j in pairs:
            p = prefix[pos[i]] & ~(1 << j)
            masks.update((p | 1 << i | 1 << j, p | 1 << i, p | 1 << j, p))
        masks.discard(0)
        total += len(masks)
    return total / n_samples


def alg1_budget_for(ratio, simulations: float, n_inputs: int) -> NestedBudget:
    """Scale ``ratio`` so ``algorithm1`` uses about ``simulations`` trajectories."""
    product = simulations / expected_masks(n_inputs)
    return scale_ratio(ratio, max(product, math.prod(ratio)))


def pilot_size(simulations: float, m: int, fraction: float) -> int:
    # Stage-2 iterations cost at most 3 (2m + 2) trajectories
    return max(2, round(fraction * simulations / (3 * (2 * m + 2))))


def _mean_ci(values, alpha: float = 0.1) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()), float("nan")
    half = stats.t.ppf(1 - alpha / 2, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size)
    return float(values.mean()), float(half)


# -- replication fan-out ------------------------------------------------------------

def _fan_out(fn, tasks: list[tuple], threads: int) -> list:
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def _truth(cfg: ExperimentConfig, model, posterior) -> GroundTruth:
    k = cfg.truth.K_truth if cfg.truth is not None else 10_000
    return posterior_truth(model, posterior, k, seed=derive_key(cfg.seed, "truth")[0])


def _meta(cfg: ExperimentConfig, command: str, **more) -> dict:
    return {"command": command, "seed": cfg.seed, "config_hash": config_hash(cfg), **more}


# -- estimate ---------------------------------------------------------------------------

def run_algorithm(cfg: ExperimentConfig, model, posterior, seed: int) -> InteractionResult:
    alg = cfg.algorithm
    if alg.name == "alg1":
        a = alg.alg1
        res = algorithm1(model, posterior, NestedBudget(a.K, a.M, a.n_outer, a.n_inner), seed,
                         use_cache=a.use_cache)
        z = z_value(0.1)
        half = z * np.sqrt(np.maximum(res.variances, 0) / res.counts)
        res.extra["ci_low"], res.extra["ci_high"] = res.estimates - half, res.estimates + half
        return res
    a = alg.alg2
    return algorithm2(model, posterior, AllocationBudget(a.N, a.N0, a.m, a.alpha), seed, sampler=a.sampler,
                      freeze_sigma=a.freeze_sigma, rule=a.rule, max_simulations=a.max_simulations)


def run_estimate(cfg: ExperimentConfig) -> list[Table]:
    """One run of the configured algorithm; adds truth columns for linear models with a truth block."""
    model, posterior = build_problem(cfg.model)
    res = run_algorithm(cfg, model, posterior, cfg.seed)
    truth = _truth(cfg, model, posterior) if cfg.truth is not None else None
    cols = ["i", "j", "period_i", "component_i", "period_j", "component_j", "estimate", "count",
            "ci_lo", "ci_hi"]
    if truth is not None:
        cols += ["truth", "squared_error"]
    table = Table("estimate", cols)
    for k, (i, j) in enumerate(res.pairs):
        row = [i + 1, j + 1, *input_label(model, i), *input_label(model, j), res.estimates[k],
               res.counts[k], res.extra["ci_low"][k], res.extra["ci_high"][k]]
        if truth is not None:
            row += [truth.interactions[k], (res.estimates[k] - truth.interactions[k]) ** 2]
        table.add(*row)
    table.metadata = _meta(cfg, "estimate", algorithm=cfg.algorithm.name,
                           n_simulations=int(res.n_simulations))
    if truth is not None:
        table.metadata["mse"] = mse(res, truth)
    return [table]


def run_oracle(cfg: ExperimentConfig) -> list[Table]:
    """Posterior-averaged exact indices (pairs and single inputs) for a linear model."""
    if cfg.model.kind != "linear":
        raise ConfigError("the oracle needs a linear model")
    model, posterior = build_problem(cfg.model)
    truth = _truth(cfg, model, posterior)
    table = Table("oracle", ["kind", "i", "j", "period_i", "component_i", "period_j", "component_j",
                             "value", "standard_error"])
    for k, (i, j) in enumerate(truth.pairs):
        table.add("pair", i + 1, j + 1, *input_label(model, i), *input_label(model, j),
                  truth.interactions[k], truth.interaction_se[k])
    for i in range(model.n_inputs):
        table.add("input", i + 1, "", *input_label(model, i), "", "", truth.shapley[i], truth.shapley_se[i])
    table.metadata = _meta(cfg, "oracle", variance=truth.variance, K_truth=truth.n_draws)
    return [table]


# -- ablation -----------------------------------------------------------------------------

def _ablation_task(cfg_data: dict, ratio: tuple, rep: int):
    cfg = parse_config(cfg_data)
    model, posterior = build_problem(cfg.model)
    truth = _truth(cfg, model, posterior)
    budget = scale_ratio(ratio, cfg.ablation.budget)
    res = algorithm1(model, posterior, budget, replication_seed(cfg.seed, rep))
    return mse(res, truth), res.n_simulations


def run_ablation(cfg: ExperimentConfig) -> list[Table]:
    """``algorithm1`` MSE per ``K:M:N_O:N_I`` ratio at a fixed level-product budget."""
    if cfg.ablation is None:
        raise ConfigError("ablation block missing")
    if cfg.model.kind != "linear":
        raise ConfigError("the ablation scores against exact truth and needs a linear model")
    data = to_dict(cfg)
    tasks = [(data, tuple(r), rep) for r in cfg.ablation.ratios for rep in range(cfg.macro_replications)]
    out = _fan_out(_ablation_task, tasks, cfg.threads)
    reps = Table("ablation_replications", ["ratio", "replication", "mse", "n_simulations"])
    summary = Table("ablation", ["ratio", "K", "M", "N_O", "N_I", "mean_mse", "ci90_half_width",
                                 "mean_simulations"])
    results = dict(zip(((t[1], t[2]) for t in tasks), out))
    for r in cfg.ablation.ratios:
        label = ":".join(f"{x:g}" for x in r)
        mses = [results[(tuple(r), rep)][0] for rep in range(cfg.macro_replications)]
        sims = [results[(tuple(r), rep)][1] for rep in range(cfg.macro_replications)]
        for rep, (e, s) in enumerate(zip(mses, sims)):
            reps.add(label, rep, e, s)
        b = scale_ratio(r, cfg.ablation.budget)
        mean, half = _mean_ci(mses)
        summary.add(label, b.K, b.M, b.n_outer, b.n_inner, mean, half, float(np.mean(sims)))
    meta = _meta(cfg, "ablation", budget=cfg.ablation.budget, macro_replications=cfg.macro_replications)
    summary.metadata = reps.metadata = meta
    return [summary, reps]


# -- algorithm comparison ----------------------------------------------------------------

def _compare_task(cfg_data: dict, budget: int, rep: int):
    cfg = parse_config(cfg_data)
    spec = cfg.compare
    model, posterior = build_problem(cfg.model)
    truth = _truth(cfg, model, posterior)
    seed = replication_seed(cfg.seed, rep)
    out = []
    target = budget
    if spec.include_alg1:
        res = algorithm1(model, posterior, alg1_budget_for(spec.ratio, budget, model.n_inputs), seed)
        out.append(("alg1", mse(res, truth), res.n_simulations))
        target = res.n_simulations
    n0 = pilot_size(target, spec.m, spec.pilot_fraction)
    for sampler in spec.samplers:
        res = algorithm2(model, posterior, AllocationBudget(UNCAPPED, n0, spec.m, spec.alpha), seed,
                         sampler=sampler, freeze_sigma=spec.freeze_sigma, rule=spec.rule,
                         max_simulations=target)
        out.append((f"alg2_{sampler}", mse(res, truth), res.n_simulations))
    return out


def run_comparison(cfg: ExperimentConfig) -> list[Table]:
    """Matched-budget MSE of ``algorithm1`` and ``algorithm2`` (MC and/or QMC).

    Budgets count trajectory simulations.  ``algorithm1`` is scaled from its
    ratio to approximately the budget, then ``algorithm2`` runs until it has
    used as many simulations as ``algorithm1`` actually did.
    """
    if cfg.compare is None:
        raise ConfigError("compare block missing")
    if cfg.model.kind != "linear":
        raise ConfigError("the comparison scores against exact truth and needs a linear model")
    data = to_dict(cfg)
    tasks = [(data, b, rep) for b in cfg.compare.budgets for rep in range(cfg.macro_replications)]
    out = _fan_out(_compare_task, tasks, cfg.threads)
    reps = Table("compare_replications", ["budget", "replication", "method", "mse", "n_simulations"])
    by_method: dict = {}
    for (_, b, rep), runs in zip(tasks, out):
        for method, e, sims in runs:
            reps.add(b, rep, method, e, sims)
            by_method.setdefault((b, method), []).append(e)
    summary = Table("compare", ["budget", "method", "mean_mse", "ci90_half_width", "replications"])
    for (b, method), mses in sorted(by_method.items()):
        mean, half = _mean_ci(mses)
        summary.add(b, method, mean, half, len(mses))
    meta = _meta(cfg, "compare", macro_replications=cfg.macro_replications)
    summary.metadata = reps.metadata = meta
    return [summary, reps]


# -- nonlinear dependence study ---------------------------------------------------------

def _dependence_task(cfg_data: dict, level: str, rep: int):
    cfg = parse_config(cfg_data)
    spec = cfg.dependence
    model, posterior = build_problem(cfg.model, loadings=spec.levels[level])
    n0 = pilot_size(spec.budget, spec.m, spec.pilot_fraction)
    res = algorithm2(model, posterior, AllocationBudget(UNCAPPED, n0, spec.m, spec.alpha),
                     replication_seed(cfg.seed, rep), sampler=spec.sampler, rule=spec.rule,
                     max_simulations=spec.budget)
    return (res.pairs, res.estimates, res.counts, res.extra["ci_low"], res.extra["ci_high"],
            res.n_simulations)


def same_period_magnitudes(model, pairs, estimates) -> dict[int, float]:
    """Mean ``|estimate|`` over same-period pairs, per period."""
    acc: dict[int, list] = {}
    for (i, j), v in zip(pairs, estimates):
        ti, tj = input_label(model, i)[0], input_label(model, j)[0]
        if ti == tj:
            acc.setdefault(ti, []).append(abs(v))
    return {t: float(np.mean(v)) for t, v in sorted(acc.items())}


def run_dependence_study(cfg: ExperimentConfig) -> list[Table]:
    """``algorithm2`` on the feedback model at each pH-dependence level."""
    if cfg.dependence is None:
        raise ConfigError("dependence block missing")
    if cfg.model.kind != "feedback":
        raise ConfigError("the dependence study needs a feedback model")
    spec = cfg.dependence
    data = to_dict(cfg)
    tasks = [(data, level, rep) for level in spec.levels for rep in range(cfg.macro_replications)]
    out = _fan_out(_dependence_task, tasks, cfg.threads)
    model, _ = build_problem(cfg.model)
    long = Table("dependence", ["level", "l_S", "l_P", "l_I", "replication", "i", "j", "period_i", "component_i",
                                "period_j", "component_j", "same_period", "estimate", "count", "ci_lo", "ci_hi"])
    summary = Table("dependence_summary", ["level", "l_S", "l_P", "l_I", "replication", "period",
                                           "mean_abs_same_period", "n_simulations"])
    for (_, level, rep), (pairs, est, counts, lo, hi, sims) in zip(tasks, out):
        l = spec.levels[level]
        for k, (i, j) in enumerate(pairs):
            ti, ni = input_label(model, i)
            tj, nj = input_label(model, j)
            long.add(level, *l, rep, i + 1, j + 1, ti, ni, tj, nj, ti == tj, est[k], counts[k], lo[k], hi[k])
        per_period = same_period_magnitudes(model, pairs, est)
        summary.add(level, *l, rep, "all", float(np.mean(list(per_period.values()))), sims)
        for t, v in per_period.items():
            summary.add(level, *l, rep, t, v, sims)
    meta = _meta(cfg, "dependence", budget=spec.budget, macro_replications=cfg.macro_replications)
    long.metadata = summary.metadata = meta
    return [summary, long]


COMMANDS = {
    "estimate": run_estimate,
    "oracle": run_oracle,
    "ablation": run_ablation,
    "compare": run_comparison,
    "dependence": run_dependence_study,
}
