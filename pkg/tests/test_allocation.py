import math

import numpy as np
import pytest

import sopabn.allocation as allocation
from sopabn.allocation import (AllocationBudget, InteractionTracker, algorithm2, confidence_interval, ghl,
                               pilot, select_group, z_value)
from sopabn.estimators import ExactValuer, all_pairs, delta_pair
from sopabn.exceptions import InsufficientSamples
from sopabn.sampling import stream


class ConstantValuer:
    """``g(U) = c * C(|U|, 2)``: its second difference, hence every Delta, is ``c``."""

    def __init__(self, value=1.0):
        self.value = value
        self.n_simulations = 0
        self.n_values = 0

    def __call__(self, w, masks, labels=()):
        self.n_values += len(masks)
        sizes = np.array([bin(m).count("1") for m in masks])
        return self.value * sizes * (sizes - 1) / 2


class NoisyPairValuer:
    """``g(U) = X * [a, b in U]`` with one ``X ~ N(0, sd^2)`` per call.

    For any order, Delta of ``{a, b}`` equals ``X`` and every other Delta is 0.
    """

    def __init__(self, pair=(0, 1), sd=10.0):
        self.bits = (1 << pair[0]) | (1 << pair[1])
        self.sd = sd
        self.n_simulations = 0
        self.n_values = 0

    def __call__(self, w, masks, labels=()):
        x = self.sd * stream(0, "noisy", *labels).standard_normal()
        self.n_values += len(masks)
        self.n_simulations += 3 * len(masks)
        return np.array([x if m & self.bits == self.bits else 0.0 for m in masks])


def _tracker(values_per_pair):
    pairs = all_pairs(3)[:len(values_per_pair)]
    t = InteractionTracker(pairs)
    for k, values in enumerate(values_per_pair):
        for v in values:
            t.add(k, v)
    return t


class TestTracker:
    def test_welford_matches_numpy(self, rng):
        x = rng.normal(3.0, 2.0, size=50)
        t = _tracker([x])
        assert t.mean[0] == pytest.approx(x.mean())
        assert t.sigma[0] == pytest.approx(x.std(ddof=1))
        assert t.sum_delta[0] == pytest.approx(x.sum())
        assert t.sum_sq[0] == pytest.approx(np.sum(x ** 2))

    def test_alternating_pilot(self):
        assert _tracker([[1, -1, 1, -1]]).sigma[0] == pytest.approx(math.sqrt(4 / 3))

    def test_freeze(self):
        t = _tracker([[1, -1, 1, -1]])
        t.freeze()
        t.add(0, 100.0)
        assert t.sigma[0] == pytest.approx(math.sqrt(4 / 3))
        assert t.running_sigma[0] > 10


class TestConfidenceInterval:
    def test_degenerate(self):
        assert confidence_interval(_tracker([[2.0, 2.0, 2.0]]), 0) == (2.0, 2.0)

    def test_arithmetic(self):
        a = math.sqrt(3.0)
        t = _tracker([[a, -a, a, -a]])
        assert t.sigma[0] == pytest.approx(2.0)
        lo, hi = confidence_interval(t, (0, 1), alpha=0.1)
        assert hi == pytest.approx(1.6448536, rel=1e-6) and lo == pytest.approx(-hi)

    def test_needs_two(self):
        with pytest.raises(InsufficientSamples):
            confidence_interval(_tracker([[1.0]]), 0)

    def test_z_value(self):
        assert z_value(0.1) == pytest.approx(1.6448536, rel=1e-7)
        with pytest.raises(ValueError):
            z_value(1.0)


class TestGhl:
    def test_arithmetic(self):
        a = math.sqrt(3.0)
        assert ghl(_tracker([[a, -a, a, -a]]), 0, 0.1) == pytest.approx(1.6448536 * 2 / 16, rel=1e-6)

    def test_zero_sigma(self):
        assert ghl(_tracker([[1.0, 1.0]]), 0) == 0.0

    def test_doubling(self):
        a = math.sqrt(3.0)
        t4 = _tracker([[a, -a] * 2])
        t8 = _tracker([[a, -a] * 4])
        # equal sigma needs a rescale for the ddof change
        ratio = (ghl(t4, 0) / t4.sigma[0]) / (ghl(t8, 0) / t8.sigma[0])
        assert ratio == pytest.approx(2 * math.sqrt(2))

    def test_decreasing_in_count(self, rng):
        x = rng.normal(size=200)
        vals = [ghl(_tracker([x[:n]]), 0) / _tracker([x[:n]]).sigma[0] for n in range(2, 200)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_needs_one(self):
        with pytest.raises(InsufficientSamples):
            ghl(InteractionTracker([(0, 1)]))


def _five_input_tracker(noisy_pair, scale=1.0):
    pairs = all_pairs(5)
    t = InteractionTracker(pairs)
    rng = stream(0, "five")
    for k, p in enumerate(pairs):
        sd = 5.0 if p == noisy_pair else 1.0 + 0.1 * k
        for v in rng.normal(0, sd, size=6):
            t.add(k, scale * v)
    return t


class TestSelectGroup:
    def test_leftmost_example(self):
        # inputs 1..5, order (3,1,2,5,4), argmax {2,4}: lead 2, group {{2,5},{2,4}}
        t = _five_input_tracker((1, 3))
        perm = (2, 0, 1, 4, 3)
        lead, group = select_group(t, perm, m=5, rule="leftmost")
        assert lead == 1
        assert {t.pairs[k] for k in group} == {(1, 4), (1, 3)}

    def test_whole_group_when_m_large(self):
        t = _five_input_tracker((1, 3))
        lead, group = select_group(t, (0, 1, 2, 3, 4), m=10, rule="unbiased", lead=0)
        assert lead == 1 and len(group) == 4
        assert {t.pairs[k] for k in group} == {(0, 1), (1, 2), (1, 3), (1, 4)}

    @pytest.mark.parametrize("rule", ["leftmost", "unbiased"])
    def test_single_member(self, rule):
        t = _five_input_tracker((2, 4))
        _, group = select_group(t, (4, 3, 2, 1, 0), m=1, rule=rule)
        assert [t.pairs[k] for k in group] == [(2, 4)]

    @pytest.mark.parametrize("rule", ["leftmost", "unbiased"])
    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_argmax_always_in_group(self, rule, m):
        t = _five_input_tracker((0, 4))
        best = t.index[(0, 4)]
        for perm in ((0, 1, 2, 3, 4), (4, 3, 2, 1, 0), (2, 4, 1, 0, 3)):
            for lead in (0, 1):
                _, group = select_group(t, perm, m, rule=rule, lead=lead)
                assert best in group and len(group) <= m and len(set(group)) == len(group)

    def test_leftmost_partners_follow_lead(self):
        t = _five_input_tracker((1, 3))
        perm = (3, 0, 2, 1, 4)
        lead, group = select_group(t, perm, 4, rule="leftmost")
        assert lead == 3
        for k in group:
            other = sum(t.pairs[k]) - lead
            assert perm.index(other) > perm.index(lead)

    @pytest.mark.parametrize("rule", ["leftmost", "unbiased"])
    def test_scale_invariance(self, rule):
        a, b = _five_input_tracker((1, 3)), _five_input_tracker((1, 3), scale=7.5)
        for perm in ((0, 1, 2, 3, 4), (3, 1, 4, 0, 2)):
            assert select_group(a, perm, 2, rule=rule) == select_group(b, perm, 2, rule=rule)

    def test_ties_prefer_fewer_samples(self):
        # all sigma zero, so every gHL ties at 0: the least sampled pair is served first
        t = InteractionTracker(all_pairs(3))
        for k, n in enumerate((4, 2, 6)):
            for _ in range(n):
                t.add(k, 1.0)
        _, group = select_group(t, (0, 1, 2), 1)
        assert t.pairs[group[0]] == (0, 2)

    def test_ties_lexicographic(self):
        t = InteractionTracker(all_pairs(3))
        for k in range(3):
            for _ in range(3):
                t.add(k, 1.0)
        _, group = select_group(t, (2, 1, 0), 1)
        assert t.pairs[group[0]] == (0, 1)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            select_group(_five_input_tracker((1, 3)), (0, 1, 2, 3, 4), 2, rule="nope")


class TestPilot:
    def test_constant_delta(self, d4):
        model, _, post = d4
        t = pilot(model, post, 5, valuer=ConstantValuer(2.5))
        np.testing.assert_array_equal(t.mean, 2.5)
        np.testing.assert_array_equal(t.sigma, 0.0)
        np.testing.assert_array_equal(t.count, 5)

    def test_equal_counts(self, d4):
        model, _, post = d4
        np.testing.assert_array_equal(pilot(model, post, 7, seed=3).count, 7)

    def test_needs_two(self, d4):
        model, _, post = d4
        with pytest.raises(ValueError):
            pilot(model, post, 1)


class TestAlgorithm2:
    def test_pilot_only(self, d4):
        model, _, post = d4
        res = algorithm2(model, post, AllocationBudget(30, 30), seed=1)
        np.testing.assert_array_equal(res.counts, 30)
        assert res.extra["allocated"] == 0

    def test_concentrates_on_noisy_pair(self, d4):
        model, _, post = d4
        res = algorithm2(model, post, AllocationBudget(300, 10, m=2), seed=2, valuer=NoisyPairValuer((0, 1)))
        k = res.pairs.index((0, 1))
        assert res.counts[k] == res.counts.max()
        assert res.counts[k] > 250

    @pytest.mark.parametrize("sampler", ["mc", "qmc"])
    @pytest.mark.parametrize("rule", ["unbiased", "leftmost"])
    def test_budget_conservation(self, d4, sampler, rule):
        model, _, post = d4
        groups = []
        original = allocation.select_group

        def recording(*args, **kwargs):
            out = original(*args, **kwargs)
            groups.append(len(out[1]))
            return out

        allocation.select_group = recording
        try:
            res = algorithm2(model, post, AllocationBudget(200, 10, m=3), seed=4, sampler=sampler, rule=rule)
        finally:
            allocation.select_group = original
        assert len(groups) == 190
        assert int(np.sum(res.counts - 10)) == sum(groups) == res.extra["allocated"]
        assert np.all(res.counts >= 10)

    def test_counts_monotone(self, d4, monkeypatch):
        model, _, post = d4
        snapshots = []
        original = allocation.select_group

        def recording(tracker, *args, **kwargs):
            snapshots.append(tracker.count.copy())
            return original(tracker, *args, **kwargs)

        monkeypatch.setattr(allocation, "select_group", recording)
        algorithm2(model, post, AllocationBudget(120, 5), seed=5)
        for a, b in zip(snapshots, snapshots[1:]):
            assert np.all(b >= a)

    def test_shared_terms_match_per_pair(self, d4, monkeypatch):
        # with a deterministic valuer every recorded Delta equals the per-pair evaluation bit for bit
        model, params, post = d4
        valuer = ExactValuer(model)
        calls = []
        original = allocation.select_group

        def recording(tracker, perm, *args, **kwargs):
            lead, group = original(tracker, perm, *args, **kwargs)
            calls.append((perm, lead, [tracker.pairs[k] for k in group]))
            return lead, group

        added = []
        original_add = InteractionTracker.add

        def add(self, k, delta):
            added.append((self.pairs[k], delta))
            original_add(self, k, delta)

        monkeypatch.setattr(allocation, "select_group", recording)
        monkeypatch.setattr(InteractionTracker, "add", add)
        algorithm2(model, post, AllocationBudget(80, 4, m=3), seed=6, valuer=valuer)
        stage2 = added[4 * 6:]
        expected = []
        for perm, lead, group in calls:
            for pair in group:
                j = sum(pair) - lead
                expected.append((pair, delta_pair(valuer, perm, lead, j, params)))
        assert stage2 == expected

    def test_exact_valuer_is_exact_for_degenerate_posterior(self, d4):
        from sopabn.oracle import exact_shapley_owen
        from sopabn.linear import value_table
        model, params, post = d4
        exact = exact_shapley_owen(value_table(model.decompose(params), params.law), 4)
        res = algorithm2(model, post, AllocationBudget(3000, 50), seed=7, valuer=ExactValuer(model))
        # permutation average of exact Deltas converges to the exact index
        for pair, est in res.as_dict().items():
            assert est == pytest.approx(exact[pair], abs=0.15)

    def test_max_simulations(self, d4):
        model, _, post = d4
        res = algorithm2(model, post, AllocationBudget(10 ** 9, 5), seed=8, max_simulations=3000)
        assert 3000 <= res.n_simulations < 3000 + 3 * 8

    def test_reproducible(self, d4):
        model, _, post = d4
        a = algorithm2(model, post, AllocationBudget(100, 10), seed=9, sampler="qmc")
        b = algorithm2(model, post, AllocationBudget(100, 10), seed=9, sampler="qmc")
        np.testing.assert_array_equal(a.estimates, b.estimates)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_freeze_sigma(self, d4):
        model, _, post = d4
        res = algorithm2(model, post, AllocationBudget(60, 10), seed=10, freeze_sigma=True)
        assert res.extra["tracker"].frozen_sigma is not None

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            AllocationBudget(5, 10)
        with pytest.raises(ValueError):
            AllocationBudget(10, 1)
        with pytest.raises(ValueError):
            AllocationBudget(10, 5, m=0)
