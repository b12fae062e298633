import numpy as np
import pytest

import cilfuse as cf
from cilfuse.data import (
    ClassGen,
    Component,
    LabeledSet,
    ScenarioSpec,
    build_scenario,
    gen_class_means,
    kmeans2,
    sample_set,
    scenario_from_json,
    scenario_from_rows,
    scenario_to_json,
    spacing_delta,
    split_overlap_samples_cluster,
    split_overlap_samples_random,
)
from cilfuse.errors import DegenerateDataError, SpecError


class TestGenClassMeans:
    def test_two_classes_1d_spacing(self):
        gens = gen_class_means(2, 1, seed=0)
        d = abs(gens[0].components[0].mean[0] - gens[1].components[0].mean[0])
        assert d >= spacing_delta(2, 1)

    def test_deterministic(self):
        a = gen_class_means(5, 3, seed=4)
        b = gen_class_means(5, 3, seed=4)
        for ga, gb in zip(a, b):
            assert np.array_equal(ga.components[0].mean, gb.components[0].mean)

    def test_all_pairwise_distances(self):
        gens = gen_class_means(40, 8, seed=7)
        delta = spacing_delta(40, 8)
        means = [g.components[0].mean for g in gens]
        for i in range(40):
            for j in range(i + 1, 40):
                assert np.linalg.norm(means[i] - means[j]) >= delta

    def test_too_few_classes(self):
        with pytest.raises(SpecError):
            gen_class_means(1, 2, seed=0)


class TestSampleSet:
    def test_tiny_std_collapses_to_mean(self):
        g = ClassGen(0, [Component(np.array([0.5, -0.25]), 1e-30, 1.0)], 2)
        s = sample_set([g], 10, seed=1)
        assert np.allclose(s.x, [0.5, -0.25], atol=1e-12)

    def test_counts(self):
        gens = gen_class_means(3, 2, seed=2)
        s = sample_set(gens, 1, seed=3)
        assert s.n == 3 and sorted(s.y) == [0, 1, 2]

    def test_empirical_mean_statistical(self):
        std = 0.15
        gens = gen_class_means(4, 3, seed=5, std=std)
        s = sample_set(gens, 500, seed=6)
        for g in gens:
            emp = s.x[s.y == g.label].mean(axis=0)
            assert np.linalg.norm(emp - g.components[0].mean) <= 3 * std / np.sqrt(500) * np.sqrt(3)

    def test_deterministic(self):
        gens = gen_class_means(3, 2, seed=2)
        assert np.array_equal(sample_set(gens, 5, seed=9).x, sample_set(gens, 5, seed=9).x)

    def test_per_class_streams_independent_of_class_list(self):
        gens = gen_class_means(4, 2, seed=2)
        full = sample_set(gens, 5, seed=9)
        only2 = sample_set([gens[2]], 5, seed=9)
        assert np.array_equal(full.x[full.y == 2], only2.x)


class TestBuildScenario:
    def test_disjoint_counts(self):
        sc = build_scenario(ScenarioSpec(kind="disjoint", n_base_classes=4, novel_steps=[2],
                                         per_class_train=10, per_class_val=4, per_class_test=6, seed=1, p=3))
        assert len(sc.all_labels()) == 6
        assert set(sc.base_labels) & set(sc.novel_labels[0]) == set()

    def test_full_overlap_subset(self):
        sc = build_scenario(ScenarioSpec(kind="full_overlap", n_base_classes=6, novel_steps=[3],
                                         per_class_train=10, per_class_val=4, per_class_test=6, seed=1, p=3))
        assert set(sc.novel_labels[0]) <= set(sc.base_labels)
        assert len(sc.all_labels()) == 6
        assert sc.overlap_labels[0] == sc.novel_labels[0]

    def test_overlap_random_inclusion_exclusion(self):
        sc = build_scenario(ScenarioSpec(kind="overlap_random", n_base_classes=8, novel_steps=[4], n_overlap=2,
                                         per_class_train=10, per_class_val=4, per_class_test=6, seed=1, p=3))
        assert len(sc.all_labels()) == 10
        assert len(sc.overlap_labels[0]) == 2

    def test_universes_and_counts(self):
        spec = ScenarioSpec(kind="overlap_random", n_base_classes=6, novel_steps=[3], n_overlap=1,
                            per_class_train=12, per_class_val=4, per_class_test=6, seed=2, p=3)
        sc = build_scenario(spec)
        universe = set(sc.all_labels())
        for role, upto in (("train", sc.train_upto(1)), ("val", sc.val_upto(1)), ("test", sc.test_upto(1))):
            assert set(upto.classes()) == universe, role
        # train pools: overlap classes split between the sides, others whole
        ov = sc.overlap_labels[0][0]
        n_ov_base = int((sc.train_base.y == ov).sum())
        n_ov_novel = int((sc.train_steps[0].y == ov).sum())
        assert n_ov_base + n_ov_novel == spec.per_class_train
        assert n_ov_base == 6 and n_ov_novel == 6
        # val/test of overlap classes stay whole in the base pools
        assert int((sc.test_base.y == ov).sum()) == spec.per_class_test

    def test_domain_split_half_spaces(self):
        sc = build_scenario(ScenarioSpec(kind="overlap_domain", n_base_classes=6, novel_steps=[3], n_overlap=1,
                                         per_class_train=10, per_class_val=4, per_class_test=6, seed=3, p=4))
        overlap = set(sc.overlap_labels[0])
        for g in sc.gens:
            if g.label in overlap:
                continue
            first = g.components[0].mean[0]
            if g.label in sc.base_labels:
                assert first > 0
            else:
                assert first < 0

    def test_style_split_components(self):
        sc = build_scenario(ScenarioSpec(kind="overlap_style", n_base_classes=5, novel_steps=[3], n_overlap=2,
                                         per_class_train=20, per_class_val=4, per_class_test=6, seed=4, p=3))
        for ov in sc.overlap_labels[0]:
            gen = next(g for g in sc.gens if g.label == ov)
            assert len(gen.components) == 2
            base_comp = sc.train_base.comp[sc.train_base.y == ov]
            novel_comp = sc.train_steps[0].comp[sc.train_steps[0].y == ov]
            assert set(base_comp) == {0} and set(novel_comp) == {1}

    def test_serialization_deterministic_and_roundtrip(self):
        spec = ScenarioSpec(kind="overlap_style", n_base_classes=5, novel_steps=[3], n_overlap=1,
                            per_class_train=8, per_class_val=4, per_class_test=6, seed=6, p=3)
        blob1 = scenario_to_json(build_scenario(spec))
        blob2 = scenario_to_json(build_scenario(spec))
        assert blob1 == blob2
        assert scenario_to_json(scenario_from_json(blob1)) == blob1

    def test_infeasible_specs(self):
        with pytest.raises(SpecError):
            ScenarioSpec(kind="full_overlap", n_base_classes=4, novel_steps=[5], seed=0, p=2)
        with pytest.raises(SpecError):
            ScenarioSpec(kind="overlap_random", n_base_classes=4, novel_steps=[2], n_overlap=3, seed=0, p=2)
        with pytest.raises(SpecError):
            ScenarioSpec(kind="disjoint", n_base_classes=4, novel_steps=[2], n_overlap=1, seed=0, p=2)


class TestSplitRandom:
    def _cls(self, n):
        z = np.zeros(n, dtype=np.int64)
        return LabeledSet(np.arange(n, dtype=np.float64).reshape(-1, 1), z, z, z)

    def test_even_split(self):
        b, n = split_overlap_samples_random(self._cls(10), seed=1)
        assert b.n == 5 and n.n == 5

    def test_odd_gives_base_extra(self):
        b, n = split_overlap_samples_random(self._cls(11), seed=1)
        assert b.n == 6 and n.n == 5

    def test_deterministic(self):
        b1, n1 = split_overlap_samples_random(self._cls(9), seed=3)
        b2, n2 = split_overlap_samples_random(self._cls(9), seed=3)
        assert np.array_equal(b1.x, b2.x) and np.array_equal(n1.x, n2.x)


class TestKmeans2:
    def test_separable_1d(self):
        x = np.array([[0.0], [0.1], [10.0], [10.1]])
        a = kmeans2(x, seed=0)
        assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]

    def test_two_points(self):
        a = kmeans2(np.array([[0.0], [1.0]]), seed=0)
        assert set(a) == {0, 1}

    def test_lloyd_fixed_point(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((20, 2))
        a = kmeans2(x, seed=1)
        cent = np.stack([x[a == k].mean(axis=0) for k in (0, 1)])
        d = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(np.argmin(d, axis=1), a)

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((30, 3))
        _, trace = kmeans2(x, seed=2, return_trace=True)
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))

    def test_identical_rows_rejected(self):
        with pytest.raises(DegenerateDataError):
            kmeans2(np.ones((5, 2)), seed=0)


class TestSplitCluster:
    def _two_mode(self, n0, n1):
        x = np.concatenate([np.zeros((n0, 2)), np.ones((n1, 2)) * 10])
        x += np.random.default_rng(0).normal(0, 0.01, size=x.shape)
        z = np.zeros(n0 + n1, dtype=np.int64)
        return LabeledSet(x, z, z, z)

    def test_modes_separated(self):
        s = self._two_mode(5, 5)
        b, n = split_overlap_samples_cluster(s, s.x, seed=0)
        assert {tuple(np.round(r)) for r in b.x} != {tuple(np.round(r)) for r in n.x}

    def test_larger_cluster_to_base(self):
        s = self._two_mode(6, 4)
        b, n = split_overlap_samples_cluster(s, s.x, seed=0)
        assert b.n == 6 and n.n == 4
        assert np.allclose(np.round(b.x), 0)

    def test_tie_goes_to_first_sample_cluster(self):
        s = self._two_mode(5, 5)
        b, _ = split_overlap_samples_cluster(s, s.x, seed=0)
        # sample 0 sits in the zero mode, so on a 5/5 tie that mode is base
        assert b.n == 5 and np.allclose(np.round(b.x), 0)


def test_scenario_from_rows_roundtrip():
    rng = np.random.default_rng(3)
    n_cls, per = 6, 20
    x = rng.standard_normal((n_cls * per, 4))
    y = np.repeat(np.arange(n_cls), per)
    rows = LabeledSet(x, y, np.zeros_like(y), np.zeros_like(y))
    spec = ScenarioSpec(kind="disjoint", n_base_classes=4, novel_steps=[2],
                        per_class_train=12, per_class_val=4, per_class_test=4, seed=0, p=4)
    sc = scenario_from_rows(rows, spec)
    assert sc.base_labels == [0, 1, 2, 3] and sc.novel_labels == [[4, 5]]
    assert sc.train_base.n == 4 * 12 and sc.test_upto(1).n == 6 * 4
    with pytest.raises(SpecError):
        scenario_from_rows(rows, ScenarioSpec(kind="disjoint", n_base_classes=6, novel_steps=[2],
                                              per_class_train=12, per_class_val=4, per_class_test=4, seed=0, p=4))
