import numpy as np
import pytest

from cilfuse.data import LabeledSet
from cilfuse.errors import SpecError
from cilfuse.memory import (
    BalancedSampler,
    ExemplarMemory,
    balanced_batches,
    epoch_pool,
    select_exemplars,
)
from cilfuse.seeding import rng_for


def make_set(counts: dict[int, int], p: int = 3) -> LabeledSet:
    xs, ys = [], []
    for label, n in sorted(counts.items()):
        xs.append(np.full((n, p), float(label)) + np.arange(n)[:, None] * 0.01)
        ys.append(np.full(n, label, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    z = np.zeros(len(y), dtype=np.int64)
    return LabeledSet(x, y, z, z)


class TestSelectExemplars:
    def test_class_with_exactly_m_keeps_all(self):
        data = make_set({0: 5, 1: 8})
        mem = select_exemplars(data, 5, seed=1)
        assert mem.per_class[0].n == 5 and mem.per_class[1].n == 5
        assert np.array_equal(np.sort(mem.per_class[0].x[:, 0]), np.sort(data.x[data.y == 0, 0]))

    def test_m_one(self):
        mem = select_exemplars(make_set({0: 4, 1: 4, 2: 4}), 1, seed=2)
        assert all(mem.per_class[c].n == 1 for c in (0, 1, 2))

    def test_matches_reference_fisher_yates(self):
        # independent reference shuffle consuming the same derived stream
        data = make_set({0: 12, 7: 9})
        m = 4
        mem = select_exemplars(data, m, seed=33)
        for c in (0, 7):
            idx = np.flatnonzero(data.y == c)
            rng = rng_for(33, "exemplar", c)
            order = list(range(len(idx)))
            for i in range(len(idx) - 1, 0, -1):
                j = int(rng.integers(0, i + 1))
                order[i], order[j] = order[j], order[i]
            expect = data.x[idx[np.array(order[:m])]]
            assert np.array_equal(mem.per_class[c].x, expect)

    def test_empty_class_rejected(self):
        with pytest.raises(SpecError):
            select_exemplars(make_set({0: 3}), 2, seed=0, classes=[0, 1])

    def test_deterministic(self):
        data = make_set({0: 9, 1: 9})
        a = select_exemplars(data, 3, seed=5)
        b = select_exemplars(data, 3, seed=5)
        assert np.array_equal(a.per_class[0].x, b.per_class[0].x)

    def test_merge_rejects_duplicates(self):
        data = make_set({0: 5, 1: 5})
        mem = select_exemplars(data, 2, seed=0)
        with pytest.raises(SpecError):
            mem.merged_with(select_exemplars(make_set({1: 5}), 2, seed=0))


class TestBalancedBatches:
    def test_pool_histogram_exactly_uniform(self):
        mem = select_exemplars(make_set({0: 20, 1: 20}), 10, seed=1)
        novel = make_set({2: 50, 3: 7})  # class 3 is under-provisioned
        pool = epoch_pool(mem, novel, 10, seed=4)
        counts = {c: int((pool.y == c).sum()) for c in (0, 1, 2, 3)}
        assert counts == {0: 10, 1: 10, 2: 10, 3: 10}

    def test_pool_is_permutation_when_counts_match(self):
        mem = select_exemplars(make_set({0: 10, 1: 10}), 10, seed=1)
        pool = epoch_pool(mem, None, 10, seed=2)
        assert sorted(map(tuple, pool.x)) == sorted(map(tuple, mem.rows().x))

    def test_single_class_pool(self):
        novel = make_set({5: 3})
        pool = epoch_pool(None, novel, 7, seed=1)
        assert pool.n == 7 and set(pool.y) == {5}

    def test_batches_cover_pool(self):
        novel = make_set({0: 6, 1: 6})
        got = list(balanced_batches(None, novel, 4, seed=3, batch_size=3, n_epochs=2))
        assert {e for e, _ in got} == {0, 1}
        per_epoch = sum(b.n for e, b in got if e == 0)
        assert per_epoch == 8

    def test_deterministic(self):
        novel = make_set({0: 6, 1: 6})
        a = epoch_pool(None, novel, 4, seed=9, epoch=2)
        b = epoch_pool(None, novel, 4, seed=9, epoch=2)
        assert np.array_equal(a.x, b.x)

    def test_needs_some_data(self):
        with pytest.raises(SpecError):
            BalancedSampler(None, None, 5)
