"""Exemplar memory and the class-balanced batch sampler used by stage-II."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet
from .errors import SpecError
from .seeding import rng_for


def fisher_yates_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Classic in-place shuffle; the exemplar-selection order contract."""
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


@dataclass
class ExemplarMemory:
    """Per-class store of retained raw samples from past steps."""

    per_class: dict[int, LabeledSet] = field(default_factory=dict)
    capacity: int = 10

    def classes(self) -> list[int]:
        return sorted(self.per_class)

    @property
    def n(self) -> int:
        return sum(s.n for s in self.per_class.values())

    def rows(self) -> LabeledSet:
        return LabeledSet.concat([self.per_class[c] for c in self.classes()])

    def merged_with(self, other: "ExemplarMemory") -> "ExemplarMemory":
        """New memory holding both class sets; class sets must not collide."""
        if other.capacity != self.capacity:
            raise SpecError("cannot merge memories with different capacities")
        dup = set(self.per_class) & set(other.per_class)
        if dup:
            raise SpecError(f"classes already in memory: {sorted(dup)}")
        merged = dict(self.per_class)
        merged.update(other.per_class)
        return ExemplarMemory(merged, self.capacity)


def select_exemplars(
    data: LabeledSet, m: int, seed: int, classes: list[int] | None = None
) -> ExemplarMemory:
    """Keep min(m, available) uniformly chosen samples per class.

    Selection takes the first m positions of a seeded Fisher-Yates shuffle of
    each class's row indices, so it is reproducible by an independent
    reference shuffle.
    """
    if m < 1:
        raise SpecError("exemplar capacity must be >= 1")
    classes = data.classes() if classes is None else classes
    store: dict[int, LabeledSet] = {}
    for c in sorted(classes):
        idx = np.flatnonzero(data.y == c)
        if len(idx) == 0:
            raise SpecError(f"class {c} has no samples to retain")
        order = fisher_yates_permutation(len(idx), rng_for(seed, "exemplar", c))
        store[int(c)] = data.subset(idx[order[:m]])
    return ExemplarMemory(store, m)


class BalancedSampler:
    """Epoch pools with an exactly uniform class histogram.

    Candidates are the union of the exemplar memory and the current novel
    data; classes short of ``per_class`` samples are drawn with replacement.
    Pools and batches are index-based so callers can reuse cached features.
    """

    def __init__(self, memory: ExemplarMemory | None, novel: LabeledSet | None, per_class: int):
        if per_class < 1:
            raise SpecError("per_class must be >= 1")
        parts = []
        if memory is not None and memory.per_class:
            parts.append(memory.rows())
        if novel is not None and novel.n:
            parts.append(novel)
        if not parts:
            raise SpecError("sampler needs a memory or a novel set")
        self.candidates = LabeledSet.concat(parts)
        self.per_class = per_class
        self.class_ids = self.candidates.classes()
        self._by_class = {c: np.flatnonzero(self.candidates.y == c) for c in self.class_ids}

    def epoch_pool_indices(self, seed: int, epoch: int) -> np.ndarray:
        picked = []
        for c in self.class_ids:
            cand = self._by_class[c]
            rng = rng_for(seed, "pool", epoch, c)
            if len(cand) >= self.per_class:
                picked.append(cand[rng.permutation(len(cand))[: self.per_class]])
            else:
                picked.append(cand[rng.integers(0, len(cand), size=self.per_class)])
        pool = np.concatenate(picked)
        return pool[rng_for(seed, "pool_order", epoch).permutation(len(pool))]

    def batches(self, seed: int, epoch: int, batch_size: int):
        pool = self.epoch_pool_indices(seed, epoch)
        for start in range(0, len(pool), batch_size):
            yield pool[start : start + batch_size]


def epoch_pool(memory: ExemplarMemory | None, novel: LabeledSet | None, per_class: int,
               seed: int, epoch: int = 0) -> LabeledSet:
    """The realized class-balanced pool for one epoch pass."""
    sampler = BalancedSampler(memory, novel, per_class)
    return sampler.candidates.subset(sampler.epoch_pool_indices(seed, epoch))


def balanced_batches(memory: ExemplarMemory | None, novel: LabeledSet | None, per_class: int,
                     seed: int, batch_size: int = 64, n_epochs: int = 1):
    """Yield (epoch, batch) pairs of class-balanced training batches."""
    sampler = BalancedSampler(memory, novel, per_class)
    for epoch in range(n_epochs):
        for idx in sampler.batches(seed, epoch, batch_size):
            yield epoch, sampler.candidates.subset(idx)
