"""Shared fixtures: a small scenario and trained pipeline states.

Unit tests run on a deliberately small scenario (fast, seconds); the
acceptance suite builds the full reference scenario itself.
"""

from __future__ import annotations

import numpy as np
import pytest

import cilfuse as cf
from cilfuse.seeding import derive_seed

SMALL_SPEC = dict(
    kind="disjoint",
    n_base_classes=12,
    novel_steps=[4],
    per_class_train=40,
    per_class_val=10,
    per_class_test=20,
    seed=5,
    p=6,
)

SMALL_ARCH = dict(input_dim=6, trunk_dims=[32, 32], branch_dims=[16])

PRE_CFG = cf.SgdConfig(epochs=40, decay_every=15, batch_size=32)
S1_CFG = cf.SgdConfig(epochs=20, decay_every=8, batch_size=32)
S2_CFG = cf.SgdConfig(base_lr=0.7, epochs=10, decay_every=4, decay_factor=0.3, batch_size=32)


@pytest.fixture(scope="session")
def small_scenario():
    return cf.build_scenario(cf.ScenarioSpec(**SMALL_SPEC))


def build_small_run(scenario, seed: int) -> dict:
    m = cf.pretrain_base(scenario.train_base, cf.ArchSpec(**SMALL_ARCH), PRE_CFG, derive_seed(seed, "pre"))
    cf.add_branch_stage1(m, scenario.train_steps[0], S1_CFG, derive_seed(seed, "s1"))
    mem = cf.select_exemplars(scenario.train_base, 10, derive_seed(seed, "mem"))
    return {"model": m, "memory": mem, "seed": seed}


@pytest.fixture(scope="session")
def small_run(small_scenario):
    """One pretrained + stage-I model with exemplar memory."""
    return build_small_run(small_scenario, seed=1)


@pytest.fixture(scope="session")
def small_runs(small_scenario):
    """Five-seed versions for the empirical ordering tests."""
    return [build_small_run(small_scenario, seed=s) for s in range(1, 6)]
