import numpy as np
import pytest

import cilfuse as cf
from cilfuse.backbone import (
    ArchSpec,
    Block,
    Branch,
    ModelBundle,
    add_branch_stage1,
    all_branch_features,
    extract_features,
    finetune_k_blocks,
    full_finetune_baseline,
    head_logits,
    predict_branch,
    pretrain_base,
)
from cilfuse.data import ClassGen, Component, LabeledSet, ScenarioSpec, build_scenario, sample_set
from cilfuse.errors import SpecError
from cilfuse.linalg import Param, SgdConfig, params_digest
from tests.conftest import PRE_CFG, S1_CFG


def two_blob_set(n_per: int = 60, seed: int = 0) -> LabeledSet:
    gens = [
        ClassGen(0, [Component(np.array([-1.0, -1.0]), 0.2, 1.0)], 2),
        ClassGen(1, [Component(np.array([1.0, 1.0]), 0.2, 1.0)], 2),
    ]
    return sample_set(gens, n_per, seed=seed)


class TestPretrain:
    def test_separable_two_classes(self):
        data = two_blob_set()
        # separability oracle: the hand-fit boundary x0 + x1 = 0 is perfect
        hand = (data.x.sum(axis=1) > 0).astype(int)
        assert (hand == data.y).mean() == 1.0
        m = pretrain_base(data, ArchSpec(input_dim=2, trunk_dims=[8], branch_dims=[4]),
                          SgdConfig(epochs=20, decay_every=10, batch_size=16), seed=1)
        assert (predict_branch(m, data.x, "b") == data.y).mean() > 0.95

    def test_zero_epochs_uniform_softmax(self):
        # the uniform-logit reading holds for the plain linear head; a cosine
        # head spreads random logits by construction
        data = two_blob_set()
        arch = ArchSpec(input_dim=2, trunk_dims=[8], branch_dims=[4], normalize=False)
        m = pretrain_base(data, arch, SgdConfig(epochs=0), seed=2)
        z = head_logits(m, extract_features(m, data.x, "b"), "b")
        from cilfuse.linalg import ce_mean_and_grad
        loss, _ = ce_mean_and_grad(z, np.array([0, 1] * (data.n // 2)))
        assert abs(loss - np.log(2.0)) < 0.1

    def test_same_seed_bitwise_identical(self):
        data = two_blob_set()
        arch = ArchSpec(input_dim=2, trunk_dims=[8], branch_dims=[4])
        cfg = SgdConfig(epochs=5, decay_every=5, batch_size=16)
        d1 = params_digest(pretrain_base(data, arch, cfg, seed=3).params())
        d2 = params_digest(pretrain_base(data, arch, cfg, seed=3).params())
        assert d1 == d2

    def test_loss_mostly_non_increasing(self, small_run):
        log = small_run["model"].train_logs["pretrain"]
        drops = sum(1 for a, b in zip(log, log[1:]) if b <= a + 1e-9)
        assert drops / (len(log) - 1) >= 0.9


class TestExtractFeatures:
    def _identity_bundle(self, p: int) -> ModelBundle:
        arch = ArchSpec(input_dim=p, trunk_dims=[p], branch_dims=[p], normalize=False)
        blocks = [Block(Param(np.eye(p)), Param(np.zeros((1, p))))]
        branch = [Block(Param(np.eye(p)), Param(np.zeros((1, p))))]
        head = Param(np.eye(p))
        return ModelBundle(arch=arch, trunk=blocks, branches={"b": Branch(branch, head, list(range(p)))})

    def test_identity_network(self):
        m = self._identity_bundle(3)
        x = np.abs(np.random.default_rng(0).standard_normal((5, 3)))
        assert np.allclose(extract_features(m, x, "b"), x, atol=1e-15)

    def test_normalized_rows(self, small_run):
        m = small_run["model"]
        x = np.random.default_rng(1).standard_normal((10, m.arch.input_dim))
        h = extract_features(m, x, "b")
        assert np.abs(np.sqrt((h * h).sum(axis=1)) - 1.0).max() < 1e-12

    def test_logits_bounded_by_scale(self, small_run):
        m = small_run["model"]
        x = np.random.default_rng(2).standard_normal((10, m.arch.input_dim))
        z = head_logits(m, extract_features(m, x, "b"), "b")
        assert np.abs(z).max() <= m.arch.cosine_scale + 1e-9

    def test_unknown_branch(self, small_run):
        with pytest.raises(KeyError):
            extract_features(small_run["model"], np.zeros((1, 6)), "n9")


class TestStage1:
    def test_clone_identity_and_freezing(self, small_scenario):
        data = small_scenario
        m = pretrain_base(data.train_base, ArchSpec(input_dim=6, trunk_dims=[16], branch_dims=[8]),
                          SgdConfig(epochs=4, decay_every=4, batch_size=32), seed=4)
        frozen_digest = params_digest(m.params())
        add_branch_stage1(m, data.train_steps[0], SgdConfig(epochs=0), seed=5)
        # zero-epoch clone: new branch equals the base branch bitwise
        x = data.val_base.x[:20]
        feats = all_branch_features(m, x)
        assert np.array_equal(feats["b"], feats["n1"])
        base_params = [p for b in m.trunk for p in b.params()] + m.branches["b"].params()
        assert params_digest(base_params) == frozen_digest

    def test_training_keeps_prior_frozen(self, small_scenario):
        m = pretrain_base(small_scenario.train_base, ArchSpec(input_dim=6, trunk_dims=[16], branch_dims=[8]),
                          SgdConfig(epochs=4, decay_every=4, batch_size=32), seed=6)
        before = params_digest(m.params())
        add_branch_stage1(m, small_scenario.train_steps[0], SgdConfig(epochs=6, decay_every=6, batch_size=32), seed=7)
        prior = [p for b in m.trunk for p in b.params()] + m.branches["b"].params()
        assert params_digest(prior) == before

    def test_novel_accuracy_on_separable_classes(self):
        spec = ScenarioSpec(kind="disjoint", n_base_classes=6, novel_steps=[3], per_class_train=40,
                            per_class_val=8, per_class_test=20, seed=7, p=6, class_std=0.15)
        sc = build_scenario(spec)
        m = pretrain_base(sc.train_base, ArchSpec(input_dim=6, trunk_dims=[16], branch_dims=[8]),
                          SgdConfig(epochs=15, decay_every=6, batch_size=32), seed=1)
        add_branch_stage1(m, sc.train_steps[0], SgdConfig(epochs=15, decay_every=6, batch_size=32), seed=2)
        within = predict_branch(m, sc.test_steps[0].x, "n1")
        assert (within == sc.test_steps[0].y).mean() > 0.9

    def test_empty_novel_rejected(self, small_run):
        from cilfuse.data import LabeledSet
        with pytest.raises(SpecError):
            add_branch_stage1(small_run["model"], LabeledSet.empty(6), SgdConfig(epochs=1), seed=0)


class TestFinetuneKBlocks:
    def test_frozen_case_unchanged(self, small_run, small_scenario):
        m = small_run["model"]
        before = params_digest([p for b in m.trunk for p in b.params()]
                               + [p for b in m.branches["b"].blocks for p in b.params()])
        tuned, _ = finetune_k_blocks(m, small_scenario.train_steps[0], 0,
                                     SgdConfig(epochs=3, decay_every=3, batch_size=32), seed=8)
        after = params_digest([p for b in tuned.trunk for p in b.params()]
                              + [p for b in tuned.branches["b"].blocks for p in b.params()])
        assert after == before
        # the original is untouched in all cases
        assert "n1" in m.branches

    def test_full_unfreeze_boundary(self, small_run, small_scenario):
        m = small_run["model"]
        chain = len(m.trunk) + len(m.branches["b"].blocks)
        tuned, acc = finetune_k_blocks(m, small_scenario.train_steps[0], chain,
                                       SgdConfig(epochs=3, decay_every=3, batch_size=32), seed=9,
                                       eval_set=small_scenario.test_steps[0])
        assert 0.0 <= acc <= 1.0
        with pytest.raises(SpecError):
            finetune_k_blocks(m, small_scenario.train_steps[0], chain + 1, SgdConfig(epochs=1), seed=0)

    def test_weak_pretrain_trend(self):
        # with a weak base model, full finetuning should not lose to the
        # frozen representation (beyond noise) on novel accuracy
        wins = 0
        for seed in range(5):
            spec = ScenarioSpec(kind="disjoint", n_base_classes=4, novel_steps=[3],
                                per_class_train=30, per_class_val=5, per_class_test=15, seed=11, p=4)
            sc = build_scenario(spec)
            m = pretrain_base(sc.train_base, ArchSpec(input_dim=4, trunk_dims=[12], branch_dims=[8]),
                              SgdConfig(epochs=10, decay_every=5, batch_size=16), seed=seed)
            cfg = SgdConfig(epochs=12, decay_every=6, batch_size=16)
            chain = len(m.trunk) + len(m.branches["b"].blocks)
            _, acc0 = finetune_k_blocks(m, sc.train_steps[0], 0, cfg, seed=seed, eval_set=sc.test_steps[0])
            _, acc_all = finetune_k_blocks(m, sc.train_steps[0], chain, cfg, seed=seed, eval_set=sc.test_steps[0])
            if acc_all >= acc0 - 0.02:
                wins += 1
        assert wins >= 4


class TestFullFinetune:
    def test_zero_epochs_keeps_backbone(self, small_run, small_scenario):
        m = small_run["model"]
        backbone = [p for b in m.trunk for p in b.params()] + [
            p for b in m.branches["b"].blocks for p in b.params()
        ]
        before = params_digest(backbone)
        out = full_finetune_baseline(m, small_scenario.train_steps[0], SgdConfig(epochs=0), seed=1)
        out_backbone = [p for b in out.trunk for p in b.params()] + [
            p for b in out.branches["b"].blocks for p in b.params()
        ]
        assert params_digest(out_backbone) == before
        assert len(out.branches["b"].labels) == 16  # 12 base + 4 novel

    def test_forgetting_pattern(self, small_run, small_scenario):
        m = small_run["model"]
        out = full_finetune_baseline(m, small_scenario.train_steps[0],
                                     SgdConfig(epochs=15, decay_every=6, batch_size=32), seed=2)
        pred_base = predict_branch(out, small_scenario.test_base.x, "b")
        pred_novel = predict_branch(out, small_scenario.test_steps[0].x, "b")
        assert (pred_base == small_scenario.test_base.y).mean() < 0.3
        assert (pred_novel == small_scenario.test_steps[0].y).mean() > 0.7
