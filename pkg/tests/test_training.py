import json

import numpy as np
import pytest
import torch

from crreid.data import AugmentationConfig, make_fixture, make_mlr_training_set
from crreid.errors import DataError, DomainError, NumericError
from crreid.model import ModelConfig, ResolutionAdaptiveNet, state_digest
from crreid.training import (
    END_TO_END,
    PROGRESSIVE,
    OptimizerConfig,
    build_stage_plan,
    enter_stage,
    learning_rate,
    sample_pairs,
    split_epochs,
    train,
    train_step,
)

SIZE = (32, 16)


@pytest.fixture(scope="module")
def small_set():
    recs = make_fixture(num_identities=4, images_per_camera=2, cameras=2, size=SIZE, seed=3)
    return make_mlr_training_set(recs, [2, 3, 4], size=SIZE, augmentation=AugmentationConfig(SIZE, 2, 0.5))


def small_config(channels=(8, 8), **kw):
    return ModelConfig(block_channels=channels, input_size=SIZE, embedding_dims=(4, 4, 4, 4), num_classes=4, **kw)


def fresh_model(seed=0, **kw):
    torch.manual_seed(seed)
    return ResolutionAdaptiveNet(small_config(**kw))


class TestLearningRate:
    def test_published_schedule(self):
        assert learning_rate(20) == pytest.approx(3.5e-4, rel=1e-12)
        assert learning_rate(40) == pytest.approx(3.5e-4, rel=1e-12)
        assert learning_rate(41) == pytest.approx(3.5e-5, rel=1e-12)
        assert learning_rate(70) == pytest.approx(3.5e-5, rel=1e-12)
        assert learning_rate(71) == pytest.approx(3.5e-6, rel=1e-12)
        assert learning_rate(119) == pytest.approx(3.5e-6, rel=1e-12)

    def test_warmup_endpoints(self):
        assert learning_rate(0) == pytest.approx(3.5e-5, rel=1e-12)
        assert learning_rate(5) == pytest.approx(3.5e-5 + 0.5 * (3.5e-4 - 3.5e-5), rel=1e-12)
        assert learning_rate(10) == pytest.approx(3.5e-4, rel=1e-12)

    def test_monotone_after_warmup(self):
        lrs = [learning_rate(e) for e in range(10, 120)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        for e in (-1, 120):
            with pytest.raises(DomainError):
                learning_rate(e)


class TestStagePlan:
    def test_single_block(self):
        plan = build_stage_plan(1, 5)
        assert len(plan.stages) == 1
        assert plan.stages[0].frozen_masks == ()

    def test_four_blocks_stage_three(self):
        s3 = build_stage_plan(4, 10).stages[2]
        assert s3.trainable_masks == (3,)
        assert s3.frozen_masks == (1, 2)
        assert s3.uninitialized_masks == (4,)

    def test_two_blocks_enumerated(self):
        s1, s2 = build_stage_plan(2, 3).stages
        assert (s1.trainable_masks, s1.frozen_masks) == ((1,), ())
        assert (s2.trainable_masks, s2.frozen_masks) == ((2,), (1,))

    def test_end_to_end_single_stage(self):
        plan = build_stage_plan(4, [1, 2, 3, 4], END_TO_END)
        assert len(plan.stages) == 1
        assert plan.stages[0].trainable_masks == (1, 2, 3, 4)
        assert plan.total_iterations == 10

    def test_every_mask_trained_once(self):
        for L in range(1, 6):
            plan = build_stage_plan(L, 2)
            trained = [l for s in plan.stages for l in s.trainable_masks]
            assert sorted(trained) == list(range(1, L + 1))
            for s in plan.stages:
                assert set(s.frozen_masks) == set(range(1, s.index))

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            build_stage_plan(0, 1)
        with pytest.raises(DomainError):
            build_stage_plan(2, [1])
        with pytest.raises(DomainError):
            build_stage_plan(2, 1, "sideways")

    def test_split_epochs(self):
        assert split_epochs(120, 4) == [30, 30, 30, 30]
        assert split_epochs(10, 3) == [4, 3, 3]
        with pytest.raises(DomainError):
            split_epochs(2, 3)


class TestSamplePairs:
    def test_balanced(self):
        q = np.array([0, 1, 2, 0])
        g = np.array([0, 3, 2, 1])
        i, j, y = sample_pairs(q, g, np.random.default_rng(0))
        pos = {(a, b) for a, b, t in zip(i, j, y) if t == 1}
        assert pos == {(0, 0), (1, 3), (2, 2), (3, 0)}
        assert (y == 0).sum() == 4
        assert all(q[a] != g[b] for a, b, t in zip(i, j, y) if t == 0)


class TestTrainStep:
    def batch(self, ds, n=6, seed=0):
        return ds.sample_batch(n, np.random.default_rng(seed))

    def test_zero_lr_keeps_parameters(self, small_set):
        model = fresh_model()
        enter_stage(model, build_stage_plan(2, 1).stages[0], torch.Generator().manual_seed(1))
        before = {k: v.clone() for k, v in model.named_parameters()}
        opt = torch.optim.Adam(model.parameters(), lr=0.0)
        losses = train_step(self.batch(small_set), model, opt)
        assert np.isfinite(losses.total) and losses.total > 0
        for k, v in model.named_parameters():
            assert torch.equal(v, before[k]), k

    def test_frozen_mask_bit_identical(self, small_set):
        model = fresh_model()
        g = torch.Generator().manual_seed(1)
        s1, s2 = build_stage_plan(2, 1).stages
        enter_stage(model, s1, g)
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        train_step(self.batch(small_set), model, opt, s1)
        enter_stage(model, s2, g)
        frozen = model.masks.param(1).detach().clone()
        trained = model.masks.param(2).detach().clone()
        for seed in range(3):
            train_step(self.batch(small_set, seed=seed), model, opt, s2)
        assert torch.equal(model.masks.param(1), frozen)
        assert not torch.equal(model.masks.param(2), trained)

    def test_seeded_trajectory(self, small_set):
        def run():
            model = fresh_model(seed=5)
            enter_stage(model, build_stage_plan(2, 1).stages[0], torch.Generator().manual_seed(6))
            opt = torch.optim.Adam(model.parameters(), lr=1e-3)
            rng = np.random.default_rng(0)
            return [train_step(self.batch(small_set, seed=s), model, opt, rng=rng) for s in range(2)]

        assert run() == run()

    def test_empty_batch(self):
        model = fresh_model()
        with pytest.raises(DomainError):
            train_step([], model, torch.optim.Adam(model.parameters()))

    def test_non_finite_loss(self, small_set):
        model = fresh_model()
        batch = self.batch(small_set)
        batch[0].query_image[:] = np.nan
        with pytest.raises(NumericError):
            train_step(batch, model, torch.optim.Adam(model.parameters()))


class TestTrain:
    cfg = OptimizerConfig(base_lr=1e-3, decay_epochs=(), warmup_epochs=0, epochs=4, batch_size=8)

    def test_end_to_end_trains_every_mask(self, small_set):
        res = train(small_set, small_config(channels=(8, 8, 8, 8)), self.cfg, mode=END_TO_END, steps_per_epoch=1)
        assert len(res.stage_log) == 1
        assert res.stage_log[0]["trained_masks"] == [1, 2, 3, 4]
        assert all(res.model.masks.param(l).requires_grad for l in (1, 2, 3, 4))

    def test_single_block_modes_agree(self, small_set):
        a = train(small_set, small_config(channels=(8,)), self.cfg, mode=PROGRESSIVE, steps_per_epoch=2)
        b = train(small_set, small_config(channels=(8,)), self.cfg, mode=END_TO_END, steps_per_epoch=2)
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
        assert state_digest(a.model) == state_digest(b.model)

    def test_seeded_runs_identical(self, small_set, tmp_path):
        logs = []
        for name in ("a", "b"):
            with open(tmp_path / f"{name}.jsonl", "w") as f:
                res = train(small_set, small_config(), self.cfg, seed=3, steps_per_epoch=2, log_file=f)
            logs.append((tmp_path / f"{name}.jsonl").read_bytes())
            logs.append(state_digest(res.model))
        assert logs[0] == logs[2] and logs[1] == logs[3]
        first = json.loads(logs[0].decode().splitlines()[0])
        assert set(first) == {"step", "epoch", "stage", "lr", "cls", "verif", "total"}

    def test_loss_decreases_over_200_steps(self, small_set):
        cfg = OptimizerConfig(base_lr=1e-3, decay_epochs=(), warmup_epochs=0, epochs=20, batch_size=8)
        res = train(small_set, small_config(), cfg, steps_per_epoch=10, seed=0)
        totals = [h["total"] for h in res.history]
        assert len(totals) == 200
        assert np.mean(totals[-20:]) < np.mean(totals[:20])
        assert all(s["frozen_unchanged"] for s in res.stage_log)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train(None, small_config(), self.cfg)

    def test_no_mask_ablation_leaves_masks_unused(self, small_set):
        res = train(small_set, small_config(use_masks=False), self.cfg, steps_per_epoch=1)
        assert all(not res.model.masks.active(l) for l in (1, 2))
        assert all(s["trained_masks"] == [] for s in res.stage_log)
