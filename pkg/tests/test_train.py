"""Training loop: schedule, optimizer, determinism, resume, failure modes."""

import numpy as np
import pytest
import torch

from sci3d.backbone import EncoderConfig
from sci3d.checkpoint import STAGE_PRETRAIN, Checkpoint
from sci3d.models import ModelConfig, build_model
from sci3d.train import (
    NumericError,
    TrainConfig,
    load_into_model,
    lr_at_epoch,
    sgd_step,
    train,
)

SMALL_ENC = EncoderConfig((8, 16), (1, 1), (2, 2), stem_width=4)


def model_config(**kw):
    base = dict(
        variant="sci3d_single",
        head="fc",
        num_classes=9,
        clip_len=8,
        dropout=0.0,
        lstm_hidden=8,
        seed=3,
        encoder=SMALL_ENC,
    )
    base.update(kw)
    return ModelConfig(**base)


def train_config(**kw):
    base = dict(epochs=1, batch_size=4, base_lr=0.05, dropout=0.0, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_paper_values(self):
        cfg = TrainConfig(base_lr=0.0025, lr_drop_epochs=(90, 100))
        assert abs(lr_at_epoch(cfg, 0) - 0.0025) < 1e-12
        assert abs(lr_at_epoch(cfg, 95) - 0.00025) < 1e-12
        assert abs(lr_at_epoch(cfg, 105) - 0.000025) < 1e-12

    def test_piecewise_constant_boundaries(self):
        cfg = TrainConfig(base_lr=0.1, lr_drop_epochs=(10,), lr_drop_factor=10.0)
        assert lr_at_epoch(cfg, 9) == pytest.approx(0.1)
        assert lr_at_epoch(cfg, 10) == pytest.approx(0.01)

    def test_linear_scaling(self):
        small = TrainConfig(base_lr=0.01, batch_size=8, reference_batch=8)
        big = TrainConfig(base_lr=0.01, batch_size=16, reference_batch=8)
        assert lr_at_epoch(big, 0) == pytest.approx(2 * lr_at_epoch(small, 0))

    def test_negative_epoch(self):
        with pytest.raises(ValueError, match="epoch"):
            lr_at_epoch(TrainConfig(), -1)


class TestSgdStep:
    def test_first_hand_value(self):
        p, v = sgd_step(1.0, 1.0, 0.0, lr=0.1, momentum=0.9)
        assert abs(float(p) - 0.9) < 1e-12
        assert abs(float(v) - 1.0) < 1e-12

    def test_second_hand_value(self):
        p, v = sgd_step(1.0, 1.0, 0.0, lr=0.1, momentum=0.9)
        p, v = sgd_step(p, 1.0, v, lr=0.1, momentum=0.9)
        assert abs(float(p) - 0.71) < 1e-12
        assert abs(float(v) - 1.9) < 1e-12

    def test_zero_grad_zero_velocity_is_identity(self):
        p, v = sgd_step(2.5, 0.0, 0.0, lr=0.1, momentum=0.9)
        assert float(p) == 2.5 and float(v) == 0.0

    def test_zero_lr_updates_velocity_only(self):
        p, v = sgd_step(1.0, 3.0, 0.5, lr=0.0, momentum=0.5)
        assert float(p) == 1.0
        assert float(v) == pytest.approx(3.25)

    def test_tensor_inputs_untouched(self):
        p0 = torch.tensor([1.0, 2.0])
        g0 = torch.tensor([0.5, -0.5])
        v0 = torch.tensor([0.0, 0.1])
        sgd_step(p0, g0, v0, lr=0.1, momentum=0.9)
        assert torch.equal(p0, torch.tensor([1.0, 2.0]))
        assert torch.equal(v0, torch.tensor([0.0, 0.1]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            sgd_step(torch.zeros(2), torch.zeros(3), torch.zeros(2), 0.1, 0.9)


class TestTrainConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"epochs": -1},
            {"batch_size": 0},
            {"base_lr": 0.0},
            {"momentum": 1.0},
            {"lr_drop_factor": 1.0},
            {"dropout": 1.0},
            {"weight_decay": -0.1},
            {"clip_grad_norm": -1.0},
            {"lr_drop_epochs": (10, 10)},
            {"lr_drop_epochs": (20, 10)},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            train_config(**kw).validate()

    def test_round_trip(self):
        cfg = train_config(lr_drop_epochs=(3, 7), weight_decay=1e-4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainLoop:
    def test_history_structure_and_lrs(self, tiny_dataset):
        model = build_model(model_config())
        res = train(model, tiny_dataset, train_config(epochs=2))
        h = res.history
        assert h["epoch"] == [0, 1]
        assert len(h["train_loss"]) == 2 and len(h["val_map"]) == 2
        want = [lr_at_epoch(train_config(epochs=2), e) for e in (0, 1)]
        assert h["lr"] == want
        assert all(np.isfinite(h["train_loss"]))
        assert res.final.stage == "3d-finetune"
        assert res.final.epoch == 2

    def test_deterministic_across_runs(self, tiny_dataset):
        runs = []
        for _ in range(2):
            model = build_model(model_config())
            runs.append(train(model, tiny_dataset, train_config(epochs=2)))
        assert runs[0].history == runs[1].history
        for name in runs[0].final.params:
            np.testing.assert_array_equal(
                runs[0].final.params[name], runs[1].final.params[name]
            )

    def test_best_tracks_argmax(self, tiny_dataset):
        model = build_model(model_config())
        res = train(model, tiny_dataset, train_config(epochs=3))
        maps = res.history["val_map"]
        assert res.best_epoch == int(np.argmax(maps))
        assert res.best.epoch == res.best_epoch + 1

    def test_zero_epochs(self, tiny_dataset):
        model = build_model(model_config())
        res = train(model, tiny_dataset, train_config(epochs=0))
        assert res.history["epoch"] == []
        assert res.final.epoch == 0
        assert res.best is res.final

    def test_composite_path_runs(self, tiny_dataset):
        n = tiny_dataset.label_space.num_composite
        model = build_model(model_config(head="lstm", num_classes=n))
        res = train(model, tiny_dataset, train_config(epochs=1), task="composite")
        assert len(res.history["train_loss"]) == 1

    def test_frozen_stream_params_do_not_move(self, tiny_dataset):
        model = build_model(model_config(freeze_backbone=True))
        before = {
            n: p.detach().clone() for n, p in model.named_parameters()
        }
        train(model, tiny_dataset, train_config(epochs=1))
        for name, p in model.named_parameters():
            if name.startswith("dspn."):
                assert torch.equal(p, before[name]), name
        assert not torch.equal(model.classifier.weight, before["classifier.weight"])

    def test_weight_decay_changes_result(self, tiny_dataset):
        outs = []
        for wd in (0.0, 0.1):
            model = build_model(model_config())
            res = train(
                model, tiny_dataset, train_config(epochs=1, weight_decay=wd)
            )
            outs.append(res.final.params["classifier.weight"])
        assert not np.array_equal(outs[0], outs[1])

    def test_grad_clip_bounds_movement(self, tiny_dataset):
        model = build_model(model_config())
        before = model.classifier.weight.detach().clone()
        cfg = train_config(epochs=1, clip_grad_norm=1e-8, base_lr=0.05)
        train(model, tiny_dataset, cfg)
        # every update step moves by at most lr * accumulated clipped norm
        delta = (model.classifier.weight.detach() - before).abs().max()
        assert float(delta) < 1e-6


class TestTrainGuards:
    def test_composite_needs_lstm(self, tiny_dataset):
        n = tiny_dataset.label_space.num_composite
        model = build_model(model_config(head="fc", num_classes=n))
        with pytest.raises(ValueError, match="lstm"):
            train(model, tiny_dataset, train_config(), task="composite")

    def test_unknown_task(self, tiny_dataset):
        model = build_model(model_config())
        with pytest.raises(ValueError, match="task"):
            train(model, tiny_dataset, train_config(), task="binary")

    def test_class_count_mismatch(self, tiny_dataset):
        model = build_model(model_config(num_classes=5))
        with pytest.raises(ValueError, match="classes"):
            train(model, tiny_dataset, train_config())

    def test_nonfinite_loss_aborts_with_location(self, tiny_dataset, monkeypatch):
        model = build_model(model_config())

        def poisoned(logits, labels):
            return (logits * 0).sum() + float("nan")

        monkeypatch.setattr("sci3d.train.multilabel_loss", poisoned)
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            train(model, tiny_dataset, train_config())

    def test_nonfinite_gradient_aborts_named(self, tiny_dataset, monkeypatch):
        model = build_model(model_config())

        class BadGrad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.shape = x.shape
                return x.sum() * 0 + 0.5

            @staticmethod
            def backward(ctx, g):
                return g.new_full(ctx.shape, float("nan"))

        monkeypatch.setattr(
            "sci3d.train.multilabel_loss", lambda lo, la: BadGrad.apply(lo)
        )
        with pytest.raises(NumericError, match="non-finite gradient in"):
            train(model, tiny_dataset, train_config())


class TestResume:
    def run(self, dataset, epochs, resume_from=None, seed=5):
        model = build_model(model_config())
        return train(
            model,
            dataset,
            train_config(epochs=epochs, seed=seed),
            resume_from=resume_from,
        )

    def test_resume_reproduces_uninterrupted_run(self, tiny_dataset):
        full = self.run(tiny_dataset, 3)
        part = self.run(tiny_dataset, 2)
        rest = self.run(tiny_dataset, 3, resume_from=part.final)
        assert rest.history["epoch"] == [2]
        assert rest.history["val_map"][0] == full.history["val_map"][2]
        assert rest.history["train_loss"][0] == full.history["train_loss"][2]
        for name in full.final.params:
            np.testing.assert_array_equal(
                full.final.params[name], rest.final.params[name], err_msg=name
            )
        for name in full.final.optim:
            np.testing.assert_array_equal(
                full.final.optim[name], rest.final.optim[name], err_msg=name
            )

    def test_resume_rejects_other_stage(self, tiny_dataset):
        ck = Checkpoint(
            stage=STAGE_PRETRAIN, epoch=1, config={}, params={}, optim={}
        )
        with pytest.raises(ValueError, match="resume"):
            self.run(tiny_dataset, 2, resume_from=ck)

    def test_resume_rejects_changed_recipe(self, tiny_dataset):
        part = self.run(tiny_dataset, 1)
        with pytest.raises(ValueError, match="configuration"):
            self.run(tiny_dataset, 2, resume_from=part.final, seed=6)

    def test_resume_allows_extending_epochs(self, tiny_dataset):
        part = self.run(tiny_dataset, 1)
        rest = self.run(tiny_dataset, 2, resume_from=part.final)
        assert rest.history["epoch"] == [1]

    def test_resume_rejects_tampered_optimizer_names(self, tiny_dataset):
        part = self.run(tiny_dataset, 1)
        part.final.optim.pop(next(iter(part.final.optim)))
        with pytest.raises(ValueError, match="optimizer state"):
            self.run(tiny_dataset, 2, resume_from=part.final)

    def test_resume_beyond_epoch_budget(self, tiny_dataset):
        part = self.run(tiny_dataset, 2)
        with pytest.raises(ValueError, match="beyond"):
            self.run(tiny_dataset, 1, resume_from=part.final)


class TestLoadIntoModel:
    def test_round_trip_restores_outputs(self, tiny_dataset):
        model = build_model(model_config())
        res = train(model, tiny_dataset, train_config(epochs=1))
        fresh = build_model(model_config())
        load_into_model(fresh, res.final)
        x = torch.rand(
            1, 2, 3, 8, *tiny_dataset.load(tiny_dataset.ids("val")[0]).frames.shape[1:3],
            generator=torch.Generator().manual_seed(0),
        )
        model.eval()
        fresh.eval()
        with torch.no_grad():
            assert torch.equal(model(x), fresh(x))

    def test_rejects_checkpoint_without_model_config(self):
        model = build_model(model_config())
        ck = Checkpoint(
            stage="3d-finetune", epoch=1, config={}, params={}, optim={}
        )
        with pytest.raises(ValueError, match="no model config"):
            load_into_model(model, ck)

    def test_rejects_other_model_config(self, tiny_dataset):
        model = build_model(model_config())
        res = train(model, tiny_dataset, train_config(epochs=1))
        other = build_model(model_config(seed=9))
        with pytest.raises(ValueError, match="different model config"):
            load_into_model(other, res.final)
