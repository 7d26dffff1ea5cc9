"""Optimizer behavior, the training loop, gradient checking, checkpoints."""

import io
import json

import numpy as np
import pytest

import granalign.autodiff as ad
from granalign.data import Dataset, Sample
from granalign.model import Model, ModelConfig
from granalign.training import (
    Adam,
    AdamConfig,
    TrainConfig,
    Trainer,
    evaluate,
    generic_parameter_point,
    gradcheck,
    load_checkpoint,
    loss_value,
    save_checkpoint,
)

WORDS = ["what", "color", "is", "the", "there", "a",
         "girl", "dog", "brown", "left", "right"]
ANSWERS = ["brown", "red", "yes", "no"]


def tiny_model(seed=0, **cfg_kw):
    base = dict(d_model=8, d_emb=8, num_heads=2, num_layers=2, d_ff=16, max_len=32)
    base.update(cfg_kw)
    return Model(ModelConfig(**base), WORDS, ANSWERS,
                 d_region=4, d_spatial=4, seed=seed)


def tiny_dataset(girl_dog):
    scene, question = girl_dog
    samples = [
        Sample("s0", "attribute", scene, question, "brown"),
        Sample("s1", "attribute", scene, question, "red"),
    ]
    return Dataset(samples=samples, word_vocab=WORDS, answer_vocab=ANSWERS,
                   d_region=4, d_spatial=4, grid_size=2)


class TestAdam:
    def setup_params(self):
        params = ad.Parameters()
        t = params.new("w", (3,), "zeros", np.random.default_rng(0))
        t.data[:] = 1.0
        return params, t

    def test_first_step_moves_by_about_lr(self):
        params, t = self.setup_params()
        opt = Adam(params, AdamConfig(lr=0.1))
        opt.step({"w": np.ones(3)})
        # bias-corrected first step is lr * g / (|g| + eps) regardless of scale
        np.testing.assert_allclose(t.data, 1.0 - 0.1, atol=1e-6)

    def test_zero_gradient_leaves_parameter_unchanged(self):
        params, t = self.setup_params()
        opt = Adam(params, AdamConfig(lr=0.1))
        opt.step({"w": np.zeros(3)})
        np.testing.assert_array_equal(t.data, np.ones(3))

    def test_nonfinite_gradient_raises_before_touching_state(self):
        params, t = self.setup_params()
        opt = Adam(params, AdamConfig(lr=0.1))
        with pytest.raises(FloatingPointError, match="w"):
            opt.step({"w": np.array([1.0, np.nan, 1.0])})
        np.testing.assert_array_equal(t.data, np.ones(3))
        assert opt.step_count == 0

    def test_descends_a_quadratic(self):
        params, t = self.setup_params()
        t.data[:] = 5.0
        opt = Adam(params, AdamConfig(lr=0.05))
        for _ in range(2000):
            opt.step({"w": 2.0 * t.data})
        assert np.all(np.abs(t.data) < 0.05)


class TestTrainer:
    def test_empty_dataset_rejected(self, girl_dog):
        ds = tiny_dataset(girl_dog)
        ds.samples = []
        with pytest.raises(ValueError, match="empty"):
            Trainer(tiny_model(), ds, TrainConfig(batch_size=1, epochs=1))

    def test_answer_vocab_mismatch_rejected(self, girl_dog):
        ds = tiny_dataset(girl_dog)
        model = Model(ModelConfig(d_model=8, d_emb=8, num_heads=2, num_layers=2,
                                  d_ff=16, max_len=32),
                      WORDS, ["yes", "no"], d_region=4, d_spatial=4)
        with pytest.raises(ValueError, match="vocabulary"):
            Trainer(model, ds, TrainConfig(batch_size=1, epochs=1))

    def test_epoch_record_fields(self, girl_dog):
        trainer = Trainer(tiny_model(), tiny_dataset(girl_dog),
                          TrainConfig(batch_size=2, epochs=1, lr=1e-3))
        record = trainer.run_epoch()
        assert set(record) == {"epoch", "loss", "acc_ce", "acc_rn", "acc_ss",
                               "acc_ga", "acc_avg"}
        assert record["epoch"] == 1

    def test_fit_writes_one_json_line_per_epoch(self, girl_dog):
        out = io.StringIO()
        trainer = Trainer(tiny_model(), tiny_dataset(girl_dog),
                          TrainConfig(batch_size=2, epochs=3, lr=1e-3))
        history = trainer.fit(metrics_out=out)
        lines = out.getvalue().splitlines()
        assert len(lines) == 3
        for line, record in zip(lines, history):
            parsed = json.loads(line)
            assert parsed == record
            assert list(parsed) == sorted(parsed)

    def test_overfits_one_sample(self, girl_dog):
        scene, question = girl_dog
        ds = Dataset(samples=[Sample("s0", "attribute", scene, question, "brown")],
                     word_vocab=WORDS, answer_vocab=ANSWERS,
                     d_region=4, d_spatial=4, grid_size=2)
        trainer = Trainer(tiny_model(), ds,
                          TrainConfig(batch_size=1, epochs=300, lr=3e-3))
        history = trainer.fit()
        losses = [h["loss"] for h in history]
        assert losses[-1] < 0.01
        assert all(b <= a + 1e-6 for a, b in zip(losses[50:], losses[51:]))
        assert history[-1]["acc_avg"] == 1.0

    def test_grad_clip_caps_update_size(self, girl_dog):
        ds = tiny_dataset(girl_dog)
        free = Trainer(tiny_model(), ds, TrainConfig(batch_size=2, epochs=1, lr=1e-3))
        clipped = Trainer(tiny_model(), ds,
                          TrainConfig(batch_size=2, epochs=1, lr=1e-3,
                                      grad_clip=1e-6))
        free.run_epoch()
        clipped.run_epoch()
        name = "fuse.ga.head_w"
        base = tiny_model().params[name].data
        moved_free = np.abs(free.model.params[name].data - base).max()
        moved_clipped = np.abs(clipped.model.params[name].data - base).max()
        assert moved_clipped < moved_free


class TestDeterminism:
    def run_once(self, girl_dog, seed):
        trainer = Trainer(tiny_model(seed=seed), tiny_dataset(girl_dog),
                          TrainConfig(batch_size=1, epochs=3, seed=seed, lr=1e-3))
        history = trainer.fit()
        blob = b"".join(t.data.tobytes() for t in trainer.model.params.tensors())
        return history, blob

    def test_same_seed_identical_trajectory_and_weights(self, girl_dog):
        h1, b1 = self.run_once(girl_dog, 4)
        h2, b2 = self.run_once(girl_dog, 4)
        assert h1 == h2
        assert b1 == b2

    def test_different_seed_diverges(self, girl_dog):
        _, b1 = self.run_once(girl_dog, 4)
        _, b2 = self.run_once(girl_dog, 5)
        assert b1 != b2


class TestEvaluate:
    def test_empty_dataset_rejected(self, girl_dog):
        ds = tiny_dataset(girl_dog)
        ds.samples = []
        with pytest.raises(ValueError, match="empty"):
            evaluate(tiny_model(), ds)

    def test_report_fields_and_ranges(self, girl_dog):
        report = evaluate(tiny_model(), tiny_dataset(girl_dog))
        assert set(report) == {"n", "loss", "acc_ce", "acc_rn", "acc_ss",
                               "acc_ga", "acc_avg"}
        assert report["n"] == 2
        for key in ("acc_ce", "acc_rn", "acc_ss", "acc_ga", "acc_avg"):
            assert 0.0 <= report[key] <= 1.0


class TestGradcheck:
    def test_every_block_reported_once_and_passes(self, girl_dog):
        # full-width model: at d_model=8 some deep-layer gradients are small
        # enough that the finite difference itself is at the noise floor
        scene, question = girl_dog
        model = Model(ModelConfig(), WORDS, ANSWERS, d_region=4, d_spatial=4)
        generic_parameter_point(model)
        prep = model.prepare(scene, question, answer_index=0)
        reports = gradcheck(model, prep)
        assert [r.name for r in reports] == model.params.names()
        failed = [r for r in reports if not r.passed]
        assert failed == []

    def test_detects_a_corrupted_backward(self, girl_dog, monkeypatch):
        """Negative control: a wrong gradient rule must be caught."""
        scene, question = girl_dog
        model = tiny_model()
        generic_parameter_point(model)
        prep = model.prepare(scene, question, answer_index=0)

        def bad_relu(x):
            out = ad.Tensor(np.maximum(x.data, 0.0))

            def backward(grad):
                return (grad * (x.data > 0.0) * 1.01,)

            return ad.record(out, (x,), backward)

        monkeypatch.setattr(ad, "relu", bad_relu)
        reports = gradcheck(model, prep)
        assert any(not r.passed for r in reports)


class TestCheckpoint:
    def test_roundtrip_restores_weights_and_optimizer(self, girl_dog, tmp_path):
        ds = tiny_dataset(girl_dog)
        trainer = Trainer(tiny_model(seed=9), ds,
                          TrainConfig(batch_size=2, epochs=2, seed=9, lr=1e-3))
        trainer.fit()
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), trainer.model, trainer.optimizer)
        restored, opt = load_checkpoint(str(path))

        assert restored.answer_vocab == trainer.model.answer_vocab
        assert restored.params.names() == trainer.model.params.names()
        for a, b in zip(restored.params.tensors(), trainer.model.params.tensors()):
            assert a.data.tobytes() == b.data.tobytes()
        assert opt.step_count == trainer.optimizer.step_count
        for name in trainer.optimizer.m:
            assert opt.m[name].tobytes() == trainer.optimizer.m[name].tobytes()
            assert opt.v[name].tobytes() == trainer.optimizer.v[name].tobytes()

    def test_resaved_checkpoint_is_byte_identical(self, girl_dog, tmp_path):
        trainer = Trainer(tiny_model(), tiny_dataset(girl_dog),
                          TrainConfig(batch_size=2, epochs=1, lr=1e-3))
        trainer.fit()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(p1), trainer.model, trainer.optimizer)
        restored, opt = load_checkpoint(str(p1))
        save_checkpoint(str(p2), restored, opt)
        assert p1.read_bytes() == p2.read_bytes()

    def test_restored_model_predicts_identically(self, girl_dog, tmp_path):
        scene, question = girl_dog
        model = tiny_model(seed=2)
        prep = model.prepare(scene, question, answer_index=0)
        before = model.forward(prep).f_ga.data.copy()
        path = tmp_path / "m.ckpt"
        save_checkpoint(str(path), model)
        restored, opt = load_checkpoint(str(path))
        assert opt is None
        prep2 = restored.prepare(scene, question, answer_index=0)
        after = restored.forward(prep2).f_ga.data
        assert before.tobytes() == after.tobytes()

    def test_bad_magic_rejected(self, girl_dog, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic|checkpoint"):
            load_checkpoint(str(path))

    def test_checkpoint_interval_writes_during_fit(self, girl_dog, tmp_path):
        path = tmp_path / "periodic.ckpt"
        trainer = Trainer(tiny_model(), tiny_dataset(girl_dog),
                          TrainConfig(batch_size=2, epochs=2, lr=1e-3,
                                      checkpoint_interval=1))
        trainer.fit(checkpoint_path=str(path))
        restored, opt = load_checkpoint(str(path))
        assert opt.step_count == trainer.optimizer.step_count


class TestLossValue:
    def test_matches_tape_loss(self, girl_dog):
        scene, question = girl_dog
        model = tiny_model()
        prep = model.prepare(scene, question, answer_index=1)
        with ad.Tape():
            bundle = model.forward(prep)
            tape_loss = float(model.loss(bundle, 1).data)
        assert loss_value(model, prep) == tape_loss
