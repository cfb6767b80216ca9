import os

import numpy as np
import pandas as pd
import pytest
import tensorflow as tf

from libs.speech_mamba.AudioFeatures import FbankConfig
from libs.speech_mamba.Checkpoints import load_checkpoint
from libs.speech_mamba.DataProcessor import SyntheticToneCorpus, collate
from libs.speech_mamba.Decoding import ctc_greedy_batch
from libs.speech_mamba.Errors import ConfigError
from libs.speech_mamba.Metrics import word_error_rate
from libs.speech_mamba.SpeechMambaNetworks import build_variant
from libs.speech_mamba.Trainer import NoamSchedule, TrainConfig, Trainer
from tests.conftest import tiny_model_config


@pytest.fixture
def tone_data():
    return SyntheticToneCorpus(num_utterances=6, seed=3).speech_data(FbankConfig(n_mels=8))


def micro_batch(rng, ids, lengths, tokens):
    return collate(ids, [rng.normal(size=(n, 8)) for n in lengths], tokens)


def train_config(tmp_path, **overrides):
    values = dict(
        epochs=1,
        batch_size=2,
        max_batch_length=100.0,
        grad_accum=1,
        warmup_steps=10,
        avg_top_k=2,
        output_dir=str(tmp_path),
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestSchedule:
    def test_warmup_then_decay(self):
        schedule = NoamSchedule(1e-3, 100)
        assert schedule.value(0) == pytest.approx(1e-5)
        assert schedule.value(99) == pytest.approx(1e-3)
        assert schedule.value(399) == pytest.approx(5e-4)
        assert schedule.value(50) < schedule.value(99) > schedule.value(200)

    def test_tensor_form_matches(self):
        schedule = NoamSchedule(1e-3, 100)
        for step in (0, 10, 99, 1000):
            assert float(schedule(tf.constant(step))) == pytest.approx(schedule.value(step), rel=1e-6)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [dict(grad_accum=0), dict(alpha=1.2), dict(selection_metric="bleu"), dict(avg_top_k=0), dict(max_steps=0)],
    )
    def test_invalid(self, tmp_path, overrides):
        with pytest.raises(ConfigError):
            train_config(tmp_path, **overrides)


class TestGradients:
    def test_accumulation_equals_large_batch(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config(zero_init_residual=False))
        lengths = [30, 24, 28, 20]
        tokens = [[3, 4, 5], [6, 7, 3], [4, 4, 8], [5, 3, 6]]
        features = [rng.normal(size=(n, 8)) for n in lengths]
        ids = ["a", "b", "c", "d"]
        full = collate(ids, features, tokens)
        micro = [collate([i], [f], [t]) for i, f, t in zip(ids, features, tokens)]

        single = Trainer(tone_data, model, train_config(tmp_path, grad_accum=1))
        big_grads, big_terms, _ = single.accumulate_gradients([full])
        accumulated = Trainer(tone_data, model, train_config(tmp_path, grad_accum=4))
        small_grads, small_terms, used = accumulated.accumulate_gradients(micro)

        assert used == 4
        assert small_terms["combined"] == pytest.approx(big_terms["combined"], abs=1e-10)
        for name, big, small in zip(single.names, big_grads, small_grads):
            np.testing.assert_allclose(small.numpy(), big.numpy(), atol=1e-10, err_msg=name)

    def test_skipped_micro_batch_keeps_mean_gradient(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config(zero_init_residual=False))
        lengths = [30, 24, 28]
        tokens = [[3, 4, 5], [6, 7, 3], [4, 4, 8]]
        features = [rng.normal(size=(n, 8)) for n in lengths]
        ids = ["a", "b", "c"]
        full = collate(ids, features, tokens)
        micro = [collate([i], [f], [t]) for i, f, t in zip(ids, features, tokens)]
        micro.append(micro_batch(rng, ["short"], [8], [[3, 4, 5]]))

        single = Trainer(tone_data, model, train_config(tmp_path, grad_accum=1))
        big_grads, big_terms, _ = single.accumulate_gradients([full])
        accumulated = Trainer(tone_data, model, train_config(tmp_path, grad_accum=4))
        small_grads, small_terms, used = accumulated.accumulate_gradients(micro)

        assert used == 3
        assert accumulated.skipped_batches == 1
        assert small_terms["combined"] == pytest.approx(big_terms["combined"], abs=1e-10)
        for name, big, small in zip(single.names, big_grads, small_grads):
            np.testing.assert_allclose(small.numpy(), big.numpy(), atol=1e-10, err_msg=name)

    def test_alpha_one_leaves_decoder_untouched(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config(zero_init_residual=False))
        trainer = Trainer(tone_data, model, train_config(tmp_path, alpha=1.0))
        grads, terms, _ = trainer.accumulate_gradients([micro_batch(rng, ["a", "b"], [30, 26], [[3, 4], [5, 6, 7]])])
        decoder = [
            (name, grad)
            for name, grad in zip(trainer.names, grads)
            if name.startswith("decoder.") or name.startswith("out_")
        ]
        assert decoder
        for name, grad in decoder:
            np.testing.assert_array_equal(grad.numpy(), 0.0, err_msg=name)
        assert terms["combined"] == pytest.approx(terms["ctc"])

    def test_impossible_alignment_is_skipped(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config())
        trainer = Trainer(tone_data, model, train_config(tmp_path))
        before = [v.numpy().copy() for v in trainer.params]
        terms = trainer.train_step([micro_batch(rng, ["short"], [8], [[3, 4, 5]])])
        assert not terms["applied"]
        assert trainer.skipped_batches == 1
        for old, variable in zip(before, trainer.params):
            np.testing.assert_array_equal(old, variable.numpy())

    def test_step_updates_parameters(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config())
        trainer = Trainer(tone_data, model, train_config(tmp_path))
        terms = trainer.train_step([micro_batch(rng, ["a"], [30], [[3, 4]])])
        assert terms["applied"] and terms["grad_norm"] > 0
        assert terms["lr"] == pytest.approx(1e-4)
        assert trainer.step_counter == 1
        assert int(trainer.optimizer.iterations.numpy()) == 1

    def test_no_decoder_trains_ctc_only(self, tmp_path, tone_data, rng):
        model = build_variant(tiny_model_config(use_s2s=False))
        trainer = Trainer(tone_data, model, train_config(tmp_path, alpha=0.3))
        assert trainer.alpha == 1.0
        terms = trainer.train_step([micro_batch(rng, ["a"], [30], [[3, 4]])])
        assert terms["s2s"] is None


class TestTraining:
    def run(self, tmp_path, data, **overrides):
        model = build_variant(tiny_model_config())
        trainer = Trainer(data, model, train_config(tmp_path, **overrides))
        return trainer, trainer.train()

    def test_outputs(self, tmp_path, tone_data):
        trainer, summary = self.run(tmp_path / "run", tone_data, epochs=2)
        assert summary["steps"] == 6
        assert len(summary["averaged_checkpoints"]) == 2
        frame = pd.read_csv(summary["metrics"])
        assert list(frame.columns) == ["step", "epoch", "ctc", "s2s", "combined", "lr", "grad_norm"]
        assert len(frame) == 6
        state, meta = load_checkpoint(summary["checkpoint"])
        assert meta["step"] == 6
        assert meta["config"]["d_model"] == 16
        assert set(state) == set(trainer.names)
        assert os.path.isfile(tmp_path / "run" / "checkpoints" / "epoch-0002.json")
        assert summary["last_dev"]["dev_wer"] is not None

    def test_max_steps(self, tmp_path, tone_data):
        _, summary = self.run(tmp_path, tone_data, epochs=5, max_steps=2)
        assert summary["steps"] == 2

    def test_reproducible(self, tmp_path, tone_data):
        _, first = self.run(tmp_path / "a", tone_data, epochs=1)
        _, second = self.run(tmp_path / "b", tone_data, epochs=1)
        pd.testing.assert_frame_equal(pd.read_csv(first["metrics"]), pd.read_csv(second["metrics"]))
        state_a, _ = load_checkpoint(first["checkpoint"])
        state_b, _ = load_checkpoint(second["checkpoint"])
        for name, values in state_a.items():
            np.testing.assert_array_equal(values, state_b[name])


@pytest.mark.slow
class TestSmoke:
    def test_overfits_synthetic_corpus(self, tmp_path):
        corpus = SyntheticToneCorpus(num_utterances=20, seed=0)
        data = corpus.speech_data(FbankConfig(n_mels=8))
        model = build_variant(tiny_model_config(d_model=64, num_heads=4, ssm_state=16, ffn_dim=128))
        trainer = Trainer(
            data, model, train_config(tmp_path, batch_size=5, warmup_steps=200, peak_lr=2e-3, label_smoothing=0.0)
        )
        batches = data.get_train_batches(100.0, 5, seed=0)
        refs = [corpus.vocab.detokenize(t) for batch in batches for t in batch.ctc_targets]

        def training_wer():
            hyps = []
            for batch in batches:
                decoded = ctc_greedy_batch(model, batch.features, batch.feat_lens)
                hyps.extend(corpus.vocab.detokenize(t) for t in decoded)
            return word_error_rate(refs, hyps).wer

        losses, wer = [], 1.0
        for step in range(2000):
            losses.append(trainer.train_step([batches[step % len(batches)]])["combined"])
            if (step + 1) % 100 == 0:
                wer = training_wer()
                if wer < 0.05:
                    break
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert wer < 0.05
