import itertools

import numpy as np
import pytest
import tensorflow as tf

from libs.speech_mamba.Errors import ConfigError, ImpossibleAlignmentError, ShapeError, VocabularyError
from libs.speech_mamba.NeuralCore import gradients, log_softmax
from libs.speech_mamba.Objectives import (
    DECODER_PAD,
    LossBreakdown,
    ctc_loss,
    joint_loss,
    required_frames,
    s2s_loss,
)


def collapse(path, blank=0):
    out, prev = [], None
    for symbol in path:
        if symbol != prev and symbol != blank:
            out.append(symbol)
        prev = symbol
    return out


def brute_force_ctc(log_probs, target):
    steps, classes = log_probs.shape
    paths = np.array(list(itertools.product(range(classes), repeat=steps)))
    scores = log_probs[np.arange(steps), paths].sum(axis=1)
    hits = np.array([collapse(path) == list(target) for path in paths.tolist()])
    return -np.log(np.exp(scores[hits]).sum())


class TestCtcLoss:
    def test_matches_path_enumeration(self, rng):
        cases = 0
        while cases < 200:
            steps, classes = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            length = int(rng.integers(0, min(steps, 3) + 1))
            target = [int(t) for t in rng.integers(1, classes, size=length)]
            if required_frames(target) > steps:
                continue
            log_probs = log_softmax(rng.normal(size=(steps, classes)) * 2).numpy()
            loss = ctc_loss(log_probs[None], [target], [steps]).numpy()
            assert loss == pytest.approx(brute_force_ctc(log_probs, target), abs=1e-8)
            cases += 1

    def test_batched_matches_single(self, rng):
        log_probs = log_softmax(rng.normal(size=(3, 6, 4))).numpy()
        targets, lens = [[1, 2], [3, 3], []], [6, 4, 2]
        batched = ctc_loss(log_probs, targets, lens, reduction="none").numpy()
        for b in range(3):
            single = ctc_loss(log_probs[b : b + 1, : lens[b]], [targets[b]], [lens[b]]).numpy()
            assert batched[b] == pytest.approx(single, abs=1e-12)

    def test_padded_targets(self, rng):
        log_probs = log_softmax(rng.normal(size=(2, 5, 4))).numpy()
        ragged = ctc_loss(log_probs, [[1, 2], [3]], [5, 5], reduction="sum").numpy()
        padded = ctc_loss(log_probs, np.array([[1, 2], [3, 0]]), [5, 5], target_lens=[2, 1], reduction="sum").numpy()
        assert ragged == pytest.approx(padded, abs=1e-12)

    def test_repeats_need_a_blank(self):
        assert required_frames([1, 1, 2, 2, 2]) == 8
        with pytest.raises(ImpossibleAlignmentError) as info:
            ctc_loss(np.log(np.full((1, 2, 3), 1 / 3)), [[1, 1]], [2])
        assert info.value.utterance_index == 0

    def test_blank_in_target_is_rejected(self):
        with pytest.raises(VocabularyError):
            ctc_loss(np.log(np.full((1, 3, 3), 1 / 3)), [[0, 1]], [3])

    def test_length_out_of_range(self):
        with pytest.raises(ShapeError):
            ctc_loss(np.log(np.full((1, 3, 3), 1 / 3)), [[1]], [4])

    def test_gradient_is_finite_and_sums_to_zero_per_frame(self, rng):
        logits = tf.Variable(rng.normal(size=(1, 6, 4)))
        (grad,) = gradients(lambda: ctc_loss(log_softmax(logits), [[1, 2, 1]], [6]), [logits])
        assert np.all(np.isfinite(grad))
        np.testing.assert_allclose(grad.sum(axis=-1), 0.0, atol=1e-12)

    def test_relabelling_symbols_leaves_loss_unchanged(self, rng):
        classes = 6
        log_probs = log_softmax(rng.normal(size=(3, 9, classes))).numpy()
        targets, lens = [[1, 2, 2], [5, 3], [4, 1, 5, 1]], [9, 7, 8]
        base = ctc_loss(log_probs, targets, lens, reduction="none").numpy()
        for _ in range(5):
            perm = np.concatenate([[0], 1 + rng.permutation(classes - 1)])
            relabelled = np.empty_like(log_probs)
            relabelled[..., perm] = log_probs
            mapped = [[int(perm[t]) for t in target] for target in targets]
            loss = ctc_loss(relabelled, mapped, lens, reduction="none").numpy()
            np.testing.assert_allclose(loss, base, rtol=0, atol=1e-12)


class TestS2sLoss:
    def test_plain_cross_entropy(self, rng):
        logits = rng.normal(size=(1, 3, 5))
        targets = np.array([[0, 4, 2]])
        expected = -np.mean([log_softmax(logits).numpy()[0, t, c] for t, c in enumerate(targets[0])])
        assert s2s_loss(logits, targets, smoothing=0.0).numpy() == pytest.approx(expected, abs=1e-12)

    def test_padding_is_ignored(self, rng):
        logits = rng.normal(size=(2, 4, 5))
        targets = np.array([[1, 2, DECODER_PAD, DECODER_PAD], [3, 4, 0, 1]])
        base = s2s_loss(logits, targets).numpy()
        changed = logits.copy()
        changed[0, 2:] = rng.normal(size=(2, 5)) * 50
        assert s2s_loss(changed, targets).numpy() == pytest.approx(base, abs=1e-12)

    def test_uniform_logits_cost_log_vocab(self):
        targets = np.array([[0, 3, 7, 5]])
        loss = s2s_loss(np.zeros((1, 4, 8)), targets, smoothing=0.0).numpy()
        assert loss == pytest.approx(np.log(8.0), abs=1e-12)

    @pytest.mark.parametrize("smoothing", [0.1, 0.25])
    def test_smoothed_value(self, smoothing):
        logits = np.array([[[20.0, 0.0, 0.0]]])
        log_p = logits[0, 0] - (20.0 + np.log1p(2.0 * np.exp(-20.0)))
        weights = np.full(3, smoothing / 3)
        weights[0] += 1.0 - smoothing
        expected = -np.dot(weights, log_p)
        assert s2s_loss(logits, [[0]], smoothing=smoothing).numpy() == pytest.approx(expected, abs=1e-12)

    def test_smoothing_penalises_confidence(self):
        logits = np.array([[[20.0, 0.0, 0.0]]])
        assert s2s_loss(logits, [[0]], smoothing=0.1).numpy() > s2s_loss(logits, [[0]], smoothing=0.0).numpy()

    def test_all_padding_rejected(self):
        with pytest.raises(ShapeError):
            s2s_loss(np.zeros((1, 2, 3)), [[DECODER_PAD, DECODER_PAD]])

    def test_out_of_range_target(self):
        with pytest.raises(VocabularyError):
            s2s_loss(np.zeros((1, 1, 3)), [[3]])


class TestJointLoss:
    def test_weighting(self):
        assert joint_loss(2.0, 4.0, 0.3) == pytest.approx(0.3 * 2.0 + 0.7 * 4.0)

    def test_superposition(self, rng):
        for _ in range(100):
            (c1, s1), (c2, s2) = rng.uniform(0.0, 50.0, size=(2, 2))
            alpha, scale = rng.uniform(0.0, 1.0), rng.uniform(-3.0, 3.0)
            combined = joint_loss(c1 + scale * c2, s1 + scale * s2, alpha)
            expected = joint_loss(c1, s1, alpha) + scale * joint_loss(c2, s2, alpha)
            assert combined == pytest.approx(expected, rel=1e-12, abs=1e-10)

    def test_no_decoder_needs_alpha_one(self):
        assert joint_loss(2.0, None, 1.0) == 2.0
        with pytest.raises(ConfigError):
            joint_loss(2.0, None, 0.3)

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            joint_loss(1.0, 1.0, 1.5)

    def test_breakdown(self):
        terms = LossBreakdown.from_terms(1.0, None, 1.0)
        assert terms.combined == 1.0 and terms.s2s == 0.0
