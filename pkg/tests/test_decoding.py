import itertools

import numpy as np
import pytest

from libs.speech_mamba.Decoding import (
    CtcPrefixScorer,
    DecodeConfig,
    beam_search,
    beam_search_hypotheses,
    ctc_greedy_batch,
    ctc_prefix_score,
    greedy_attention_decode,
    greedy_ctc_decode,
)
from libs.speech_mamba.Errors import BeamCollapseError, ConfigError
from libs.speech_mamba.NeuralCore import log_softmax
from libs.speech_mamba.SpeechMambaNetworks import BOS_ID, EOS_ID, build_variant
from tests.conftest import tiny_model_config


def collapse(path, blank=0):
    out, prev = [], None
    for symbol in path:
        if symbol != prev and symbol != blank:
            out.append(symbol)
        prev = symbol
    return out


def path_probabilities(log_probs):
    steps, classes = log_probs.shape
    for path in itertools.product(range(classes), repeat=steps):
        yield collapse(path), np.exp(sum(log_probs[t, s] for t, s in enumerate(path)))


@pytest.fixture
def small_model():
    return build_variant(tiny_model_config(vocab_size=4, zero_init_residual=False))


@pytest.fixture
def utterance(rng):
    return rng.normal(size=(16, 8))


class TestGreedyCtc:
    def test_merges_repeats_and_drops_blanks(self):
        path = [3, 3, 0, 3, 4, 4, 0, 0, 5]
        log_probs = np.log(np.eye(6)[path] * 0.9 + 0.1 / 6)
        assert greedy_ctc_decode(log_probs) == [3, 3, 4, 5]

    def test_batch_matches_single(self, small_model, rng):
        feats = rng.normal(size=(2, 20, 8))
        batch = ctc_greedy_batch(small_model, feats, [20, 12])
        single = ctc_greedy_batch(small_model, feats[1:, :12], [12])
        assert batch[1] == single[0]


class TestPrefixScorer:
    @pytest.mark.parametrize("prefix", [(), (3,), (3, 3), (4, 3)])
    def test_prefix_and_full_scores_match_enumeration(self, rng, prefix):
        log_probs = log_softmax(rng.normal(size=(4, 5)) * 1.5).numpy()
        scorer = CtcPrefixScorer(log_probs)
        for token in (3, 4):
            extended = list(prefix) + [token]
            expected = sum(p for labels, p in path_probabilities(log_probs) if labels[: len(extended)] == extended)
            assert np.exp(scorer.score(prefix, [token])[0]) == pytest.approx(expected, abs=1e-12)
        exact = sum(p for labels, p in path_probabilities(log_probs) if labels == list(prefix))
        assert np.exp(scorer.score(prefix, [EOS_ID])[0]) == pytest.approx(exact, abs=1e-12)

    def test_stateless_form(self, rng):
        log_probs = log_softmax(rng.normal(size=(5, 5))).numpy()
        assert ctc_prefix_score(log_probs, [3], 4) == pytest.approx(CtcPrefixScorer(log_probs).prefix_score([3, 4]))

    def test_empty_prefix_scores_zero(self, rng):
        assert CtcPrefixScorer(log_softmax(rng.normal(size=(3, 4))).numpy()).prefix_score([]) == 0.0


class TestBeamSearch:
    def exhaustive_best(self, model, feats, ctc_weight, max_len):
        enc_out, enc_lens = model.encode(feats[None], [len(feats)])
        ctc_lp = log_softmax(model.ctc_logits(enc_out)).numpy()[0, : int(enc_lens[0])]
        scorer = CtcPrefixScorer(ctc_lp)
        best = None
        for length in range(max_len + 1):
            for body in itertools.product((3, 4), repeat=length):
                tokens_in = np.array([[BOS_ID, *body]])
                att_lp = log_softmax(model.decode_logits(tokens_in, enc_out, enc_lens)).numpy()[0]
                targets = list(body) + [EOS_ID]
                att = sum(att_lp[i, tok - 1] for i, tok in enumerate(targets))
                score = (1 - ctc_weight) * att + ctc_weight * scorer.full_score(body)
                if best is None or score > best[0]:
                    best = (score, list(body))
        return best

    @pytest.mark.parametrize("seed", range(20))
    def test_wide_beam_is_exhaustive(self, seed):
        model = build_variant(tiny_model_config(vocab_size=4, zero_init_residual=False, seed=seed))
        utterance = np.random.default_rng(seed).normal(size=(24, 8))
        cfg = DecodeConfig(beam_width=100, ctc_weight=0.4, max_len=4)
        finished = beam_search_hypotheses(model, utterance, cfg)
        score, body = self.exhaustive_best(model, utterance, 0.4, 4)
        assert finished[0].symbols == body
        assert finished[0].score == pytest.approx(score, abs=1e-8)
        assert len(finished) == 31
        assert all(a.score >= b.score for a, b in zip(finished, finished[1:]))

    def test_width_one_attention_only_is_greedy(self, small_model, utterance):
        cfg = DecodeConfig(beam_width=1, ctc_weight=0.0, max_len=5)
        assert beam_search(small_model, utterance, cfg) == greedy_attention_decode(small_model, utterance, max_len=5)

    def test_ctc_only_without_decoder(self, utterance):
        model = build_variant(tiny_model_config(vocab_size=4, use_s2s=False, zero_init_residual=False))
        hyps = beam_search_hypotheses(model, utterance, DecodeConfig(beam_width=4, max_len=3))
        assert hyps[0].att_score == 0.0
        assert all(t in (3, 4) for t in hyps[0].symbols)

    def test_language_model_hook(self, small_model, utterance):
        def lm(tokens):
            scores = np.full(5, -100.0)
            scores[4] = 0.0
            return scores

        cfg = DecodeConfig(beam_width=8, max_len=3, lm=lm, lm_weight=1.0)
        best = beam_search_hypotheses(small_model, utterance, cfg)[0]
        assert 3 not in best.symbols
        assert best.lm_score == pytest.approx(-100.0)

    def test_no_finite_ending_raises(self, small_model, utterance):
        def lm(tokens):
            scores = np.zeros(5)
            scores[EOS_ID] = -np.inf
            return scores

        cfg = DecodeConfig(beam_width=4, max_len=2, lm=lm, lm_weight=1.0)
        with pytest.raises(BeamCollapseError):
            beam_search_hypotheses(small_model, utterance, cfg)

    def test_length_normalisation_orders_by_mean(self, small_model, utterance):
        cfg = DecodeConfig(beam_width=100, max_len=3, length_normalize=True)
        finished = beam_search_hypotheses(small_model, utterance, cfg)
        normalised = [h.final_score(True) for h in finished]
        assert normalised == sorted(normalised, reverse=True)

    def test_greedy_respects_max_len(self, small_model, utterance):
        assert len(greedy_attention_decode(small_model, utterance, max_len=2)) <= 2

    @pytest.mark.parametrize(
        "overrides", [dict(beam_width=0), dict(ctc_weight=1.5), dict(lm_weight=-1), dict(nbest=0)]
    )
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigError):
            DecodeConfig(**overrides)
