"""
This file holds the inference routines: greedy CTC decoding, CTC prefix scoring
and the one-pass joint CTC/attention beam search with an optional LM hook.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from libs.speech_mamba.Errors import BeamCollapseError, ConfigError, ShapeError
from libs.speech_mamba.NeuralCore import as_tensor, log_softmax
from libs.speech_mamba.SpeechMambaNetworks import BLANK_ID, BOS_ID, EOS_ID

logger = logging.getLogger(__name__ + ".py")

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    """Beam search settings. `lm` maps a BOS-initiated token list to log-probs over ids 0..V."""

    beam_width: int = 66
    ctc_weight: float = 0.4
    lm_weight: float = 0.6
    max_len_ratio: float = 1.0
    max_len: Optional[int] = None
    lm: Optional[Callable[[List[int]], np.ndarray]] = None
    length_normalize: bool = False
    nbest: int = 1

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight {self.ctc_weight} outside [0, 1]")
        if self.lm_weight < 0:
            raise ConfigError("lm_weight must be non-negative")
        if self.max_len_ratio <= 0:
            raise ConfigError("max_len_ratio must be positive")
        if self.max_len is not None and self.max_len < 0:
            raise ConfigError("max_len must be non-negative")
        if self.nbest < 1:
            raise ConfigError("nbest must be >= 1")


@dataclass
class Hypothesis:
    """One beam entry; scores are log-domain totals over the emitted tokens."""

    tokens: List[int] = field(default_factory=lambda: [BOS_ID])
    att_score: float = 0.0
    ctc_score: float = 0.0
    lm_score: float = 0.0
    score: float = 0.0
    finished: bool = False

    @property
    def symbols(self) -> List[int]:
        """Tokens without BOS and EOS."""
        body = self.tokens[1:]
        if body and body[-1] == EOS_ID:
            body = body[:-1]
        return body

    def final_score(self, length_normalize: bool) -> float:
        if not length_normalize:
            return self.score
        return self.score / max(1, len(self.tokens) - 1)

    def to_dict(self) -> dict:
        return {
            "tokens": self.symbols,
            "score": self.score,
            "att_score": self.att_score,
            "ctc_score": self.ctc_score,
            "lm_score": self.lm_score,
        }


def greedy_ctc_decode(log_probs, blank: int = BLANK_ID) -> List[int]:
    """Best path: frame argmax, merge repeats, drop blanks."""
    best = np.argmax(np.asarray(log_probs), axis=-1)
    tokens, previous = [], None
    for label in best.tolist():
        if label != previous and label != blank:
            tokens.append(label)
        previous = label
    return tokens


class CtcPrefixScorer:
    """Prefix probabilities of one utterance's CTC posteriors.

    For every prefix g the forward variables r_n(t) (paths ending in the last
    label of g) and r_b(t) (paths ending in blank) are cached, so extending a
    beam hypothesis costs O(T) per candidate token.
    """

    def __init__(self, log_probs, blank: int = BLANK_ID, eos: int = EOS_ID):
        self.log_probs = np.asarray(log_probs, dtype=np.float64)
        if self.log_probs.ndim != 2:
            raise ShapeError(f"CTC log_probs must be [T, C], got {self.log_probs.shape}")
        self.blank = blank
        self.eos = eos
        steps = self.log_probs.shape[0]
        empty = (np.full(steps, NEG_INF), np.cumsum(self.log_probs[:, blank]), 0.0)
        self._states: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray, float]] = {(): empty}

    def _extend(self, prefix: Tuple[int, ...], tokens: np.ndarray):
        r_n, r_b, _ = self.state(prefix)
        lp = self.log_probs
        steps = lp.shape[0]
        emit = lp[:, tokens]
        last = prefix[-1] if prefix else None
        phi = np.repeat(np.logaddexp(r_n, r_b)[:, None], len(tokens), axis=1)
        phi[:, tokens == last] = r_b[:, None]
        new_n = np.full((steps, len(tokens)), NEG_INF)
        new_b = np.full((steps, len(tokens)), NEG_INF)
        if not prefix:
            new_n[0] = emit[0]
        psi = new_n[0].copy()
        for t in range(1, steps):
            new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + emit[t]
            new_b[t] = np.logaddexp(new_b[t - 1], new_n[t - 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + emit[t])
        return new_n, new_b, psi

    def state(self, prefix: Tuple[int, ...]):
        prefix = tuple(prefix)
        if prefix not in self._states:
            parent = prefix[:-1]
            new_n, new_b, psi = self._extend(parent, np.array([prefix[-1]]))
            self._states[prefix] = (new_n[:, 0], new_b[:, 0], float(psi[0]))
        return self._states[prefix]

    def prefix_score(self, prefix: Sequence[int]) -> float:
        """log P(label sequence starts with prefix); 0 for the empty prefix."""
        return self.state(tuple(prefix))[2]

    def full_score(self, prefix: Sequence[int]) -> float:
        """log P(label sequence == prefix)."""
        r_n, r_b, _ = self.state(tuple(prefix))
        return float(np.logaddexp(r_n[-1], r_b[-1]))

    def score(self, prefix: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
        """Prefix score of prefix + token for each token; EOS gives the full-sequence score."""
        prefix = tuple(prefix)
        tokens = np.asarray(tokens, dtype=np.int64)
        scores = np.full(len(tokens), NEG_INF)
        symbols = tokens != self.eos
        if symbols.any():
            _, _, psi = self._extend(prefix, tokens[symbols])
            scores[symbols] = psi
        if (~symbols).any():
            scores[~symbols] = self.full_score(prefix)
        return scores


def ctc_prefix_score(log_probs, prefix: Sequence[int], next_token: int, eos: int = EOS_ID) -> float:
    """Stateless form of CtcPrefixScorer.score for a single extension."""
    return float(CtcPrefixScorer(log_probs, eos=eos).score(prefix, [next_token])[0])


def _encode_one(model, features, feat_len=None):
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeError(f"decode expects one utterance [T, n_mels], got {features.shape}")
    feat_len = features.shape[0] if feat_len is None else int(feat_len)
    enc_out, enc_lens = model.encode(features[None], np.array([feat_len]))
    frames = int(enc_lens[0])
    ctc_lp = log_softmax(model.ctc_logits(enc_out), axis=-1).numpy()[0, :frames]
    return enc_out, enc_lens, ctc_lp


def _next_token_log_probs(model, prefixes: List[List[int]], enc_out, enc_lens) -> np.ndarray:
    count = len(prefixes)
    tokens_in = np.asarray(prefixes, dtype=np.int64)
    logits = model.decode_logits(
        tokens_in, tf.repeat(enc_out, count, axis=0), np.repeat(enc_lens, count)
    )
    return log_softmax(logits[:, -1, :], axis=-1).numpy()


def greedy_attention_decode(model, features, feat_len=None, max_len: Optional[int] = None, max_len_ratio: float = 1.0) -> List[int]:
    """Argmax decoder loop; only EOS is allowed once max_len symbols were emitted."""
    enc_out, enc_lens, ctc_lp = _encode_one(model, features, feat_len)
    limit = max_len if max_len is not None else max(1, math.ceil(max_len_ratio * ctc_lp.shape[0]))
    tokens = [BOS_ID]
    for step in range(limit + 1):
        if step == limit:
            tokens.append(EOS_ID)
            break
        att = _next_token_log_probs(model, [tokens], enc_out, enc_lens)[0]
        # class index = id - 1; BOS (class 0) is never predicted
        best = int(np.argmax(att[EOS_ID - 1 :])) + EOS_ID
        tokens.append(best)
        if best == EOS_ID:
            break
    return [t for t in tokens[1:] if t != EOS_ID]


def beam_search_hypotheses(model, features, cfg: DecodeConfig, feat_len=None) -> List[Hypothesis]:
    """Runs the joint beam search and returns the finished hypotheses, best first.

    A hypothesis extended by token c scores
        (1 - ctc_weight) * att + ctc_weight * ctc_prefix + lm_weight * lm
    accumulated over its tokens. Pruning keeps the best beam_width extensions,
    ties broken by hypothesis rank then lower token id.
    """
    enc_out, enc_lens, ctc_lp = _encode_one(model, features, feat_len)
    frames = ctc_lp.shape[0]
    vocab = model.config.vocab_size
    limit = cfg.max_len if cfg.max_len is not None else max(1, math.ceil(cfg.max_len_ratio * frames))
    ctc_weight = cfg.ctc_weight if model.has_decoder else 1.0
    scorer = CtcPrefixScorer(ctc_lp) if ctc_weight > 0 else None
    use_lm = cfg.lm is not None and cfg.lm_weight > 0
    symbol_ids = np.arange(EOS_ID, vocab + 1)
    eos_only = np.array([EOS_ID])

    live = [Hypothesis()]
    finished: List[Hypothesis] = []
    for step in range(limit + 1):
        if not live:
            break
        allowed = symbol_ids if step < limit else eos_only
        att_lp = None
        if model.has_decoder and ctc_weight < 1.0:
            att_lp = _next_token_log_probs(model, [h.tokens for h in live], enc_out, enc_lens)
        candidates = []
        for rank, hyp in enumerate(live):
            att = hyp.att_score + (att_lp[rank, allowed - 1] if att_lp is not None else np.zeros(len(allowed)))
            ctc = scorer.score(hyp.tokens[1:], allowed) if scorer is not None else np.zeros(len(allowed))
            lm = np.zeros(len(allowed))
            if use_lm:
                lm = hyp.lm_score + np.asarray(cfg.lm(list(hyp.tokens)), dtype=np.float64)[allowed]
            total = lm * cfg.lm_weight if use_lm else np.zeros(len(allowed))
            if att_lp is not None:
                total = total + (1.0 - ctc_weight) * att
            if scorer is not None:
                total = total + ctc_weight * ctc
            for k, token in enumerate(allowed.tolist()):
                candidates.append((-float(total[k]), rank, token, float(att[k]), float(ctc[k]), float(lm[k])))
        candidates.sort(key=lambda item: (item[0], item[1], item[2]))

        next_live = []
        for neg_score, rank, token, att, ctc, lm in candidates[: cfg.beam_width]:
            hyp = Hypothesis(
                tokens=live[rank].tokens + [token],
                att_score=att,
                ctc_score=ctc,
                lm_score=lm,
                score=-neg_score,
                finished=token == EOS_ID,
            )
            (finished if hyp.finished else next_live).append(hyp)
        live = next_live

    # EOS is forced at the limit, so a collapse means every ending scored -inf (CTC or LM)
    if not any(np.isfinite(h.score) for h in finished):
        raise BeamCollapseError(f"no hypothesis reached EOS with a finite score within {limit} tokens")
    finished.sort(key=lambda h: -h.final_score(cfg.length_normalize))
    return finished


def beam_search(model, features, cfg: DecodeConfig, feat_len=None) -> List[int]:
    """Best finished hypothesis of the joint CTC/attention beam search, as token ids."""
    return beam_search_hypotheses(model, features, cfg, feat_len)[0].symbols


def ctc_greedy_batch(model, features, feat_lens) -> List[List[int]]:
    """Greedy CTC decode of a padded batch."""
    enc_out, enc_lens = model.encode(as_tensor(features, model.dtype), feat_lens)
    log_probs = log_softmax(model.ctc_logits(enc_out), axis=-1).numpy()
    return [greedy_ctc_decode(log_probs[b, : int(n)]) for b, n in enumerate(enc_lens)]
