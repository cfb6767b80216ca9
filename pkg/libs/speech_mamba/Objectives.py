"""
This file holds the training objectives: CTC on the encoder, label smoothed
cross-entropy on the decoder and their alpha weighted sum.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import tensorflow as tf

from libs.speech_mamba.Errors import (
    ConfigError,
    ImpossibleAlignmentError,
    ShapeError,
    VocabularyError,
)
from libs.speech_mamba.NeuralCore import MASK_VALUE, as_tensor, log_softmax

logger = logging.getLogger(__name__ + ".py")

DECODER_PAD = -1


@dataclass
class LossBreakdown:
    """Loss terms of one step; combined = alpha * ctc + (1 - alpha) * s2s."""

    ctc: float
    s2s: float
    combined: float
    alpha: float

    @classmethod
    def from_terms(cls, ctc, s2s, alpha):
        s2s_value = None if s2s is None else float(s2s)
        return cls(
            ctc=float(ctc),
            s2s=0.0 if s2s_value is None else s2s_value,
            combined=float(joint_loss(float(ctc), s2s_value, alpha)),
            alpha=float(alpha),
        )


def _ragged_targets(targets, target_lens) -> List[List[int]]:
    if target_lens is None:
        return [[int(t) for t in row] for row in targets]
    targets = np.asarray(targets)
    return [[int(t) for t in targets[b, : int(n)]] for b, n in enumerate(target_lens)]


def required_frames(target: Sequence[int]) -> int:
    """Minimum number of frames aligning `target`: one per label plus a blank between repeats."""
    repeats = sum(1 for prev, cur in zip(target[:-1], target[1:]) if prev == cur)
    return len(target) + repeats


def ctc_loss(
    log_probs,
    targets,
    input_lens,
    target_lens=None,
    blank: int = 0,
    reduction: str = "mean",
) -> tf.Tensor:
    """Negative log-likelihood of the targets under CTC.

    Runs the log-space forward algorithm over the extended label sequence
    (blank, y1, blank, ..., yL, blank) for the whole batch at once.

    Args:
        log_probs: [B, T, C] log-softmax outputs, C = V + 1 with the blank at `blank`
        targets: ragged list of id lists, or a padded [B, L] array with `target_lens`
        input_lens: valid frames per utterance
        target_lens: target lengths when `targets` is padded
        reduction: "mean" over utterances, "sum", or "none" for per-utterance values

    Returns:
        scalar loss, or [B] losses for reduction="none"
    """
    log_probs = as_tensor(log_probs)
    if log_probs.shape.rank != 3:
        raise ShapeError(f"log_probs must be [B, T, C], got {log_probs.shape}")
    batch, steps, classes = (int(d) for d in log_probs.shape)
    targets = _ragged_targets(targets, target_lens)
    input_lens = np.asarray(input_lens, dtype=np.int64).reshape(-1)
    if len(targets) != batch or len(input_lens) != batch:
        raise ShapeError(
            f"batch of {batch} log_probs with {len(targets)} targets and {len(input_lens)} lengths"
        )
    if input_lens.min() < 1 or input_lens.max() > steps:
        raise ShapeError(f"input lengths must lie in [1, {steps}], got {input_lens.tolist()}")

    for index, target in enumerate(targets):
        if any(t == blank or t < 0 or t >= classes for t in target):
            raise VocabularyError(f"utterance {index}: CTC target ids must lie in [1, {classes - 1}]")
        if required_frames(target) > input_lens[index]:
            raise ImpossibleAlignmentError(
                f"utterance {index}: {input_lens[index]} frames cannot align "
                f"{len(target)} labels (need {required_frames(target)})",
                utterance_index=index,
            )

    max_label = max((len(t) for t in targets), default=0)
    states = 2 * max_label + 1
    extended = np.full((batch, states), blank, dtype=np.int64)
    label_lens = np.array([len(t) for t in targets], dtype=np.int64)
    for b, target in enumerate(targets):
        extended[b, 1 : 2 * len(target) : 2] = target
    state_index = np.arange(states)[None, :]
    valid = state_index < (2 * label_lens + 1)[:, None]
    skip = np.zeros((batch, states), dtype=bool)
    skip[:, 2:] = (extended[:, 2:] != blank) & (extended[:, 2:] != extended[:, :-2])
    start = (state_index == 0) | ((state_index == 1) & (label_lens > 0)[:, None])

    dtype = log_probs.dtype
    masked = tf.constant(MASK_VALUE, dtype=dtype)
    emissions = tf.gather(log_probs, tf.constant(extended), axis=2, batch_dims=1)
    valid_t = tf.constant(valid)
    skip_t = tf.constant(skip)

    alpha = tf.where(tf.constant(start), emissions[:, 0, :], masked)
    for step in range(1, steps):
        shift_one = tf.concat([tf.fill([batch, 1], masked), alpha[:, :-1]], axis=1)
        shift_two = tf.concat([tf.fill([batch, 2], masked), alpha[:, :-2]], axis=1)[:, :states]
        shift_two = tf.where(skip_t, shift_two, masked)
        merged = tf.reduce_logsumexp(tf.stack([alpha, shift_one, shift_two], axis=0), axis=0)
        updated = tf.where(valid_t, merged + emissions[:, step, :], masked)
        active = tf.constant((step < input_lens)[:, None])
        alpha = tf.where(active, updated, alpha)

    last = tf.gather(alpha, tf.constant(2 * label_lens), axis=1, batch_dims=1)
    before_last = tf.gather(alpha, tf.constant(np.maximum(2 * label_lens - 1, 0)), axis=1, batch_dims=1)
    before_last = tf.where(tf.constant(label_lens > 0), before_last, masked)
    log_likelihood = tf.reduce_logsumexp(tf.stack([last, before_last], axis=0), axis=0)
    losses = -log_likelihood
    if reduction == "none":
        return losses
    if reduction == "sum":
        return tf.reduce_sum(losses)
    if reduction == "mean":
        return tf.reduce_mean(losses)
    raise ConfigError(f"unknown CTC reduction {reduction}")


def s2s_loss(logits, targets, smoothing: float = 0.1, pad_id: int = DECODER_PAD) -> tf.Tensor:
    """Label smoothed cross-entropy averaged over non-pad positions.

    Args:
        logits: [B, Ty, V] decoder outputs
        targets: [B, Ty] decoder class indices (token id - 1), `pad_id` where padded
        smoothing: weight moved from the target onto a uniform distribution
    """
    logits = as_tensor(logits)
    vocab = int(logits.shape[-1])
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != tuple(logits.shape[:2]):
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing {smoothing} outside [0, 1)")
    keep = targets != pad_id
    if not keep.any():
        raise ShapeError("s2s_loss needs at least one non-pad target")
    real = targets[keep]
    if real.min() < 0 or real.max() >= vocab:
        raise VocabularyError(f"decoder targets must lie in [0, {vocab}), got {real.min()}..{real.max()}")

    log_p = log_softmax(logits, axis=-1)
    onehot = np.zeros(targets.shape + (vocab,))
    onehot[keep, real] = 1.0
    smoothed = (1.0 - smoothing) * onehot + smoothing / vocab
    smoothed = tf.constant(smoothed, dtype=log_p.dtype)
    per_token = -tf.reduce_sum(smoothed * log_p, axis=-1)
    weights = tf.constant(keep.astype(np.float64), dtype=log_p.dtype)
    return tf.reduce_sum(per_token * weights) / float(keep.sum())


def joint_loss(ctc, s2s, alpha: float):
    """alpha * ctc + (1 - alpha) * s2s; s2s may be None only when alpha == 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    if s2s is None:
        if alpha != 1.0:
            raise ConfigError("a model without decoder needs alpha = 1")
        return ctc
    return alpha * ctc + (1.0 - alpha) * s2s


def ctc_log_probs(ctc_logits) -> tf.Tensor:
    return log_softmax(ctc_logits, axis=-1)
