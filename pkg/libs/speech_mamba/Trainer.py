"""
This file provides the Trainer class which conducts the training process.
"""
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf
from tqdm import tqdm

from libs.speech_mamba.Checkpoints import (
    CheckpointMeta,
    assign_state,
    average_checkpoints,
    model_state,
    save_checkpoint,
)
from libs.speech_mamba.DataProcessor import AsrBatch, SpeechData
from libs.speech_mamba.Decoding import ctc_greedy_batch
from libs.speech_mamba.Errors import ConfigError, ImpossibleAlignmentError, NonFiniteError
from libs.speech_mamba.Metrics import DevMetric, TrainStepMetric, word_error_rate
from libs.speech_mamba.NeuralCore import set_seed
from libs.speech_mamba.Objectives import ctc_log_probs, ctc_loss, joint_loss, s2s_loss
from libs.speech_mamba.SpeechMambaNetworks import SpeechMambaModel, forward_asr

logger = logging.getLogger(__name__ + ".py")

SELECTION_METRICS = ("dev_loss", "dev_wer")


@dataclass
class TrainConfig:
    """Optimisation recipe. max_batch_length is the per-batch duration budget in seconds."""

    epochs: int = 100
    batch_size: int = 32
    max_batch_length: float = 500.0
    grad_accum: int = 4
    alpha: float = 0.3
    peak_lr: float = 1e-3
    warmup_steps: int = 25000
    label_smoothing: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    avg_top_k: int = 10
    selection_metric: str = "dev_loss"
    dev_wer_every: int = 1
    log_every: int = 1
    max_steps: Optional[int] = None
    output_dir: str = "model"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.max_batch_length <= 0:
            raise ConfigError("batch_size and max_batch_length must be positive")
        if self.grad_accum < 1:
            raise ConfigError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.peak_lr <= 0 or self.warmup_steps < 1:
            raise ConfigError("peak_lr must be positive and warmup_steps >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing outside [0, 1)")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.avg_top_k < 1:
            raise ConfigError(f"avg_top_k must be >= 1, got {self.avg_top_k}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.dev_wer_every < 0 or self.log_every < 1:
            raise ConfigError("dev_wer_every must be >= 0 and log_every >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


class NoamSchedule(tf.keras.optimizers.schedules.LearningRateSchedule):
    """Linear warmup to peak_lr, then inverse square root decay."""

    def __init__(self, peak_lr: float, warmup_steps: int):
        super().__init__()
        self.peak_lr = float(peak_lr)
        self.warmup_steps = int(warmup_steps)

    def __call__(self, step):
        # optimizer.iterations counts from 0
        step = tf.cast(step, tf.float32) + 1.0
        warmup = float(self.warmup_steps)
        return self.peak_lr * tf.minimum(step / warmup, tf.sqrt(warmup / step))

    def value(self, step: int) -> float:
        step = step + 1
        return self.peak_lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))

    def get_config(self):
        return {"peak_lr": self.peak_lr, "warmup_steps": self.warmup_steps}


class Trainer:
    """
    Class holding the required methods and attributes to conduct the training procedure.
    """

    def __init__(self, data: SpeechData, model: SpeechMambaModel, cfg: TrainConfig):
        """Initialize the optimizer and the metric objects for joint CTC/attention training.

        Args:
            data: SpeechData supplying the train and dev batches.
            model: SpeechMambaModel to optimize in place.
            cfg: TrainConfig. A model without decoder is trained with alpha = 1.
        """
        set_seed(cfg.seed)
        self.data = data
        self.model = model
        self.cfg = cfg
        self.alpha = cfg.alpha if model.has_decoder else 1.0
        if self.alpha != cfg.alpha:
            logger.info("model has no decoder, training with alpha = 1")
        self.schedule = NoamSchedule(cfg.peak_lr, cfg.warmup_steps)
        self.optimizer = tf.keras.optimizers.Adam(
            learning_rate=self.schedule, beta_1=0.9, beta_2=0.98, epsilon=1e-9
        )
        self.names, self.params = zip(*model.named_parameters())
        self.step_metric = TrainStepMetric()
        self.dev_metric = DevMetric(cfg.selection_metric)
        self.checkpoints: List[CheckpointMeta] = []
        self.step_counter = 0
        self.skipped_batches = 0

    def compute_loss(self, batch: AsrBatch, training: bool) -> Tuple[tf.Tensor, tf.Tensor, Optional[tf.Tensor]]:
        """Forward pass and joint objective of one padded batch.

        Returns:
            (combined, ctc, s2s); s2s is None for a model without decoder
        """
        tokens_in = batch.tokens_in if self.model.has_decoder else None
        out = forward_asr(self.model, batch.features, batch.feat_lens, tokens_in, training=training)
        ctc = ctc_loss(ctc_log_probs(out.ctc_logits), batch.ctc_targets, out.enc_lens)
        s2s = None
        if out.s2s_logits is not None:
            s2s = s2s_loss(out.s2s_logits, batch.dec_targets, smoothing=self.cfg.label_smoothing)
        return joint_loss(ctc, s2s, self.alpha), ctc, s2s

    def accumulate_gradients(self, micro_batches: Sequence[AsrBatch]):
        """Mean gradient of the joint loss over the micro-batches of one step that could be aligned.

        Returns:
            (gradients, mean loss terms as a dict, number of used micro-batches)
        """
        accumulated = [tf.zeros_like(tf.convert_to_tensor(p)) for p in self.params]
        totals = {"ctc": 0.0, "s2s": 0.0, "combined": 0.0}
        used = 0
        for batch in micro_batches:
            try:
                with tf.GradientTape() as tape:
                    combined, ctc, s2s = self.compute_loss(batch, training=True)
            except ImpossibleAlignmentError as err:
                self.skipped_batches += 1
                logger.warning(
                    "skipping batch %s: %s (%d skipped so far)", batch.ids, err, self.skipped_batches
                )
                continue
            if not np.isfinite(float(combined)):
                raise NonFiniteError(f"non-finite loss {float(combined)} in batch {batch.ids}")
            grads = tape.gradient(
                combined, list(self.params), unconnected_gradients=tf.UnconnectedGradients.ZERO
            )
            accumulated = [a + tf.convert_to_tensor(g) for a, g in zip(accumulated, grads)]
            totals["ctc"] += float(ctc)
            totals["s2s"] += float(s2s) if s2s is not None else 0.0
            totals["combined"] += float(combined)
            used += 1
        if used:
            totals = {k: v / used for k, v in totals.items()}
            accumulated = [a / float(used) for a in accumulated]
        if not self.model.has_decoder:
            totals["s2s"] = None
        return accumulated, totals, used

    def train_step(self, micro_batches: Sequence[AsrBatch]) -> dict:
        """One optimizer update from up to grad_accum micro-batches."""
        grads, totals, used = self.accumulate_gradients(micro_batches)
        lr = self.schedule.value(int(self.optimizer.iterations.numpy()))
        if not used:
            return {**totals, "lr": lr, "grad_norm": None, "applied": False}
        clipped, norm = tf.clip_by_global_norm(grads, self.cfg.grad_clip)
        if not np.isfinite(float(norm)):
            ids = [i for batch in micro_batches for i in batch.ids]
            raise NonFiniteError(f"non-finite gradient norm in batches {ids}")
        self.optimizer.apply_gradients(zip(clipped, self.params))
        self.step_counter += 1
        return {**totals, "lr": lr, "grad_norm": float(norm), "applied": True}

    def evaluate(self, compute_wer: bool) -> Tuple[float, Optional[float]]:
        """Mean dev loss and, when requested, greedy CTC dev WER."""
        batches = self.data.get_dev_batches(self.cfg.max_batch_length, self.cfg.batch_size)
        if not batches:
            raise ConfigError("the development set is empty")
        losses, weights = [], []
        refs, hyps = [], []
        for batch in batches:
            combined, _, _ = self.compute_loss(batch, training=False)
            losses.append(float(combined))
            weights.append(len(batch.ids))
            if compute_wer:
                decoded = ctc_greedy_batch(self.model, batch.features, batch.feat_lens)
                refs.extend(self.data.vocab.detokenize(t) for t in batch.ctc_targets)
                hyps.extend(self.data.vocab.detokenize(t) for t in decoded)
        dev_loss = float(np.average(losses, weights=weights))
        dev_wer = word_error_rate(refs, hyps).wer if compute_wer else None
        return dev_loss, dev_wer

    def _log_step(self, epoch: int, terms: dict):
        for key in ("ctc", "s2s", "combined", "lr", "grad_norm"):
            self.step_metric.update_key(key, terms[key])
        self.step_metric.update_key("step", self.step_counter)
        self.step_metric.update_key("epoch", epoch)
        self.step_metric.finalize()

    def _end_epoch(self, epoch: int):
        compute_wer = self.cfg.selection_metric == "dev_wer" or (
            self.cfg.dev_wer_every > 0 and epoch % self.cfg.dev_wer_every == 0
        )
        dev_loss, dev_wer = self.evaluate(compute_wer)
        self.dev_metric.update_key("step", self.step_counter)
        self.dev_metric.update_key("epoch", epoch)
        self.dev_metric.update_key("dev_loss", dev_loss)
        self.dev_metric.update_key("dev_wer", dev_wer)
        self.dev_metric.finalize()
        metric = dev_loss if self.cfg.selection_metric == "dev_loss" else dev_wer
        path = os.path.join(self.cfg.output_dir, "checkpoints", f"epoch-{epoch:04d}.json")
        meta = CheckpointMeta(step=self.step_counter, epoch=epoch, dev_metric=metric, path=path)
        save_checkpoint(path, model_state(self.model), {**asdict(meta), "config": asdict(self.model.config)})
        self.checkpoints.append(meta)
        logger.info(
            "epoch %d: dev_loss %.4f dev_wer %s%s",
            epoch,
            dev_loss,
            "-" if dev_wer is None else f"{dev_wer:.4f}",
            " (best so far)" if self.dev_metric.is_best() else "",
        )

    def train(self) -> dict:
        """Run the training procedure: per step accumulate grad_accum micro-batches and update,
        per epoch evaluate on the dev set and save a checkpoint. At the end the top avg_top_k
        checkpoints are averaged into the model.

        Returns:
            dict: summary with the averaged checkpoint path, steps, skipped batches and last metrics
        """
        tic = time.perf_counter()
        os.makedirs(self.cfg.output_dir, exist_ok=True)
        finished = False
        for epoch in range(1, self.cfg.epochs + 1):
            seed = self.cfg.seed + epoch if self.cfg.shuffle else None
            batches = self.data.get_train_batches(self.cfg.max_batch_length, self.cfg.batch_size, seed)
            groups = [batches[i : i + self.cfg.grad_accum] for i in range(0, len(batches), self.cfg.grad_accum)]
            for group in tqdm(groups, desc=f"epoch {epoch}", disable=len(groups) < 2):
                terms = self.train_step(group)
                if terms["applied"] and self.step_counter % self.cfg.log_every == 0:
                    self._log_step(epoch, terms)
                if self.cfg.max_steps is not None and self.step_counter >= self.cfg.max_steps:
                    finished = True
                    break
            self._end_epoch(epoch)
            if finished:
                logger.info("reached max_steps=%d", self.cfg.max_steps)
                break

        metrics_path = os.path.join(self.cfg.output_dir, "metrics.csv")
        self.step_metric.write_csv(metrics_path)
        self.dev_metric.write_csv(os.path.join(self.cfg.output_dir, "dev_metrics.csv"))
        averaged, selected = average_checkpoints(self.checkpoints, self.cfg.avg_top_k)
        assign_state(self.model, averaged)
        averaged_path = os.path.join(self.cfg.output_dir, "averaged.json")
        save_checkpoint(
            averaged_path,
            averaged,
            {"averaged": [m.path for m in selected], "step": self.step_counter, "config": asdict(self.model.config)},
        )
        logger.info(
            "training finished after %d steps in %.1fs, %d batches skipped",
            self.step_counter,
            time.perf_counter() - tic,
            self.skipped_batches,
        )
        return {
            "checkpoint": averaged_path,
            "metrics": metrics_path,
            "steps": self.step_counter,
            "skipped_batches": self.skipped_batches,
            "averaged_checkpoints": [m.path for m in selected],
            "last_dev": self.dev_metric.get_last_metrics(),
        }
