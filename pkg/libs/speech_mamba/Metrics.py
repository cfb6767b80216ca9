"""
This file contains the word error rate scorer and the classes tracking training metrics.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__ + ".py")

Words = Union[str, Sequence[str]]


@dataclass
class EditCounts:
    """Substitutions, insertions and deletions of one or many aligned pairs."""

    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )


@dataclass
class WerResult:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    sentences: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _words(text: Words) -> List[str]:
    if isinstance(text, str):
        return text.split()
    return list(text)


def align(ref: Words, hyp: Words) -> EditCounts:
    """Unit-cost Levenshtein alignment of two word sequences with a backtrace.

    On equal cost the backtrace prefers match/substitution, then deletion,
    then insertion.
    """
    ref, hyp = _words(ref), _words(hyp)
    n_ref, n_hyp = len(ref), len(hyp)
    trellis = np.zeros((n_ref + 1, n_hyp + 1), dtype=np.int64)
    trellis[:, 0] = np.arange(n_ref + 1)
    trellis[0, :] = np.arange(n_hyp + 1)
    for i in range(1, n_ref + 1):
        for j in range(1, n_hyp + 1):
            change = trellis[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            trellis[i, j] = min(change, trellis[i - 1, j] + 1, trellis[i, j - 1] + 1)

    counts = EditCounts(ref_words=n_ref)
    i, j = n_ref, n_hyp
    while i > 0 or j > 0:
        if i > 0 and j > 0 and trellis[i, j] == trellis[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            counts.substitutions += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and trellis[i, j] == trellis[i - 1, j] + 1:
            counts.deletions += 1
            i -= 1
        else:
            counts.insertions += 1
            j -= 1
    return counts


def word_error_rate(refs: Sequence[Words], hyps: Sequence[Words]) -> WerResult:
    """Corpus WER = (S + I + D) / total reference words."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = EditCounts()
    for ref, hyp in zip(refs, hyps):
        total = total + align(ref, hyp)
    if total.ref_words == 0:
        raise ValueError("reference corpus contains no words")
    return WerResult(
        wer=total.errors / total.ref_words,
        substitutions=total.substitutions,
        insertions=total.insertions,
        deletions=total.deletions,
        ref_words=total.ref_words,
        sentences=len(refs),
    )


class Metric:
    """Interface class for collecting and tracking metrics.

    Values of the current record are set with update_key and moved into the
    history by finalize. TrainStepMetric tracks optimizer steps, DevMetric
    tracks the per-epoch evaluation on the development set.
    """

    def __init__(self):
        self.metrics = self._metrics_template()
        self.metric_history = []

    def update_key(self, key, value):
        """Updates a specified metric to a given value.

        Args:
            key: A string specifying the metric to update.
            Raises a KeyError if it does not exist
            value: The value to update the metric to.
        """
        if key not in self.metrics:
            raise KeyError(f"trying to update nonexistent metric {key}")
        self.metrics[key] = value

    def _metrics_template(self):
        """Creation function for an empty set of metrics"""
        return {"step": None, "epoch": None}

    def finalize(self):
        """Stores the current record in the history and starts an empty one."""
        self.metric_history.append(self.metrics)
        self.metrics = self._metrics_template()

    def get_last_metrics(self):
        """Returns a dictionary containing the last set of metrics."""
        return self.metric_history[-1].copy()

    def history_from_key(self, key):
        """Get a list of all historic entries for a given key."""
        return [m[key] for m in self.metric_history]

    def get(self, key):
        """Return the value of the metric specified by key."""
        return self.metrics[key]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metric_history, columns=list(self._metrics_template()))

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info("wrote %d metric rows to %s", len(self.metric_history), path)


class TrainStepMetric(Metric):
    """Loss terms, learning rate and gradient norm of every optimizer step."""

    def _metrics_template(self):
        template = super()._metrics_template()
        template.update({"ctc": None, "s2s": None, "combined": None, "lr": None, "grad_norm": None})
        return template

    def smoothed(self, key: str, window: int = 10) -> np.ndarray:
        """Moving average of a logged column."""
        values = np.asarray(self.history_from_key(key), dtype=np.float64)
        if len(values) < window:
            return values
        return np.convolve(values, np.ones(window) / window, mode="valid")


class DevMetric(Metric):
    """Development-set evaluation after every epoch."""

    def __init__(self, selection_metric: str = "dev_loss"):
        self.selection_metric = selection_metric
        super().__init__()

    def _metrics_template(self):
        template = super()._metrics_template()
        template.update({"dev_loss": None, "dev_wer": None})
        return template

    def is_best(self):
        """True if the last finalized record has the lowest selection metric so far."""
        values = [v for v in self.history_from_key(self.selection_metric) if v is not None]
        if not values:
            return False
        return values[-1] <= min(values)
