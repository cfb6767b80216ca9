"""
This file stores and restores model parameters and averages the best checkpoints.

A checkpoint is a JSON document with a format tag, a version, free metadata
and, per canonical parameter name, the shape and the row-major values. Keys
are sorted and floats use their shortest round-trip repr, so save -> load ->
save reproduces the file byte for byte.
"""
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from libs.speech_mamba.Errors import ConfigError, MissingFileError, ShapeError
from libs.utilities import NpEncoder

logger = logging.getLogger(__name__ + ".py")

FORMAT_TAG = "speech-mamba-checkpoint"
FORMAT_VERSION = 1


@dataclass
class CheckpointMeta:
    step: int
    epoch: int
    dev_metric: float
    path: str

    def __post_init__(self):
        if not math.isfinite(self.dev_metric):
            raise ConfigError(f"checkpoint {self.path} has non-finite dev metric {self.dev_metric}")


def model_state(model) -> "OrderedDict[str, np.ndarray]":
    """Canonical name -> float64 copy of every trainable parameter."""
    return OrderedDict(
        (name, np.array(variable.numpy(), dtype=np.float64)) for name, variable in model.named_parameters()
    )


def assign_state(model, state: dict):
    """Copies a state into the model; names and shapes must match exactly."""
    names = set()
    for name, variable in model.named_parameters():
        names.add(name)
        if name not in state:
            raise ConfigError(f"checkpoint lacks parameter {name}")
        values = np.asarray(state[name])
        if tuple(values.shape) != tuple(variable.shape):
            raise ShapeError(f"parameter {name}: checkpoint shape {values.shape} != model shape {tuple(variable.shape)}")
        variable.assign(values.astype(variable.dtype if isinstance(variable.dtype, str) else variable.dtype.name))
    extra = set(state) - names
    if extra:
        raise ConfigError(f"checkpoint holds unknown parameters {sorted(extra)[:5]}")


def save_checkpoint(path, state: dict, meta: dict = None):
    document = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "parameters": {
            name: {"shape": list(np.shape(values)), "values": np.asarray(values, dtype=np.float64).reshape(-1).tolist()}
            for name, values in state.items()
        },
    }
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, cls=NpEncoder, sort_keys=True)


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    if not os.path.isfile(path):
        raise MissingFileError(f"checkpoint {path} does not exist")
    with open(path, "r", encoding="utf-8") as file:
        document = json.load(file)
    if document.get("format") != FORMAT_TAG or document.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path} is not a version {FORMAT_VERSION} checkpoint")
    state = OrderedDict()
    for name in sorted(document["parameters"]):
        entry = document["parameters"][name]
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(entry["shape"])):
            raise ShapeError(f"{path}: parameter {name} holds {values.size} values for shape {entry['shape']}")
        state[name] = values.reshape(entry["shape"])
    return state, document["meta"]


def average_checkpoints(metas: Sequence[CheckpointMeta], k: int) -> Tuple["OrderedDict[str, np.ndarray]", List[CheckpointMeta]]:
    """Elementwise mean of the k checkpoints with the lowest dev metric."""
    if not metas:
        raise ConfigError("average_checkpoints needs at least one checkpoint")
    if k < 1:
        raise ConfigError("k must be >= 1")
    ranked = sorted(metas, key=lambda m: (m.dev_metric, m.step))
    if len(ranked) < k:
        logger.warning("only %d checkpoints available, averaging all of them instead of %d", len(ranked), k)
    selected = ranked[:k]
    states = [load_checkpoint(meta.path)[0] for meta in selected]
    reference = states[0]
    for meta, state in zip(selected[1:], states[1:]):
        if set(state) != set(reference):
            raise ShapeError(f"checkpoint {meta.path} holds different parameters")
        for name, values in state.items():
            if values.shape != reference[name].shape:
                raise ShapeError(f"checkpoint {meta.path}: {name} has shape {values.shape}, expected {reference[name].shape}")
    averaged = OrderedDict(
        (name, np.mean(np.stack([state[name] for state in states]), axis=0)) for name in reference
    )
    logger.info("averaged %d checkpoints: %s", len(selected), [m.path for m in selected])
    return averaged, selected
