#!/usr/bin/env python3
# -*- coding: utf8 -*-
"""
This file provides utility functions for json files, logging and the flat configuration file.
"""
import json
import logging
import os
from dataclasses import fields
from typing import Dict, Iterable, Optional

import numpy as np

from libs.speech_mamba.Errors import ConfigError, MissingFileError

SEED_ENV = "SPEECH_MAMBA_SEED"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class NpEncoder(json.JSONEncoder):
    """Class that extends the JSONEncoder to work with numpy objects
    by converting them to their standard counterparts.
    """

    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return super(NpEncoder, self).default(o)


def reformat_for_json(data):
    """Transform data into a json compatible format."""
    return json.loads(json.dumps({**data}, cls=NpEncoder))


def export_to_json(data, fp=None):
    """Writes json data to file.

    Args:
        data: The data to write
        fp (optional): The file path. If none specified, writes to model/data.json.
    """
    if not fp:
        fp = "model/data.json"
    folder = os.path.dirname(fp)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(fp, "w", encoding="utf-8") as file:
        json.dump(data, file, cls=NpEncoder, indent=2, sort_keys=True)


def configure_logging(path: str = "log.log", level=logging.INFO) -> logging.Logger:
    """Attaches a fresh FileHandler to the root logger; earlier file handlers are removed."""
    logger = logging.getLogger()
    logger.setLevel(level)
    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            logger.removeHandler(handler)
            handler.close()
    fh = logging.FileHandler(path, mode="w")
    fh.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(fh)
    return logger


def parse_override(text: str):
    """`key=value` -> (key, value); the value is read as JSON, plain text otherwise."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_flat_config(path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> dict:
    """Reads the flat JSON config and applies, in order, `--set` overrides,
    the SPEECH_MAMBA_SEED environment variable and an explicit seed.
    """
    config = {}
    if path:
        if not os.path.isfile(path):
            raise MissingFileError(f"config file {path} does not exist")
        with open(path, "r", encoding="utf-8") as file:
            try:
                config = json.load(file)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        if not isinstance(config, dict):
            raise ConfigError(f"config file {path} must hold a flat JSON object")
        nested = [key for key, value in config.items() if isinstance(value, dict)]
        if nested:
            raise ConfigError(f"config keys {nested} hold nested objects; the config is flat")
    for text in overrides:
        key, value = parse_override(text)
        config[key] = value
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            config["seed"] = int(env_seed)
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from err
    if seed is not None:
        config["seed"] = int(seed)
    return config


def route_config(config: dict, targets: Dict[str, type]) -> Dict[str, dict]:
    """Splits a flat config into keyword arguments per dataclass.

    A key goes to every dataclass declaring a field of that name; a key no
    dataclass declares is a schema violation.
    """
    routed = {label: {} for label in targets}
    unknown = []
    for key, value in config.items():
        owners = [label for label, cls in targets.items() if key in {f.name for f in fields(cls)}]
        if not owners:
            unknown.append(key)
        for label in owners:
            routed[label][key] = value
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return routed
