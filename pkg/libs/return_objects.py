#!/usr/bin/env python3
# -*- coding: utf8 -*-
"""
This file provides the objects every command line command returns, and the
mapping from their error category to the process exit status.
"""
import json

from libs.speech_mamba.Errors import SpeechMambaError
from libs.utilities import NpEncoder

# exit status per error category; anything unknown exits with 1
EXIT_CODES = {
    "500": 1,
    "usage": 2,
    "missing_file": 3,
    "config": 4,
    "manifest": 5,
    "audio": 6,
    "vocabulary": 7,
    "dimension": 8,
    "mask": 9,
    "non_finite": 10,
    "alignment": 11,
    "beam_collapse": 12,
    "gradcheck": 13,
}


class Response:
    """
    An interface class meant as a return object. It holds either the result of a
    command or the error that stopped it, depending on its derived class.
    """

    @property
    def exit_code(self) -> int:
        return 0

    def to_json(self):
        """Method converting the response object into a json string; numpy values become plain numbers."""
        return json.dumps(
            self, default=lambda o: getattr(o, "__dict__", None) or NpEncoder().default(o), sort_keys=True
        )


class ErrorResponse(Response):
    """
    Represents an error to be passed back to the caller.

    Args:
        code (str): error category, e.g. "config" or "missing_file"; "500" for unexpected errors
        detail (str): error message describing the problem encountered
    """

    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail

    @classmethod
    def from_exception(cls, err: Exception) -> "ErrorResponse":
        """Toolkit errors keep their category, every other exception is a "500"."""
        code = err.code if isinstance(err, SpeechMambaError) else "500"
        return cls(code=code, detail=f"{type(err).__name__}: {err}")

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.code, 1)


class ResultResponse(Response):
    """
    Represents the result of a command.

    Args:
        result (dict): command result; must be JSON serializable
        metadata (dict, optional): command name, timings and similar bookkeeping
    """

    def __init__(self, result: dict, metadata: dict = None):
        self.result = result
        self.metadata = metadata
