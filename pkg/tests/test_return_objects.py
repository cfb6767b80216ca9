import json

import numpy as np

from libs.return_objects import EXIT_CODES, ErrorResponse, ResultResponse
from libs.speech_mamba.Errors import ConfigError, UsageError


def test_result_exits_zero_and_serializes_numpy():
    response = ResultResponse(result={"wer": np.float64(0.25), "counts": np.arange(2)}, metadata={"command": "score"})
    assert response.exit_code == 0
    document = json.loads(response.to_json())
    assert document == {"metadata": {"command": "score"}, "result": {"counts": [0, 1], "wer": 0.25}}


def test_toolkit_errors_keep_their_category():
    response = ErrorResponse.from_exception(ConfigError("unknown key foo"))
    assert response.code == "config"
    assert response.exit_code == EXIT_CODES["config"] == 4
    assert json.loads(response.to_json())["detail"] == "ConfigError: unknown key foo"
    assert ErrorResponse.from_exception(UsageError("missing command")).exit_code == 2


def test_other_exceptions_are_unexpected():
    response = ErrorResponse.from_exception(KeyError("x"))
    assert response.code == "500"
    assert response.exit_code == 1
    assert ErrorResponse(code="unheard_of", detail="").exit_code == 1
