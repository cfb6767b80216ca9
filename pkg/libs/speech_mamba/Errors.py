"""
This file holds the exception hierarchy of the speech recognition toolkit.

Every error carries a short category code. The entry point turns the code
into an ErrorResponse and a process exit status.
"""


class SpeechMambaError(Exception):
    """Base class of all toolkit errors."""

    code = "500"


class ShapeError(SpeechMambaError, ValueError):
    """Raised when tensor dimensions are incompatible."""

    code = "dimension"


class MaskError(SpeechMambaError, ValueError):
    """Raised when an attention mask leaves a query row without visible keys."""

    code = "mask"


class NonFiniteError(SpeechMambaError, ArithmeticError):
    """Raised when a loss, activation or gradient is NaN or infinite."""

    code = "non_finite"


class ImpossibleAlignmentError(SpeechMambaError, ValueError):
    """Raised when a CTC target cannot be aligned to the available frames."""

    code = "alignment"

    def __init__(self, message, utterance_index=None):
        super().__init__(message)
        self.utterance_index = utterance_index


class BeamCollapseError(SpeechMambaError, RuntimeError):
    """Raised when the beam search finishes without any complete hypothesis."""

    code = "beam_collapse"


class ConfigError(SpeechMambaError, ValueError):
    """Raised for invalid configuration values or unknown config keys."""

    code = "config"


class ManifestError(SpeechMambaError, ValueError):
    """Raised for malformed manifests, duplicate ids or missing audio."""

    code = "manifest"


class AudioError(SpeechMambaError, ValueError):
    """Raised for unreadable, multichannel or too short audio."""

    code = "audio"


class VocabularyError(SpeechMambaError, ValueError):
    """Raised for out-of-vocabulary symbols and out-of-range token ids."""

    code = "vocabulary"


class UsageError(SpeechMambaError, ValueError):
    """Raised for unknown command line flags or subcommands."""

    code = "usage"


class MissingFileError(SpeechMambaError, FileNotFoundError):
    """Raised when an input file given on the command line does not exist."""

    code = "missing_file"
