"""
This file handles audio input/output, resampling and log-Mel filterbank extraction.
"""
import logging
import math
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import librosa
import numpy as np
import soundfile as sf
from scipy import signal

from libs.speech_mamba.Errors import AudioError, ConfigError, MissingFileError

logger = logging.getLogger(__name__ + ".py")

TARGET_RATE = 16000


@dataclass(frozen=True)
class FbankConfig:
    """Filterbank settings: 25 ms Hamming window, 10 ms hop, 512-point FFT, HTK Mel."""

    sample_rate: int = TARGET_RATE
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    mel_fmin: float = 20.0
    mel_fmax: Optional[float] = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.win_ms < self.hop_ms or self.hop_ms <= 0:
            raise ConfigError(f"need win_ms >= hop_ms > 0, got {self.win_ms} / {self.hop_ms}")
        if self.fft_size < self.win_length:
            raise ConfigError(f"fft_size {self.fft_size} is shorter than the window {self.win_length}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if not 0 <= self.mel_fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= mel_fmin < mel_fmax <= sample_rate / 2")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.mel_fmax is None else self.mel_fmax


def read_audio(path) -> Tuple[np.ndarray, int]:
    """Reads a mono WAV/FLAC file as float64 samples in [-1, 1]."""
    if not os.path.isfile(path):
        raise MissingFileError(f"audio file {path} does not exist")
    try:
        samples, rate = sf.read(path, dtype="float64", always_2d=True)
    except RuntimeError as err:
        raise AudioError(f"cannot read audio {path}: {err}") from err
    if samples.shape[1] != 1:
        raise AudioError(f"{path} has {samples.shape[1]} channels, mono is required")
    return samples[:, 0], int(rate)


def audio_duration(path) -> float:
    """Duration in seconds from the file header."""
    if not os.path.isfile(path):
        raise MissingFileError(f"audio file {path} does not exist")
    info = sf.info(path)
    return info.frames / float(info.samplerate)


def write_audio(path, samples, rate: int):
    """Writes 16-bit PCM; the container follows the file extension."""
    sf.write(path, np.asarray(samples, dtype=np.float64), int(rate), subtype="PCM_16")


def resample(samples, src_rate: int, dst_rate: int = TARGET_RATE) -> np.ndarray:
    """Polyphase resampling; the output has round(len * dst / src) samples."""
    if src_rate <= 0 or dst_rate <= 0:
        raise AudioError(f"sample rates must be positive, got {src_rate} -> {dst_rate}")
    if int(src_rate) != src_rate or int(dst_rate) != dst_rate:
        raise AudioError(f"only integer sample rates are supported, got {src_rate} -> {dst_rate}")
    if src_rate == dst_rate:
        return samples
    samples = np.asarray(samples, dtype=np.float64)
    divisor = math.gcd(int(src_rate), int(dst_rate))
    up, down = int(dst_rate) // divisor, int(src_rate) // divisor
    out = signal.resample_poly(samples, up, down)
    length = int(round(len(samples) * dst_rate / src_rate))
    if len(out) >= length:
        return out[:length]
    return np.pad(out, (0, length - len(out)))


def num_frames(num_samples: int, cfg: FbankConfig) -> int:
    """1 + floor((len - window) / hop)."""
    return 1 + (num_samples - cfg.win_length) // cfg.hop_length


@lru_cache(maxsize=8)
def _mel_matrix(cfg: FbankConfig) -> np.ndarray:
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.fft_size,
        n_mels=cfg.n_mels,
        fmin=cfg.mel_fmin,
        fmax=cfg.fmax,
        htk=True,
        norm=None,
        dtype=np.float64,
    )


@lru_cache(maxsize=8)
def _window(length: int) -> np.ndarray:
    return signal.get_window("hamming", length, fftbins=False)


def fbank(samples, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Log-Mel filterbank of 16 kHz mono audio.

    Frames are taken without centering, Hamming windowed and zero-padded to
    fft_size; Mel filters weight the magnitude spectrum.

    Returns:
        [T, n_mels] float64 with T = 1 + (len - win) // hop
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise AudioError(f"fbank expects mono samples, got shape {samples.shape}")
    if len(samples) < cfg.win_length:
        raise AudioError(f"{len(samples)} samples are shorter than one {cfg.win_length}-sample window")
    frames = num_frames(len(samples), cfg)
    index = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(frames)[:, None]
    framed = samples[index] * _window(cfg.win_length)
    magnitude = np.abs(np.fft.rfft(framed, n=cfg.fft_size, axis=-1))
    energies = magnitude @ _mel_matrix(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def load_features(path, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """read -> resample to cfg.sample_rate -> fbank."""
    samples, rate = read_audio(path)
    return fbank(resample(samples, rate, cfg.sample_rate), cfg)


def write_feature_cache(path, features):
    """Little-endian int32 T, int32 D, then T*D float32 values row-major."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise AudioError(f"feature cache expects [T, D], got {features.shape}")
    with open(path, "wb") as file:
        file.write(struct.pack("<ii", *features.shape))
        file.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as file:
        header = file.read(8)
        if len(header) != 8:
            raise AudioError(f"feature cache {path} is truncated")
        steps, dim = struct.unpack("<ii", header)
        values = np.frombuffer(file.read(), dtype="<f4")
    if values.size != steps * dim:
        raise AudioError(f"feature cache {path} holds {values.size} values, expected {steps * dim}")
    return values.reshape(steps, dim).astype(np.float64)
