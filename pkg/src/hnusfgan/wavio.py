"""Mono WAV reading and writing on top of ``scipy.io.wavfile``."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE, AudioBuffer


class WavError(ValueError):
    pass


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> AudioBuffer:
    """Read a mono PCM or float WAV file scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise WavError(f"unreadable audio '{path}': {exc}") from exc
    if data.ndim != 1:
        if data.ndim == 2 and data.shape[1] == 1:
            data = data[:, 0]
        else:
            raise WavError("mono required")
    if expected_rate is not None and rate != expected_rate:
        raise WavError(f"sample rate must be {expected_rate} Hz, got {rate}")
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        samples = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        samples = data.astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise WavError("audio contains NaN or Inf")
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer, subtype: str = "pcm16") -> None:
    """Write ``audio`` as 16-bit PCM (clipped) or 32-bit float."""
    x = np.asarray(audio.samples, dtype=np.float64)
    if subtype == "pcm16":
        data = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    elif subtype == "float32":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown subtype '{subtype}'")
    wavfile.write(str(path), audio.sample_rate, data)
