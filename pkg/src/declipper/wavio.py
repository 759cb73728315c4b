"""16-bit PCM mono WAV reading and writing (stdlib ``wave`` backed)."""

from __future__ import annotations

import wave

import numpy as np

from .signal_core import Waveform

_SCALE = 32768.0


class UnsupportedWavError(ValueError):
    pass


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise UnsupportedWavError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise UnsupportedWavError(f"{path}: truncated header") from exc
    if channels != 1:
        raise UnsupportedWavError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise UnsupportedWavError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _SCALE, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Int16 codes the writer would store for ``samples``."""
    return np.clip(np.round(np.asarray(samples) * _SCALE), -32768, 32767).astype("<i2")


def write_wav(path, x: Waveform) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(x.sample_rate)
        fh.writeframes(quantize(x.samples).tobytes())


def quantized(x: Waveform) -> Waveform:
    """What ``read_wav(write_wav(x))`` returns, without touching disk."""
    return x.with_samples(quantize(x.samples).astype(np.float64) / _SCALE)
