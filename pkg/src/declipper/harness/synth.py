"""Synthetic speech-like test material.

Voiced "words" are harmonic complexes with a drifting, vibrato-modulated
pitch, a moving two-formant spectral envelope and a syllabic amplitude
envelope. A tilted aspiration noise rides on each word so the spectrum has
no empty bands, and words are separated by short silences.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from ..signal_core import DEFAULT_SAMPLE_RATE, Waveform


def _formant_gain(freqs, f1, f2):
    def peak(fc, bw):
        return 1.0 / np.sqrt(1.0 + ((freqs - fc) / bw) ** 2)

    return 0.15 + peak(f1, 120.0) + 0.6 * peak(f2, 200.0)


def synthetic_utterance(seed: int, duration: float = 2.0,
                        sample_rate: int = DEFAULT_SAMPLE_RATE,
                        peak: float = 0.9, max_harmonic_hz: float = 3800.0,
                        aspiration_db: float = -26.0) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.zeros(n)

    f0_base = rng.uniform(95.0, 230.0)
    pos = int(rng.uniform(0.05, 0.15) * sample_rate)
    while pos < n - int(0.15 * sample_rate):
        length = min(int(rng.uniform(0.25, 0.6) * sample_rate), n - pos)
        seg_t = t[:length]
        dur = length / sample_rate
        drift = f0_base * (1.0 + rng.uniform(-0.15, 0.15) * seg_t / dur)
        vib = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(4.0, 6.5) * seg_t + rng.uniform(0, 2 * np.pi))
        f0 = drift * vib
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        f1 = np.linspace(rng.uniform(300, 800), rng.uniform(300, 800), length)
        f2 = np.linspace(rng.uniform(900, 2400), rng.uniform(900, 2400), length)
        seg = np.zeros(length)
        for h in range(1, int(max_harmonic_hz / f0_base) + 1):
            fh = h * f0
            gain = _formant_gain(fh, f1, f2) / h**0.7
            gain = np.where(fh < sample_rate / 2 - 200, gain, 0.0)
            seg += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        breath = lfilter([1.0], [1.0, -0.6], rng.standard_normal(length))
        seg += breath * (np.std(seg) / np.std(breath) * 10 ** (aspiration_db / 20))
        # syllabic envelope: raised-cosine attack/decay with a slow wobble
        env = np.sin(np.pi * np.arange(length) / length) ** 0.6
        env *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * seg_t)
        out[pos : pos + length] += rng.uniform(0.5, 1.0) * env * seg
        pos += length + int(rng.uniform(0.05, 0.2) * sample_rate)

    out += 1e-4 * rng.standard_normal(n)
    out *= peak / np.max(np.abs(out))
    return Waveform(out, sample_rate)


def synthetic_corpus(n: int, seed: int = 0, duration: float = 2.0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Waveform]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [synthetic_utterance(int(s), duration, sample_rate) for s in seeds]
