"""Objective quality and intelligibility measures: SDR, LLR and ESTOI."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from .signal_core import Waveform, sdr

__all__ = [
    "LpcModel", "lpc", "levinson_durbin", "llr", "estoi", "third_octave_bands",
    "MetricReport", "evaluate", "sdr", "InsufficientSpeechError", "CSV_FIELDS",
]


class InsufficientSpeechError(ValueError):
    pass


# ---------------------------------------------------------------------------
# LPC / LLR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LpcModel:
    order: int
    coefficients: np.ndarray  # [1, a1, ..., ap]
    autocorr: np.ndarray  # r[0..p]
    reflection: np.ndarray
    error: float  # final prediction-error power
    valid: bool = True  # False for zero-energy frames

    @property
    def prediction_gain_db(self) -> float:
        return 10.0 * math.log10(self.autocorr[0] / self.error)


def levinson_durbin(r: np.ndarray, order: int):
    """Solve the normal equations for a Toeplitz autocorrelation sequence.

    Returns ``(a, k, err)`` with ``a[0] = 1`` and reflection coefficients ``k``.
    """
    a = np.zeros(order + 1)
    a[0] = 1.0
    k = np.zeros(order)
    err = float(r[0])
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1 : 0 : -1])
        ki = -acc / err
        k[i - 1] = ki
        a[1 : i + 1] = a[1 : i + 1] + ki * np.concatenate([a[i - 1 : 0 : -1], [1.0]])
        err *= 1.0 - ki * ki
        if err <= 0:
            # perfectly predictable frame; further coefficients add nothing
            err = np.finfo(float).tiny
            break
    return a, k, err


def _autocorr(frame: np.ndarray, order: int) -> np.ndarray:
    n = frame.shape[0]
    return np.array([np.dot(frame[: n - lag], frame[lag:]) for lag in range(order + 1)])


def lpc(frame, order: int = 16, window: bool = True) -> LpcModel:
    """Autocorrelation-method LPC of one frame (Hann-weighted unless ``window=False``)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[0] <= order:
        raise ValueError(f"frame of {frame.shape[0]} samples too short for order {order}")
    if window:
        frame = frame * np.hanning(frame.shape[0])
    r = _autocorr(frame, order)
    if r[0] <= 0.0:
        return LpcModel(order, np.r_[1.0, np.zeros(order)], r, np.zeros(order), 0.0, False)
    a, k, err = levinson_durbin(r, order)
    return LpcModel(order, a, r, k, err, True)


def _frames(x: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    if x.shape[0] < frame_len:
        x = np.pad(x, (0, frame_len - x.shape[0]))
    n = (x.shape[0] - frame_len) // shift + 1
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::shift][:n]


def llr(clean: Waveform, degraded: Waveform, order: int | None = None,
        keep_fraction: float = 0.95) -> float:
    """Mean over the best ``keep_fraction`` of frames of the clamped LPC log-likelihood ratio."""
    if len(clean) != len(degraded):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    fs = clean.sample_rate
    order = order or max(1, round(fs / 1000))
    frame_len = round(0.032 * fs)
    shift = round(0.008 * fs)
    win = np.hanning(frame_len)
    values = []
    for fc, fd in zip(_frames(clean.samples, frame_len, shift),
                      _frames(degraded.samples, frame_len, shift)):
        mc = lpc(fc * win, order, window=False)
        md = lpc(fd * win, order, window=False)
        if not (mc.valid and md.valid):
            continue
        R = _toeplitz(mc.autocorr)
        num = md.coefficients @ R @ md.coefficients
        den = mc.coefficients @ R @ mc.coefficients
        if den <= 0:
            continue
        values.append(min(max(math.log(num / den), 0.0), 2.0))
    if not values:
        raise InsufficientSpeechError("every frame has zero energy")
    values = np.sort(values)
    keep = max(1, int(round(keep_fraction * values.size)))
    return float(values[:keep].mean())


def _toeplitz(r: np.ndarray) -> np.ndarray:
    idx = np.abs(np.arange(r.size)[:, None] - np.arange(r.size)[None, :])
    return r[idx]


# ---------------------------------------------------------------------------
# ESTOI
# ---------------------------------------------------------------------------

ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30  # frames, 384 ms
ESTOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_bands(fs: int = ESTOI_FS, nfft: int = ESTOI_NFFT,
                       n_bands: int = ESTOI_BANDS, min_freq: float = ESTOI_MIN_FREQ):
    """Band-to-bin grouping matrix (n_bands, nfft/2+1) and the band centre frequencies."""
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    centres = min_freq * 2.0 ** (k / 3.0)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo_i = int(np.argmin(np.abs(freqs - lo[b])))
        hi_i = int(np.argmin(np.abs(freqs - hi[b])))
        obm[b, lo_i:hi_i] = 1.0
    return obm, centres


_OBM, _ = third_octave_bands()


def _analysis_window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float,
                          frame_len: int, hop: int):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame, then re-synthesise."""
    w = _analysis_window(frame_len)
    starts = np.arange(0, x.size - frame_len + 1, hop)
    xf = np.stack([w * x[s : s + frame_len] for s in starts])
    yf = np.stack([w * y[s : s + frame_len] for s in starts])
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    out_len = (n - 1) * hop + frame_len if n else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop : i * hop + frame_len] += xf[i]
        ys[i * hop : i * hop + frame_len] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    w = _analysis_window(ESTOI_FRAME)
    hop = ESTOI_FRAME // 2
    starts = np.arange(0, x.size - ESTOI_FRAME, hop)
    frames = np.stack([w * x[s : s + ESTOI_FRAME] for s in starts]) if starts.size else \
        np.zeros((0, ESTOI_FRAME))
    spec = np.fft.rfft(frames, n=ESTOI_NFFT, axis=1)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _row_col_normalize(seg: np.ndarray) -> np.ndarray:
    seg = seg - seg.mean(axis=-1, keepdims=True)
    seg = seg / (np.linalg.norm(seg, axis=-1, keepdims=True) + _EPS)
    seg = seg - seg.mean(axis=-2, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=-2, keepdims=True) + _EPS)


def estoi(clean: Waveform, degraded: Waveform) -> float:
    """Extended short-time objective intelligibility of ``degraded`` against ``clean``."""
    if len(clean) != len(degraded):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    x, y = clean.samples, degraded.samples
    fs = clean.sample_rate
    if fs != ESTOI_FS:
        g = math.gcd(ESTOI_FS, fs)
        x = resample_poly(x, ESTOI_FS // g, fs // g)
        y = resample_poly(y, ESTOI_FS // g, fs // g)
    if x.size < ESTOI_FRAME:
        raise InsufficientSpeechError("signal shorter than one analysis frame")
    x, y = _remove_silent_frames(x, y, ESTOI_DYN_RANGE, ESTOI_FRAME, ESTOI_FRAME // 2)
    X, Y = _band_envelopes(x), _band_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < ESTOI_SEGMENT:
        raise InsufficientSpeechError(
            f"only {n_frames} active frames; need {ESTOI_SEGMENT} (384 ms)"
        )
    idx = np.arange(ESTOI_SEGMENT)[None, :] + np.arange(n_frames - ESTOI_SEGMENT + 1)[:, None]
    xs = _row_col_normalize(X[:, idx].transpose(1, 0, 2))  # (segments, bands, N)
    ys = _row_col_normalize(Y[:, idx].transpose(1, 0, 2))
    return float(np.sum(xs * ys) / (ESTOI_SEGMENT * xs.shape[0]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CSV_FIELDS = ("utterance_id", "method", "clip_sdr_db", "noise_sigma2", "sdr_db", "llr", "estoi")


@dataclass
class MetricReport:
    sdr_db: float = math.nan
    llr: float = math.nan
    estoi: float = math.nan
    failures: dict = field(default_factory=dict)  # metric name -> error message

    def csv_row(self, utterance_id: str, method: str, clip_sdr_db: float,
                noise_sigma2: float = 0.0) -> dict:
        return {
            "utterance_id": utterance_id,
            "method": method,
            "clip_sdr_db": clip_sdr_db,
            "noise_sigma2": noise_sigma2,
            "sdr_db": self.sdr_db,
            "llr": self.llr,
            "estoi": self.estoi,
        }


def evaluate(clean: Waveform, processed: Waveform) -> MetricReport:
    """All three measures; a failing measure is recorded as NaN with its error."""
    report = MetricReport()
    for name, fn in (("sdr_db", sdr), ("llr", llr), ("estoi", estoi)):
        try:
            setattr(report, name, float(fn(clean, processed)))
        except ValueError as exc:
            report.failures[name] = str(exc)
    return report
