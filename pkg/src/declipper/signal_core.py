"""Time-domain signal handling and spectrum images.

Covers hard clipping, SDR, SDR-targeted threshold search, noise injection,
the STFT/ISTFT pair used throughout the package, and the conversion of a
complex spectrogram into fixed-size log-magnitude images (and back).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-8
DEFAULT_SAMPLE_RATE = 16000


class UnattainableTargetError(ValueError):
    """Raised when no clipping threshold can reach the requested SDR."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected a mono 1-D signal, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


def _require_nonempty(x: Waveform):
    if len(x) == 0:
        raise ValueError("waveform is empty")


# ---------------------------------------------------------------------------
# clipping, SDR, noise
# ---------------------------------------------------------------------------

def _as_samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def clip(x: Waveform | np.ndarray, theta: float):
    """Hard-clip ``x`` symmetrically at ``theta``; arrays in, arrays out."""
    if not (theta > 0 and math.isfinite(theta)):
        raise ValueError(f"theta must be a positive finite number, got {theta}")
    out = np.clip(_as_samples(x), -theta, theta)
    return x.with_samples(out) if isinstance(x, Waveform) else out


def sdr(x: Waveform | np.ndarray, y: Waveform | np.ndarray) -> float:
    """Signal-to-distortion ratio of ``y`` against the reference ``x`` in dB.

    Returns ``math.inf`` when ``y`` reproduces ``x`` exactly.
    """
    xs, ys = _as_samples(x), _as_samples(y)
    if xs.shape != ys.shape:
        raise ValueError(f"length mismatch: {xs.shape} vs {ys.shape}")
    ref = float(np.dot(xs, xs))
    if ref == 0.0:
        raise ValueError("reference signal has zero energy")
    diff = xs - ys
    err = float(np.dot(diff, diff))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(ref / err)


def solve_threshold_for_sdr(
    x: Waveform | np.ndarray, target_sdr: float, tol: float = 0.05, max_iter: int = 60
) -> float:
    """Bisection on theta so that ``sdr(x, clip(x, theta))`` hits ``target_sdr``.

    SDR grows monotonically with theta, from 0 dB as theta -> 0 to +inf at
    theta = max|x|, so any finite positive target is reachable for a signal
    with at least two distinct magnitudes.
    """
    if not math.isfinite(target_sdr):
        raise ValueError("target_sdr must be finite")
    _require_nonempty(x)
    mags = np.abs(_as_samples(x))
    peak = float(mags.max())
    if peak == 0.0 or np.unique(mags).size < 2:
        raise UnattainableTargetError("signal needs at least two distinct magnitudes")
    if target_sdr <= 0.0:
        raise UnattainableTargetError(
            f"target {target_sdr} dB is at or below the 0 dB limit reached as theta -> 0"
        )
    energy = float(np.dot(mags, mags))
    sorted_mags = np.sort(mags)
    # suffix sums let each SDR evaluation cost one searchsorted
    suffix_sq = np.concatenate([np.cumsum((sorted_mags**2)[::-1])[::-1], [0.0]])
    suffix_lin = np.concatenate([np.cumsum(sorted_mags[::-1])[::-1], [0.0]])
    n = sorted_mags.size

    def sdr_at(theta: float) -> float:
        i = int(np.searchsorted(sorted_mags, theta, side="right"))
        count = n - i
        err = suffix_sq[i] - 2.0 * theta * suffix_lin[i] + count * theta * theta
        if err <= 0.0:
            return math.inf
        return 10.0 * math.log10(energy / err)

    lo, hi = 0.0, peak
    theta = 0.5 * peak
    for _ in range(max_iter):
        theta = 0.5 * (lo + hi)
        value = sdr_at(theta)
        if abs(value - target_sdr) <= tol:
            break
        if value < target_sdr:
            lo = theta
        else:
            hi = theta
    realized = sdr(x, clip(x, theta))
    if abs(realized - target_sdr) > tol:
        raise UnattainableTargetError(
            f"bisection did not reach {target_sdr} dB (got {realized:.4f} dB)"
        )
    return theta


def add_gaussian_noise(x: Waveform, sigma2: float, seed: int) -> Waveform:
    if sigma2 < 0:
        raise ValueError(f"noise variance must be non-negative, got {sigma2}")
    if sigma2 == 0:
        return x
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(sigma2), size=len(x))
    return x.with_samples(x.samples + noise)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    frame_shift: int = 128
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.frame_shift <= self.frame_len <= self.fft_size):
            raise ValueError(
                "need 0 < frame_shift <= frame_len <= fft_size, got "
                f"{self.frame_shift}, {self.frame_len}, {self.fft_size}"
            )
        if self.fft_size % 2:
            raise ValueError("fft_size must be even")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def for_image_size(cls, image_size: int) -> "StftConfig":
        """Config whose spectra have ``image_size`` bins once the top bin is dropped.

        ``image_size=256`` gives the 512/128/512 setup (32 ms / 8 ms at 16 kHz).
        """
        n = 2 * image_size
        return cls(frame_len=n, frame_shift=n // 4, fft_size=n)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        return _WINDOWS[self.window](self.frame_len)


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {
    "hann": _periodic_hann,
    "rect": lambda n: np.ones(n),
}


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray  # (T, F) complex
    config: StftConfig
    original_length: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_bins:
            raise ValueError(
                f"frames must be (T, {self.config.n_bins}), got {self.frames.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(frames, self.config, self.original_length, self.sample_rate)


def _frame_grid(n_samples: int, cfg: StftConfig) -> tuple[int, int]:
    """Front padding and frame count so every sample sees full overlap."""
    pad = cfg.frame_len - cfg.frame_shift
    n_frames = (max(n_samples, 1) - 1 + pad) // cfg.frame_shift + 1
    return pad, n_frames


def stft(x: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    _require_nonempty(x)
    pad, n_frames = _frame_grid(len(x), cfg)
    total = (n_frames - 1) * cfg.frame_shift + cfg.frame_len
    buf = np.zeros(total)
    buf[pad : pad + len(x)] = x.samples
    frames = np.lib.stride_tricks.sliding_window_view(buf, cfg.frame_len)[:: cfg.frame_shift]
    frames = frames[:n_frames] * cfg.analysis_window()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(spec, cfg, len(x), x.sample_rate)


def istft(S: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add with window-square normalisation."""
    cfg = S.config
    pad, n_frames = _frame_grid(S.original_length, cfg)
    if S.n_frames != n_frames:
        raise ValueError(
            f"spectrogram has {S.n_frames} frames, expected {n_frames} "
            f"for {S.original_length} samples"
        )
    win = cfg.analysis_window()
    frames = np.fft.irfft(S.frames, n=cfg.fft_size, axis=1)[:, : cfg.frame_len] * win
    total = (n_frames - 1) * cfg.frame_shift + cfg.frame_len
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for t in range(n_frames):
        start = t * cfg.frame_shift
        out[start : start + cfg.frame_len] += frames[t]
        norm[start : start + cfg.frame_len] += wsq
    out = out[pad : pad + S.original_length]
    norm = norm[pad : pad + S.original_length]
    if np.any(norm <= 1e-12):
        raise ValueError("window overlap leaves samples with zero normalisation")
    return Waveform(out / norm, S.sample_rate)


def log_magnitude(S: ComplexSpectrogram) -> np.ndarray:
    """``log(max(|S|, LOG_FLOOR))`` over all bins, shape (T, F)."""
    return np.log(np.maximum(np.abs(S.frames), LOG_FLOOR))


# ---------------------------------------------------------------------------
# spectrum images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogMagImage:
    pixels: np.ndarray  # (frames, bins), time on rows
    norm_mean: float = 0.0
    norm_std: float = 1.0
    segment_index: int = 0
    valid_frames: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("image pixels must be 2-D")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite pixels")
        if not 1 <= self.valid_frames <= self.pixels.shape[0]:
            raise ValueError(f"valid_frames={self.valid_frames} out of range")
        if self.norm_std <= 0:
            raise ValueError("norm_std must be positive")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.pixels.shape, dtype=bool)
        mask[: self.valid_frames] = True
        return mask


def extract_images(
    S: ComplexSpectrogram, normalize: bool = False, segment_len: int | None = None
) -> list[LogMagImage]:
    """Cut the log-magnitude spectrogram into square images.

    The highest bin is dropped so the width is ``fft_size / 2``; frames are
    split into consecutive non-overlapping segments of the same length (256
    for the default config) and the tail is padded with the log floor.
    With ``normalize`` the whole utterance is shifted and scaled by one mean
    and standard deviation computed over every valid time-frequency unit.
    """
    if S.n_frames < 1:
        raise ValueError("spectrogram has no frames")
    logmag = log_magnitude(S)[:, :-1]
    width = logmag.shape[1]
    seg = width if segment_len is None else int(segment_len)
    mean, std = 0.0, 1.0
    pad_value = math.log(LOG_FLOOR)
    if normalize:
        mean = float(logmag.mean())
        std = float(logmag.std())
        if std <= 0:
            std = 1.0
        logmag = (logmag - mean) / std
        pad_value = (pad_value - mean) / std
    images = []
    for idx, start in enumerate(range(0, logmag.shape[0], seg)):
        block = logmag[start : start + seg]
        valid = block.shape[0]
        if valid < seg:
            block = np.vstack([block, np.full((seg - valid, width), pad_value)])
        images.append(LogMagImage(block.copy(), mean, std, idx, valid))
    return images


def reconstruct(enhanced: list[LogMagImage], clipped_S: ComplexSpectrogram) -> Waveform:
    """Enhanced log-magnitudes plus the clipped phase, back to a waveform.

    The dropped top bin takes the clipped spectrogram's magnitude there.
    """
    n_valid = sum(img.valid_frames for img in enhanced)
    if n_valid != clipped_S.n_frames:
        raise ValueError(
            f"images cover {n_valid} frames, spectrogram has {clipped_S.n_frames}"
        )
    logmag = np.vstack(
        [img.pixels[: img.valid_frames] for img in sorted(enhanced, key=lambda im: im.segment_index)]
    )
    mag = np.empty(clipped_S.frames.shape)
    mag[:, :-1] = np.exp(logmag)
    mag[:, -1] = np.abs(clipped_S.frames[:, -1])
    phase = np.angle(clipped_S.frames)
    return istft(clipped_S.with_frames(mag * np.exp(1j * phase)))


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------

def write_pgm(path, matrix: np.ndarray, comment: str | None = None) -> None:
    """8-bit binary PGM, min-max scaled. Row 0 of ``matrix`` is the top row."""
    matrix = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(matrix.min()), float(matrix.max())
    scaled = np.zeros_like(matrix) if hi == lo else (matrix - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    header = "P5\n"
    if comment:
        header += "".join(f"# {line}\n" for line in comment.splitlines())
    header += f"{data.shape[1]} {data.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM file")
    width, height = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8).reshape(height, width)


def save_image_raw(path, image: LogMagImage) -> None:
    """Flat little-endian float64 pixels plus a ``.json`` sidecar."""
    path = Path(path)
    path.write_bytes(image.pixels.astype("<f8").tobytes())
    meta = {
        "rows": image.pixels.shape[0],
        "cols": image.pixels.shape[1],
        "dtype": "float64-le",
        "norm_mean": image.norm_mean,
        "norm_std": image.norm_std,
        "segment_index": image.segment_index,
        "valid_frames": image.valid_frames,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_image_raw(path) -> LogMagImage:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    pixels = np.frombuffer(path.read_bytes(), dtype="<f8")
    if pixels.size != meta["rows"] * meta["cols"]:
        raise ValueError("raw image size does not match its sidecar")
    return LogMagImage(
        pixels.reshape(meta["rows"], meta["cols"]).astype(np.float64),
        meta["norm_mean"],
        meta["norm_std"],
        meta["segment_index"],
        meta["valid_frames"],
    )
