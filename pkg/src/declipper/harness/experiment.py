"""Declipper runs, evaluation tables, the noise sweep and spectrogram export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..metrics import CSV_FIELDS, evaluate
from ..nn.checkpoint import load_model, save_model
from ..nn.training import TrainConfig, enhance, train
from ..nn.unet import UNet, UNetConfig
from ..signal_core import (
    StftConfig,
    Waveform,
    add_gaussian_noise,
    extract_images,
    log_magnitude,
    reconstruct,
    stft,
    write_pgm,
)
from ..sparse import SparseSolverConfig, declip_signal
from ..wavio import UnsupportedWavError, quantized, read_wav, write_wav
from .dataset import DataError, DatasetManifest, clip_to_target

log = logging.getLogger(__name__)

METHODS = ("passthrough", "iht", "consistent_iht", "unet")
DEFAULT_NOISE_GRID = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1)
SWEEP_SDR = 3.5
# metric -> True when larger is better
METRICS = {"sdr_db": True, "llr": False, "estoi": True}


class PartialFailure(RuntimeError):
    """Some files failed; the partial results are attached."""

    def __init__(self, msg, rows=None, tables=None):
        super().__init__(msg)
        self.rows, self.tables = rows, tables


@dataclass
class RunLog:
    method: str
    outputs: dict = field(default_factory=dict)  # clipped_path -> output path
    failures: dict = field(default_factory=dict)  # clipped_path -> error message

    @property
    def ok(self) -> bool:
        return not self.failures


def declip_waveform(y: Waveform, theta: float, method: str, model: UNet | None = None,
                    solver: SparseSolverConfig = SparseSolverConfig()) -> Waveform:
    """Apply one declipping method to a clipped waveform."""
    if method == "passthrough":
        return y
    if method in ("iht", "consistent_iht"):
        return declip_signal(y, theta, cfg=solver, variant=method)
    if method == "unet":
        if model is None:
            raise ValueError("the unet method needs a trained model")
        size = model.config.image_size
        S = stft(y, StftConfig.for_image_size(size))
        images = extract_images(S, normalize=True, segment_len=size)
        return reconstruct(enhance(model, images), S)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _load_for(method: str, checkpoint) -> UNet | None:
    if method != "unet":
        return None
    if checkpoint is None or not Path(checkpoint).exists():
        raise DataError(f"unet method needs an existing checkpoint, got {checkpoint}")
    return load_model(checkpoint)


def run_declip(manifest: DatasetManifest, method: str, out_dir, split: str = "test",
               checkpoint=None, solver: SparseSolverConfig = SparseSolverConfig()) -> RunLog:
    """Declip every clipped file of ``split`` into ``out_dir/<method>/``.

    Output files mirror the manifest's relative clipped paths. Failures are
    logged per file and the run carries on.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    model = _load_for(method, checkpoint)
    root = Path(out_dir) / method
    run = RunLog(method)
    for e in manifest.split(split):
        dest = root / e.clipped_path
        try:
            y = read_wav(manifest.path(e.clipped_path))
            out = declip_waveform(y, e.theta, method, model, solver)
            dest.parent.mkdir(parents=True, exist_ok=True)
            write_wav(dest, out)
            run.outputs[e.clipped_path] = str(dest)
        except (OSError, ValueError, UnsupportedWavError) as exc:
            log.error("%s failed on %s: %s", method, e.clipped_path, exc)
            run.failures[e.clipped_path] = str(exc)
    return run


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.4f}"


@dataclass
class ResultsTable:
    """Per-method rows and per-condition columns of mean metric values, plus an average."""

    metric: str
    columns: tuple  # condition values (clip SDR or noise variance)
    cells: dict  # method -> list of per-column means, then the overall average
    counts: dict  # method -> list of per-column utterance counts
    column_label: str = "clip_sdr_db"

    @classmethod
    def from_rows(cls, rows: list[dict], metric: str, columns, column_key: str = "clip_sdr_db"):
        columns = tuple(float(c) for c in columns)
        methods = list(dict.fromkeys(r["method"] for r in rows))
        cells, counts = {}, {}
        for m in methods:
            means, ns = [], []
            for c in columns:
                vals = [float(r[metric]) for r in rows
                        if r["method"] == m and float(r[column_key]) == c]
                vals = [v for v in vals if not math.isnan(v)]
                ns.append(len(vals))
                means.append(float(np.mean(vals)) if vals else math.nan)
            present = [v for v in means if not math.isnan(v)]
            means.append(float(np.mean(present)) if present else math.nan)
            cells[m], counts[m] = means, ns
        return cls(metric, columns, cells, counts, column_key)

    def header(self) -> list[str]:
        return ["method"] + [f"{c:g}" for c in self.columns] + ["avg"]

    def formatted_rows(self) -> list[list[str]]:
        return [[m] + [_fmt(v) for v in vals] for m, vals in self.cells.items()]

    def best(self) -> list[str | None]:
        """Best method per column (including the average), by the metric's direction."""
        higher = METRICS.get(self.metric, True)
        out = []
        for j in range(len(self.columns) + 1):
            col = {m: v[j] for m, v in self.cells.items() if not math.isnan(v[j])}
            if not col:
                out.append(None)
                continue
            out.append((max if higher else min)(col, key=col.get))
        return out

    def to_text(self) -> str:
        """Aligned table; ``*`` marks the best value of each column."""
        best = self.best()
        rows = []
        for m, cells in zip(self.cells, self.formatted_rows()):
            rows.append([cells[0]] + [v + ("*" if best[j] == m else " ")
                                      for j, v in enumerate(cells[1:])])
        head = self.header()
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = [f"# {self.metric} by {self.column_label}"]
        for r in [head] + rows:
            lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w)
                                   for i, (v, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.header())
            w.writerows(self.formatted_rows())
        (out_dir / f"{stem}.txt").write_text(self.to_text())


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(CSV_FIELDS))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def evaluate_run(manifest: DatasetManifest, processed_dir, methods, out_dir=None,
                 split: str = "test") -> tuple[list[dict], dict]:
    """Score processed files against clean references.

    ``processed_dir/<method>/`` must mirror the clipped paths; passthrough
    reads the clipped inputs directly. Returns per-utterance CSV rows and one
    ResultsTable per metric; with ``out_dir`` both are written to disk.
    """
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split} entries")
    rows, missing = [], []
    clean_cache = {}
    for method in methods:
        for e in entries:
            if e.clean_path not in clean_cache:
                clean_cache[e.clean_path] = read_wav(manifest.path(e.clean_path))
            src = (manifest.path(e.clipped_path) if method == "passthrough"
                   else Path(processed_dir) / method / e.clipped_path)
            try:
                processed = read_wav(src)
            except (OSError, UnsupportedWavError) as exc:
                missing.append(f"{method}:{e.clipped_path}: {exc}")
                continue
            rep = evaluate(clean_cache[e.clean_path], processed)
            for name, msg in rep.failures.items():
                log.warning("%s on %s (%s): %s", name, e.utterance_id, method, msg)
            rows.append(rep.csv_row(e.utterance_id, method, e.clip_sdr_db))
    for m in missing:
        log.error("missing output %s", m)
    grid = sorted({e.clip_sdr_db for e in entries})
    tables = {m: ResultsTable.from_rows(rows, m, grid) for m in METRICS}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows(out_dir / "results.csv", rows)
        for name, table in tables.items():
            table.write(out_dir, f"table_{name}")
    if missing:
        raise PartialFailure(f"{len(missing)} processed files missing", rows, tables)
    return rows, tables


def noise_sweep(manifest: DatasetManifest, methods, sigma2_list=DEFAULT_NOISE_GRID,
                out_dir=None, split: str = "test", checkpoint=None,
                solver: SparseSolverConfig = SparseSolverConfig(),
                target_sdr: float = SWEEP_SDR, seed: int = 0) -> tuple[list[dict], dict]:
    """Add Gaussian noise, clip at ``target_sdr`` and score each method against the clean signal.

    The clipping and WAV round trip are the ones used by dataset preparation
    and ``run_declip``, so the noiseless column reproduces the plain table.
    """
    if not sigma2_list:
        raise ValueError("noise grid must be non-empty")
    models = {m: _load_for(m, checkpoint) for m in methods}
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for u, (uid, clean_rel) in enumerate(manifest.utterances(split)):
        clean = read_wav(manifest.path(clean_rel))
        for j, s2 in enumerate(sigma2_list):
            noisy = add_gaussian_noise(clean, float(s2), seed=seed + 1000 * u + j)
            y, theta, _ = clip_to_target(noisy, target_sdr)
            y = quantized(y)
            for method in methods:
                out = quantized(declip_waveform(y, theta, method, models[method], solver))
                if out_dir is not None:
                    dest = out_dir / method / f"{uid}_s2_{s2:g}.wav"
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    write_wav(dest, out)
                rep = evaluate(clean, out)
                rows.append(rep.csv_row(uid, method, target_sdr, float(s2)))
    tables = {m: ResultsTable.from_rows(rows, m, sigma2_list, column_key="noise_sigma2")
              for m in METRICS}
    if out_dir is not None:
        write_rows(out_dir / "noise_sweep.csv", rows)
        for name, table in tables.items():
            table.write(out_dir, f"noise_{name}")
    return rows, tables


# ---------------------------------------------------------------------------
# spectrogram export and training
# ---------------------------------------------------------------------------

def export_spectrogram(wav_path, out_path, fmt: str = "pgm",
                       cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Write the log-magnitude spectrogram of a WAV file; returns the (frames, bins) matrix.

    PGM rows are frequency bins with the highest bin at the top, columns are
    frames; CSV rows are frames and columns are bins, raw log-magnitudes.
    """
    try:
        x = read_wav(wav_path)
    except UnsupportedWavError as exc:
        raise DataError(f"cannot read {wav_path}: {exc}") from exc
    logmag = log_magnitude(stft(x, cfg))
    if fmt == "pgm":
        hz = x.sample_rate / cfg.fft_size
        write_pgm(out_path, logmag.T[::-1],
                  comment=f"rows: frequency bins, top = {x.sample_rate / 2:g} Hz, "
                          f"{hz:g} Hz per row; columns: frames, "
                          f"{cfg.frame_shift / x.sample_rate * 1000:g} ms per column")
    elif fmt == "csv":
        np.savetxt(out_path, logmag, delimiter=",", fmt="%.17g",
                   header="rows: frames, columns: frequency bins 0..fft_size/2")
    else:
        raise ValueError(f"unknown format {fmt!r}; expected pgm or csv")
    return logmag


def training_pairs(manifest: DatasetManifest, image_size: int, split: str = "train"):
    """(normalized clipped, raw clean) spectrum image pairs for every entry of ``split``."""
    cfg = StftConfig.for_image_size(image_size)
    pairs, clean_images = [], {}
    for e in manifest.split(split):
        if e.clean_path not in clean_images:
            clean = read_wav(manifest.path(e.clean_path))
            clean_images[e.clean_path] = extract_images(stft(clean, cfg), segment_len=image_size)
        clipped = read_wav(manifest.path(e.clipped_path))
        inputs = extract_images(stft(clipped, cfg), normalize=True, segment_len=image_size)
        pairs.extend(zip(inputs, clean_images[e.clean_path]))
    return pairs


def train_command(manifest: DatasetManifest, unet_cfg: UNetConfig, train_cfg: TrainConfig,
                  out_dir, model_seed: int = 0) -> tuple[UNet, list[float]]:
    """Train one model on the pooled training split; writes ``model.ckpt`` and ``loss.csv``."""
    pairs = training_pairs(manifest, unet_cfg.image_size)
    if not pairs:
        raise DataError("manifest has an empty train split")
    model = UNet(unet_cfg, seed=model_seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    losses = train(model, pairs, train_cfg)
    save_model(model, out_dir / "model.ckpt")
    with open(out_dir / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(v)])
    log.info("trained on %d image pairs, loss %.4g -> %.4g", len(pairs), losses[0], losses[-1])
    return model, losses
