"""SDR-targeted clipped datasets on disk, described by a JSON manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..signal_core import UnattainableTargetError, Waveform, clip, sdr, solve_threshold_for_sdr
from ..wavio import UnsupportedWavError, quantized, read_wav, write_wav
from .synth import synthetic_corpus

log = logging.getLogger(__name__)

TRAIN_GRID = (1.0, 2.0, 5.0, 10.0, 15.0, 20.0)
TEST_GRID = (0.5, 1.5, 3.5, 7.5, 12.5, 17.5)
SPLIT_FRACTIONS = (0.75, 0.10)  # train, dev; test takes the rest
SDR_TOL = 0.05
PCM_STEP = 1.0 / 32768


class DataError(RuntimeError):
    """Unreadable corpus, missing files or an unusable manifest."""


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker: str | None
    split: str
    clean_path: str  # relative to the manifest directory
    clipped_path: str
    clip_sdr_db: float  # target
    theta: float
    realized_sdr_db: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    corpus: dict
    seed: int
    train_grid: tuple = TRAIN_GRID
    test_grid: tuple = TEST_GRID
    root: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def utterances(self, split: str | None = None) -> list[tuple[str, str]]:
        """Distinct ``(utterance_id, clean_path)`` pairs in manifest order."""
        seen = {}
        for e in self.entries:
            if split is None or e.split == split:
                seen.setdefault(e.utterance_id, e.clean_path)
        return list(seen.items())

    def path(self, relative: str) -> Path:
        return self.root / relative

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "corpus": self.corpus,
            "train_grid": list(self.train_grid),
            "test_grid": list(self.test_grid),
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in raw["entries"]]
            return cls(entries, raw["corpus"], int(raw["seed"]), tuple(raw["train_grid"]),
                       tuple(raw["test_grid"]), root=path.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


def clip_to_target(x: Waveform, target_sdr: float, tol: float = SDR_TOL):
    """Clip ``x`` to ``target_sdr`` with a threshold on the 16-bit PCM grid.

    Snapping keeps the clipped plateau exactly representable in a WAV file;
    the neighbouring grid points are tried when snapping moves the SDR out
    of tolerance. Returns ``(clipped, theta, realized_sdr)``.
    """
    theta = solve_threshold_for_sdr(x, target_sdr, tol=tol / 2)
    base = round(theta / PCM_STEP)
    best = None
    for k in (base, base - 1, base + 1):
        if k < 1:
            continue
        th = k * PCM_STEP
        y = clip(x, th)
        err = abs(sdr(x, y) - target_sdr)
        if best is None or err < best[0]:
            best = (err, y, th)
    err, y, th = best
    if err > tol:
        raise UnattainableTargetError(
            f"SDR {target_sdr} dB misses by {err:.3f} dB on the PCM grid")
    return y, th, sdr(x, y)


def assign_splits(ids: list[str], speakers: list[str | None], seed: int) -> dict[str, str]:
    """75/10/15 split over speakers when every utterance has one, otherwise over utterances."""
    rng = np.random.default_rng(seed)
    by_speaker = all(s is not None for s in speakers) and len(set(speakers)) >= 3
    units = sorted(set(speakers)) if by_speaker else list(ids)
    order = [units[i] for i in rng.permutation(len(units))]
    n = len(units)
    n_train = round(SPLIT_FRACTIONS[0] * n)
    n_dev = min(round(SPLIT_FRACTIONS[1] * n), n - n_train)
    unit_split = {}
    for i, u in enumerate(order):
        unit_split[u] = "train" if i < n_train else "dev" if i < n_train + n_dev else "test"
    return {uid: unit_split[spk if by_speaker else uid] for uid, spk in zip(ids, speakers)}


def _load_corpus(corpus_dir: Path):
    files = sorted(corpus_dir.rglob("*.wav"))
    if not files:
        raise DataError(f"no WAV files under {corpus_dir}")
    out = []
    for f in files:
        rel = f.relative_to(corpus_dir)
        try:
            x = read_wav(f)
        except (OSError, UnsupportedWavError) as exc:
            raise DataError(f"cannot read {f}: {exc}") from exc
        speaker = rel.parts[0] if len(rel.parts) > 1 else None
        out.append(("-".join(rel.with_suffix("").parts), speaker, x))
    return out


def _sdr_tag(value: float) -> str:
    return f"{value:g}".replace(".", "p").replace("-", "m")


def prepare_dataset(out_dir, corpus_dir=None, synthetic: int | None = None,
                    train_grid=TRAIN_GRID, test_grid=TEST_GRID, seed: int = 0,
                    duration: float = 2.0) -> DatasetManifest:
    """Write clean and clipped WAVs plus ``manifest.json`` under ``out_dir``.

    Train and dev utterances are clipped at every ``train_grid`` SDR, test
    utterances at every ``test_grid`` SDR. Clean signals are quantized to
    16 bits first, so every SDR is measured on exactly what is on disk.
    """
    if (corpus_dir is None) == (synthetic is None):
        raise ValueError("give exactly one of corpus_dir and synthetic")
    if not train_grid or not test_grid:
        raise ValueError("SDR grids must be non-empty")
    out_dir = Path(out_dir)
    if synthetic is not None:
        if synthetic < 1:
            raise ValueError("synthetic corpus size must be positive")
        items = [(f"syn{i:03d}", None, x)
                 for i, x in enumerate(synthetic_corpus(synthetic, seed, duration))]
        corpus = {"source": "synthetic", "n_utterances": synthetic, "duration": duration}
    else:
        items = _load_corpus(Path(corpus_dir))
        corpus = {"source": str(corpus_dir), "n_utterances": len(items)}
    corpus["sample_rate"] = items[0][2].sample_rate

    splits = assign_splits([i[0] for i in items], [i[1] for i in items], seed)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "clipped").mkdir(parents=True, exist_ok=True)
    entries = []
    for uid, speaker, x in items:
        xq = quantized(x)
        clean_rel = f"clean/{uid}.wav"
        write_wav(out_dir / clean_rel, xq)
        split = splits[uid]
        for target in (test_grid if split == "test" else train_grid):
            try:
                y, theta, realized = clip_to_target(xq, float(target))
            except (UnattainableTargetError, ValueError) as exc:
                log.warning("skipping %s at %s dB: %s", uid, target, exc)
                continue
            clipped_rel = f"clipped/{uid}_sdr{_sdr_tag(target)}.wav"
            write_wav(out_dir / clipped_rel, y)
            entries.append(ManifestEntry(uid, speaker, split, clean_rel, clipped_rel,
                                         float(target), theta, realized))
    manifest = DatasetManifest(entries, corpus, seed, tuple(train_grid), tuple(test_grid),
                               root=out_dir)
    manifest.save(out_dir / "manifest.json")
    log.info("prepared %d entries from %d utterances in %s", len(entries), len(items), out_dir)
    return manifest
