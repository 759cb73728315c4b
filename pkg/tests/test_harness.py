import csv
import json
import math

import numpy as np
import pytest

from declipper import cli
from declipper.harness.dataset import (
    PCM_STEP,
    TEST_GRID,
    DataError,
    DatasetManifest,
    assign_splits,
    clip_to_target,
    prepare_dataset,
)
from declipper.harness.experiment import (
    METRICS,
    ResultsTable,
    declip_waveform,
    evaluate_run,
    export_spectrogram,
    noise_sweep,
    run_declip,
    train_command,
)
from declipper.nn.training import TrainConfig
from declipper.nn.unet import UNetConfig
from declipper.signal_core import StftConfig, Waveform, log_magnitude, read_pgm, sdr, stft
from declipper.sparse import build_clip_mask
from declipper.wavio import read_wav, write_wav


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return prepare_dataset(root, synthetic=10, duration=0.8, seed=3)


class TestPrepare:
    def test_counts_and_files(self, dataset):
        assert len(dataset.entries) == 60
        assert len(list((dataset.root / "clipped").glob("*.wav"))) == 60
        assert (dataset.root / "manifest.json").exists()
        for e in dataset.split("test"):
            assert e.clip_sdr_db in TEST_GRID

    def test_realized_sdr_on_disk(self, dataset):
        for e in dataset.entries:
            x = read_wav(dataset.path(e.clean_path))
            y = read_wav(dataset.path(e.clipped_path))
            assert sdr(x, y) == pytest.approx(e.clip_sdr_db, abs=0.05)
            assert sdr(x, y) == e.realized_sdr_db
            assert e.theta / PCM_STEP == round(e.theta / PCM_STEP)
            assert np.abs(y.samples).max() == pytest.approx(e.theta, abs=0)

    def test_splits(self, dataset):
        sizes = {s: len(dataset.utterances(s)) for s in ("train", "dev", "test")}
        assert sizes == {"train": 8, "dev": 1, "test": 1}
        ids = [set(u for u, _ in dataset.utterances(s)) for s in ("train", "dev", "test")]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_split_fractions(self):
        for n in (7, 20, 33, 100):
            split = assign_splits([f"u{i}" for i in range(n)], [None] * n, seed=1)
            counts = [list(split.values()).count(s) for s in ("train", "dev", "test")]
            for got, frac in zip(counts, (0.75, 0.10, 0.15)):
                assert abs(got - frac * n) <= 1

    def test_speaker_disjoint(self):
        ids = [f"u{i}" for i in range(40)]
        speakers = [f"s{i % 8}" for i in range(40)]
        split = assign_splits(ids, speakers, seed=0)
        for spk in set(speakers):
            assert len({split[u] for u, s in zip(ids, speakers) if s == spk}) == 1

    def test_manifest_round_trip(self, dataset):
        back = DatasetManifest.load(dataset.root / "manifest.json")
        assert back == dataset

    def test_deterministic(self, tmp_path):
        a = prepare_dataset(tmp_path / "a", synthetic=3, duration=0.6, seed=5)
        b = prepare_dataset(tmp_path / "b", synthetic=3, duration=0.6, seed=5)
        assert a.to_json() == b.to_json()
        for e in a.entries:
            assert a.path(e.clipped_path).read_bytes() == b.path(e.clipped_path).read_bytes()

    def test_corpus_directory(self, tmp_path, speech):
        for spk in ("anna", "bob", "cy"):
            (tmp_path / "corpus" / spk).mkdir(parents=True)
            write_wav(tmp_path / "corpus" / spk / "s1.wav", speech)
        m = prepare_dataset(tmp_path / "out", corpus_dir=tmp_path / "corpus", seed=0)
        assert {e.speaker for e in m.entries} == {"anna", "bob", "cy"}
        assert {e.utterance_id for e in m.entries} == {"anna-s1", "bob-s1", "cy-s1"}

    def test_bad_corpus(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError):
            prepare_dataset(tmp_path / "o", corpus_dir=tmp_path / "empty")
        (tmp_path / "bad").mkdir()
        (tmp_path / "bad" / "x.wav").write_bytes(b"RIFF0000WAVEjunk")
        with pytest.raises(DataError):
            prepare_dataset(tmp_path / "o", corpus_dir=tmp_path / "bad")

    def test_clip_to_target_grid(self, speech):
        y, theta, realized = clip_to_target(speech, 7.5)
        assert abs(realized - 7.5) <= 0.05
        assert theta * 32768 == round(theta * 32768)


class TestRun:
    def test_passthrough_bit_identical(self, dataset, tmp_path):
        run = run_declip(dataset, "passthrough", tmp_path)
        assert run.ok and len(run.outputs) == 6
        for e in dataset.split("test"):
            assert (tmp_path / "passthrough" / e.clipped_path).read_bytes() == \
                dataset.path(e.clipped_path).read_bytes()

    def test_consistent_iht_outputs_consistent(self, dataset, tmp_path):
        run = run_declip(dataset, "consistent_iht", tmp_path)
        assert run.ok
        for e in dataset.split("test"):
            y = read_wav(dataset.path(e.clipped_path))
            out = read_wav(tmp_path / "consistent_iht" / e.clipped_path)
            mask = build_clip_mask(y, e.theta)
            assert np.array_equal(out.samples[mask.reliable], y.samples[mask.reliable])
            assert np.all(out.samples[mask.positive] >= e.theta)
            assert np.all(out.samples[mask.negative] <= -e.theta)

    def test_unet_needs_checkpoint(self, dataset, tmp_path):
        with pytest.raises(DataError):
            run_declip(dataset, "unet", tmp_path, checkpoint=tmp_path / "missing.ckpt")
        with pytest.raises(ValueError):
            run_declip(dataset, "omp", tmp_path)

    def test_unet_path_is_stage_three(self, speech):
        from declipper.nn.unet import UNet

        model = UNet(UNetConfig(depth=2, base_filters=4, image_size=32), seed=0)
        out = declip_waveform(speech, 0.3, "unet", model)
        assert len(out) == len(speech)
        assert np.all(np.isfinite(out.samples))


def _read_table_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


class TestEvaluate:
    def test_clean_against_itself(self, dataset, tmp_path):
        for e in dataset.split("test"):
            dest = tmp_path / "oracle" / e.clipped_path
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(dataset.path(e.clean_path).read_bytes())
        rows, tables = evaluate_run(dataset, tmp_path, ["oracle"])
        assert all(math.isinf(v) for v in tables["sdr_db"].cells["oracle"])
        assert all(v == 0.0 for v in tables["llr"].cells["oracle"])
        assert all(v == pytest.approx(1.0, abs=1e-6) for v in tables["estoi"].cells["oracle"])

    def test_tables_and_csv(self, dataset, tmp_path):
        rows, tables = evaluate_run(dataset, tmp_path, ["passthrough"], out_dir=tmp_path / "ev")
        assert len(rows) == 6
        est = tables["estoi"].cells["passthrough"]
        assert est[-1] == pytest.approx(np.mean(est[:-1]), abs=1e-12)
        assert tables["sdr_db"].columns == TEST_GRID
        for name in METRICS:
            csv_rows = _read_table_csv(tmp_path / "ev" / f"table_{name}.csv")
            text = (tmp_path / "ev" / f"table_{name}.txt").read_text().splitlines()
            assert text[1].split() == csv_rows[0]
            for line, row in zip(text[2:], csv_rows[1:]):
                assert [v.rstrip("*") for v in line.split()] == row
        with open(tmp_path / "ev" / "results.csv") as f:
            back = list(csv.DictReader(f))
        assert [float(r["estoi"]) for r in back] == [r["estoi"] for r in rows]

    def test_best_marking(self):
        rows = [
            {"method": "a", "clip_sdr_db": 1.0, "llr": 0.5, "estoi": 0.7, "sdr_db": 2.0},
            {"method": "b", "clip_sdr_db": 1.0, "llr": 0.2, "estoi": 0.6, "sdr_db": 3.0},
        ]
        assert ResultsTable.from_rows(rows, "llr", [1.0]).best() == ["b", "b"]
        assert ResultsTable.from_rows(rows, "estoi", [1.0]).best() == ["a", "a"]
        text = ResultsTable.from_rows(rows, "estoi", [1.0]).to_text()
        assert "0.7000*" in text and "0.6000*" not in text

    def test_missing_outputs_reported(self, dataset, tmp_path):
        from declipper.harness.experiment import PartialFailure

        with pytest.raises(PartialFailure) as info:
            evaluate_run(dataset, tmp_path, ["iht"])
        assert info.value.tables is not None


class TestNoiseSweep:
    def test_zero_noise_matches_plain_table(self, dataset, tmp_path):
        _, plain = evaluate_run(dataset, tmp_path, ["passthrough"])
        _, sweep = noise_sweep(dataset, ["passthrough"], [0.0, 0.01, 0.1])
        for m in METRICS:
            j = plain[m].columns.index(3.5)
            assert sweep[m].cells["passthrough"][0] == plain[m].cells["passthrough"][j]

    def test_passthrough_degrades_with_noise(self, dataset):
        _, sweep = noise_sweep(dataset, ["passthrough"], [0.0, 0.001, 0.01, 0.1])
        s = sweep["sdr_db"].cells["passthrough"][:-1]
        assert all(b < a for a, b in zip(s, s[1:]))


class TestSpectrogram:
    def test_tone_row(self, tmp_path):
        t = np.arange(16000) / 16000
        write_wav(tmp_path / "tone.wav", Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), 16000))
        logmag = export_spectrogram(tmp_path / "tone.wav", tmp_path / "tone.pgm")
        img = read_pgm(tmp_path / "tone.pgm")
        assert img.shape == (257, logmag.shape[0])
        k = 1000 * 512 // 16000  # bin 32
        mid = img.shape[1] // 2
        assert int(np.argmax(img[:, mid])) == 256 - k

    def test_csv_round_trip(self, tmp_path, speech):
        write_wav(tmp_path / "s.wav", speech)
        export_spectrogram(tmp_path / "s.wav", tmp_path / "s.csv", fmt="csv")
        back = np.loadtxt(tmp_path / "s.csv", delimiter=",")
        expected = log_magnitude(stft(read_wav(tmp_path / "s.wav"), StftConfig()))
        np.testing.assert_array_equal(back, expected)

    def test_clipping_adds_high_frequency_energy(self, tmp_path, speech):
        y, _, _ = clip_to_target(speech, 1.5)
        write_wav(tmp_path / "c.wav", speech)
        write_wav(tmp_path / "y.wav", y)
        clean = export_spectrogram(tmp_path / "c.wav", tmp_path / "c.csv", fmt="csv")
        clipped = export_spectrogram(tmp_path / "y.wav", tmp_path / "y.csv", fmt="csv")
        hi = slice(128, None)  # above 4 kHz
        assert np.exp(2 * clipped[:, hi]).sum() > 2 * np.exp(2 * clean[:, hi]).sum()

    def test_bad_format(self, tmp_path, speech):
        write_wav(tmp_path / "s.wav", speech)
        with pytest.raises(ValueError):
            export_spectrogram(tmp_path / "s.wav", tmp_path / "s.x", fmt="png")


class TestTrain:
    def test_loss_csv_and_checkpoint(self, tmp_path):
        m = prepare_dataset(tmp_path / "d", synthetic=4, duration=0.5, seed=0)
        cfg = UNetConfig(depth=2, base_filters=4, image_size=16)
        _, losses = train_command(m, cfg, TrainConfig(epochs=3, batch_size=8), tmp_path / "t")
        with open(tmp_path / "t" / "loss.csv") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1 + 3
        assert [float(r[1]) for r in rows[1:]] == losses
        assert losses[-1] < losses[0]
        assert (tmp_path / "t" / "model.ckpt").exists()


class TestCli:
    def run(self, *argv):
        return cli.main([str(a) for a in argv])

    def test_pipeline_and_exit_codes(self, tmp_path, capsys):
        d = tmp_path / "d"
        assert self.run("prepare", "--synthetic", 3, "--duration", 0.6, "--out", d) == 0
        man = d / "manifest.json"
        assert self.run("declip", "--manifest", man, "--method", "passthrough",
                        "--out", tmp_path / "p") == 0
        assert self.run("evaluate", "--manifest", man, "--processed", tmp_path / "p",
                        "--methods", "passthrough", "--out", tmp_path / "e") == 0
        assert "estoi by clip_sdr_db" in capsys.readouterr().out
        # outputs for a method that never ran: partial failure
        assert self.run("evaluate", "--manifest", man, "--processed", tmp_path / "p",
                        "--methods", "passthrough,iht", "--out", tmp_path / "e2") == 3
        assert self.run("evaluate", "--manifest", tmp_path / "nope.json", "--processed",
                        tmp_path, "--out", tmp_path / "e3") == 2

    def test_config_file_and_overrides(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synthetic": 2, "duration": 0.6, "test_grid": [3.5],
                                   "train_grid": [5.0], "seed": 1}))
        assert self.run("--config", cfg, "prepare", "--out", tmp_path / "d", "--seed", 2) == 0
        m = DatasetManifest.load(tmp_path / "d" / "manifest.json")
        assert m.seed == 2 and m.test_grid == (3.5,)

    def test_config_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert self.run("--config", bad, "prepare", "--synthetic", 1, "--out", tmp_path) == 1
        unknown = tmp_path / "u.json"
        unknown.write_text(json.dumps({"train": {"learning_rat": 1}}))
        assert self.run("--config", unknown, "train", "--manifest", tmp_path / "m.json",
                        "--out", tmp_path) == 1
        with pytest.raises(SystemExit) as info:
            self.run("declip", "--manifest", "m", "--method", "omp", "--out", tmp_path)
        assert info.value.code == 1

    def test_spectrogram_command(self, tmp_path, speech):
        write_wav(tmp_path / "s.wav", speech)
        assert self.run("spectrogram", tmp_path / "s.wav", tmp_path / "s.csv",
                        "--format", "csv") == 0
        assert self.run("spectrogram", tmp_path / "missing.wav", tmp_path / "x.pgm") == 2
