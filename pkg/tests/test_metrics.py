import math

import numpy as np
import pytest
from scipy.signal import lfilter

from declipper.metrics import (
    CSV_FIELDS,
    InsufficientSpeechError,
    MetricReport,
    estoi,
    evaluate,
    levinson_durbin,
    llr,
    lpc,
    third_octave_bands,
)
from declipper.signal_core import Waveform, clip, sdr, solve_threshold_for_sdr

TEST_GRID = (0.5, 1.5, 3.5, 7.5, 12.5, 17.5)


def noisy(x, snr_db, seed=0):
    noise = np.random.default_rng(seed).standard_normal(len(x))
    noise *= np.linalg.norm(x.samples) / np.linalg.norm(noise) * 10 ** (-snr_db / 20)
    return x.with_samples(x.samples + noise)


class TestLpc:
    def test_ar2_recovery(self):
        r = 0.9
        a_true = np.array([1.0, -2 * r * np.cos(np.pi / 4), r * r])
        e = np.random.default_rng(3).standard_normal(16000)
        x = lfilter([1.0], a_true, e)
        model = lpc(x, order=2)
        np.testing.assert_allclose(model.coefficients[1:], a_true[1:], rtol=0.05)
        assert model.coefficients[0] == 1.0
        assert np.all(np.abs(model.reflection) < 1)

    def test_white_noise_gain(self):
        x = np.random.default_rng(4).standard_normal(16000)
        model = lpc(x, order=16)
        assert model.prediction_gain_db < 0.1
        assert np.abs(model.coefficients[1:]).max() < 0.05

    def test_zero_frame_flagged(self):
        assert not lpc(np.zeros(512)).valid

    def test_levinson_matches_linear_solve(self, rng):
        x = lfilter([1.0], [1.0, -0.5, 0.3], rng.standard_normal(2000))
        r = np.array([np.dot(x[: x.size - k], x[k:]) for k in range(5)])
        a, k, err = levinson_durbin(r, 4)
        R = np.array([[r[abs(i - j)] for j in range(4)] for i in range(4)])
        np.testing.assert_allclose(a[1:], np.linalg.solve(R, -r[1:5]), rtol=1e-10)
        assert err == pytest.approx(r[0] + np.dot(a[1:], r[1:5]), rel=1e-10)

    def test_frame_too_short(self):
        with pytest.raises(ValueError):
            lpc(np.ones(10), order=16)


class TestLlr:
    def test_identity(self, speech):
        assert llr(speech, speech) == 0.0

    def test_tiny_noise(self, speech):
        assert llr(speech, noisy(speech, 60.0)) < 0.05

    def test_range_and_gain_invariance(self, speech):
        y = clip(speech, solve_threshold_for_sdr(speech, 1.5))
        v = llr(speech, y)
        assert 0.0 <= v <= 2.0
        assert llr(speech, y.with_samples(3.0 * y.samples)) == pytest.approx(v, abs=1e-9)

    def test_heavy_clipping_worse_than_light(self, corpus):
        for x in corpus[:3]:
            heavy = llr(x, clip(x, solve_threshold_for_sdr(x, 0.5)))
            light = llr(x, clip(x, solve_threshold_for_sdr(x, 17.5)))
            assert heavy > light

    def test_errors(self, speech):
        with pytest.raises(ValueError):
            llr(speech, Waveform(speech.samples[:-1], 16000))
        silent = Waveform(np.zeros(8000), 16000)
        with pytest.raises(InsufficientSpeechError):
            llr(silent, silent)


class TestEstoi:
    def test_bands(self):
        obm, centres = third_octave_bands()
        assert obm.shape == (15, 257)
        assert centres[0] == 150.0 and centres[3] == pytest.approx(300.0)
        assert np.all(obm.sum(axis=0) <= 1)  # non-overlapping
        first = [np.flatnonzero(row)[0] for row in obm]
        assert first == sorted(first)

    def test_identity(self, speech):
        assert estoi(speech, speech) == pytest.approx(1.0, abs=1e-6)

    def test_white_noise(self, speech):
        noise = np.random.default_rng(5).standard_normal(len(speech))
        assert abs(estoi(speech, speech.with_samples(noise))) < 0.1

    def test_gain_invariance(self, speech):
        y = noisy(speech, 5.0)
        assert estoi(speech, y.with_samples(0.3 * y.samples)) == pytest.approx(
            estoi(speech, y), abs=1e-9)

    def test_monotone_in_clipping_level(self, corpus):
        violations = pairs = 0
        for x in corpus:
            scores = [estoi(x, clip(x, solve_threshold_for_sdr(x, s))) for s in TEST_GRID]
            assert all(-1 <= s <= 1 for s in scores)
            violations += sum(b < a for a, b in zip(scores, scores[1:]))
            pairs += len(scores) - 1
        assert violations <= pairs // 20

    def test_against_reference_implementation(self, corpus):
        pystoi = pytest.importorskip("pystoi")
        for x in corpus[:3]:
            for s in (1.5, 7.5):
                y = clip(x, solve_threshold_for_sdr(x, s))
                ref = pystoi.stoi(x.samples, y.samples, x.sample_rate, extended=True)
                assert estoi(x, y) == pytest.approx(ref, abs=0.02)

    def test_too_short(self):
        x = Waveform(np.random.default_rng(0).standard_normal(4000), 16000)  # 250 ms
        with pytest.raises(InsufficientSpeechError):
            estoi(x, x)


class TestEvaluate:
    def test_identity(self, speech):
        rep = evaluate(speech, speech)
        assert rep.sdr_db == math.inf and rep.llr == 0.0
        assert rep.estoi == pytest.approx(1.0, abs=1e-6)
        assert not rep.failures

    def test_clipped(self, speech):
        y = clip(speech, solve_threshold_for_sdr(speech, 3.5))
        rep = evaluate(speech, y)
        assert rep.sdr_db == pytest.approx(3.5, abs=0.05)
        assert rep.sdr_db == sdr(speech, y)
        assert rep.llr > 0 and rep.estoi < 1

    def test_failure_recorded_not_raised(self):
        x = Waveform(np.random.default_rng(0).standard_normal(2000), 16000)
        rep = evaluate(x, x)
        assert "estoi" in rep.failures and math.isnan(rep.estoi)
        assert rep.llr == 0.0

    def test_csv_row(self):
        row = MetricReport(3.5, 0.2, 0.8).csv_row("u1", "iht", 3.5, 0.01)
        assert tuple(row) == CSV_FIELDS
        assert row["method"] == "iht" and row["noise_sigma2"] == 0.01
