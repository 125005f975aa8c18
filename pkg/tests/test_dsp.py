import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unitok import dsp
from unitok.errors import ConfigurationError, LengthError


def direct_dft(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (frame[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


class TestAudioBuffer:
    def test_converts_to_float64(self):
        buf = dsp.AudioBuffer(np.arange(4, dtype=np.int16))
        assert buf.samples.dtype == np.float64
        assert len(buf) == 4 and buf.duration == 4 / 16000

    def test_rejects_stereo_and_nan(self):
        with pytest.raises(ValueError):
            dsp.AudioBuffer(np.zeros((2, 10)))
        with pytest.raises(ValueError):
            dsp.AudioBuffer(np.array([0.0, np.nan]))


class TestWindowing:
    def test_periodic_hann(self):
        w = dsp.hann_window(8)
        np.testing.assert_allclose(w, [0, 0.1464466, 0.5, 0.8535534, 1, 0.8535534, 0.5, 0.1464466], atol=1e-7)

    def test_frame_count(self):
        assert dsp.frame_count(1023, 1024, 256) == 0
        assert dsp.frame_count(1024, 1024, 256) == 1
        assert dsp.frame_count(16000, 1024, 256) == (16000 - 1024) // 256 + 1

    @pytest.mark.parametrize("window,hop,expected", [(1024, 256, True), (1024, 512, False), (1024, 768, False),
                                                     (1024, 1024, False)])
    def test_cola(self, window, hop, expected):
        assert dsp.is_cola(window, hop) is expected


class TestStft:
    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(64 + 3 * 16)
        spec = dsp.stft(x, 64, 16)
        w = dsp.hann_window(64)
        for f in range(spec.frames.shape[0]):
            np.testing.assert_allclose(spec.frames[f], direct_dft(x[f * 16:f * 16 + 64] * w), atol=1e-10)

    def test_short_signal_raises(self):
        with pytest.raises(LengthError):
            dsp.stft(np.zeros(100), 1024, 256)

    def test_bad_geometry(self):
        with pytest.raises(ConfigurationError):
            dsp.stft(np.zeros(2048), 1024, 0)
        with pytest.raises(ConfigurationError):
            dsp.istft(dsp.Spectrogram(np.zeros((3, 513), complex), 1024, 768))

    def test_round_trip_interior(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(16000)
        y = dsp.istft(dsp.stft(x)).samples
        interior = slice(1024, len(y) - 1024)
        assert dsp.snr_db(x[interior], y[interior]) > 60.0

    def test_istft_matches_naive_overlap_add(self):
        rng = np.random.default_rng(2)
        frames = rng.standard_normal((5, 17)) + 1j * rng.standard_normal((5, 17))
        frames[:, 0] = frames[:, 0].real
        frames[:, -1] = frames[:, -1].real
        y = dsp.istft(dsp.Spectrogram(frames, 32, 8)).samples
        w = dsp.hann_window(32)
        num, den = np.zeros(32 + 4 * 8), np.zeros(32 + 4 * 8)
        for f in range(5):
            seg = np.fft.irfft(frames[f], 32) * w
            num[f * 8:f * 8 + 32] += seg
            den[f * 8:f * 8 + 32] += w * w
        expected = np.where(den > 1e-10, num / np.where(den > 1e-10, den, 1), 0.0)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_torch_twin_agrees(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4096)
        ref = dsp.stft(x).frames
        twin = dsp.torch_stft(torch.from_numpy(x)).numpy()
        np.testing.assert_allclose(twin, ref, atol=1e-9)
        back = dsp.torch_istft(torch.from_numpy(ref)[None])[0].numpy()
        np.testing.assert_allclose(back, dsp.istft(dsp.stft(x)).samples, atol=1e-9)


class TestMel:
    def test_mel_scale_round_trip(self):
        hz = np.array([0.0, 100.0, 1000.0, 8000.0])
        np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel(hz)), hz, atol=1e-9)
        assert dsp.hz_to_mel(1000.0) == pytest.approx(999.9856, abs=1e-3)

    def test_filterbank_shape_and_coverage(self):
        fb = dsp.mel_filterbank()
        assert fb.weights.shape == (100, 513)
        assert np.all(fb.weights >= 0)
        assert np.all(fb.weights.sum(axis=1) > 0)

    def test_triangle_peak_at_centre(self):
        fb = dsp.mel_filterbank(n_mels=10, n_fft=1024)
        edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000), 12))
        bins = np.linspace(0, 8000, 513)
        for m in range(10):
            peak = bins[np.argmax(fb.weights[m])]
            assert abs(peak - edges[m + 1]) <= 8000 / 512

    def test_invalid_range(self):
        with pytest.raises(ConfigurationError):
            dsp.mel_filterbank(f_min=5000, f_max=4000)


class TestLosses:
    def test_zero_on_identical(self):
        x = np.random.default_rng(4).standard_normal(8000)
        assert dsp.stft_loss(x, x) == 0.0
        assert dsp.mel_loss(x, x) == 0.0
        assert dsp.snr_db(x, x) == dsp.SNR_CAP_DB

    def test_linear_under_magnitude_scaling(self):
        x = np.random.default_rng(5).standard_normal(8000)
        base_stft = dsp.stft_loss(x, 0 * x)
        base_mel = dsp.mel_loss(x, 0 * x)
        for a in (0.5, 2.0, 3.7):
            assert dsp.stft_loss(a * x, 0 * x) == pytest.approx(a * base_stft, rel=1e-9)
            assert dsp.mel_loss(a * x, 0 * x) == pytest.approx(a * base_mel, rel=1e-9)

    def test_snr_known_value(self):
        x = np.ones(100)
        assert dsp.snr_db(x, 1.1 * x) == pytest.approx(20.0, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(LengthError):
            dsp.mel_loss(np.zeros(2048), np.zeros(4096))

    def test_torch_mel_loss_matches(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal(4096), rng.standard_normal(4096)
        twin = dsp.torch_mel_loss(torch.from_numpy(a)[None], torch.from_numpy(b)[None]).item()
        assert twin == pytest.approx(dsp.mel_loss(a, b), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1024, max_value=6000), st.integers(min_value=0, max_value=2 ** 31))
def test_round_trip_property(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = dsp.istft(dsp.stft(x)).samples
    covered = len(y)
    lo, hi = 768, covered - 768
    if hi > lo:
        np.testing.assert_allclose(y[lo:hi], x[lo:hi], atol=1e-9)
