"""Audio frontend: WAV IO, cropping/padding, magnitude STFT."""

import numpy as np
import pytest

from avloc.audio import (
    SpectrogramParams,
    crop_or_pad,
    hann_window,
    load_wav,
    save_wav,
    stft_magnitude,
)

RATE = 16000


class TestWavIO:
    def test_round_trip_is_exact_on_the_pcm16_grid(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=1000, dtype=np.int16)
        x = ints.astype(np.float32) / 32768.0
        path = tmp_path / "t.wav"
        save_wav(path, x, RATE)
        back, rate = load_wav(path)
        assert rate == RATE
        np.testing.assert_array_equal(back, x)

    def test_values_are_scaled_into_unit_range(self, tmp_path):
        path = tmp_path / "t.wav"
        save_wav(path, np.array([1.5, -2.0]), RATE)  # clipped
        back, _ = load_wav(path)
        np.testing.assert_allclose(back, [32767 / 32768, -1.0])

    def test_stereo_rejected(self, tmp_path):
        import wave

        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(RATE)
            wf.writeframes(b"\x00\x00" * 8)
        with pytest.raises(ValueError, match="mono"):
            load_wav(path)


class TestCropOrPad:
    def test_crop_keeps_center(self):
        x = np.arange(3 * RATE, dtype=np.float32)
        out = crop_or_pad(x, 2.0, RATE)
        assert len(out) == 2 * RATE
        assert out[0] == RATE // 2 and out[-1] == RATE // 2 + 2 * RATE - 1

    def test_pad_is_symmetric(self):
        x = np.ones(RATE, dtype=np.float32)
        out = crop_or_pad(x, 3.0, RATE)
        assert len(out) == 3 * RATE
        assert (out[:RATE] == 0).all() and (out[-RATE:] == 0).all()
        assert (out[RATE : 2 * RATE] == 1).all()

    def test_identity_when_already_target_length(self):
        x = np.arange(RATE, dtype=np.float32)
        np.testing.assert_array_equal(crop_or_pad(x, 1.0, RATE), x)

    def test_rounds_fractional_targets(self):
        assert len(crop_or_pad(np.zeros(10), 0.5001, 10)) == 5


class TestStft:
    def test_default_three_seconds_is_257_by_300(self):
        x = np.zeros(3 * RATE, dtype=np.float32)
        spec = stft_magnitude(x)
        assert spec.shape == (257, 300)
        assert spec.dtype == np.float32
        assert (spec == 0).all()

    def test_shape_law_over_random_lengths(self):
        """frames = (length + n_fft - hop - n_fft)//hop + 1, F fixed at 257."""
        p = SpectrogramParams()
        rng = np.random.default_rng(4)
        for n in rng.integers(512, 60000, size=25):
            n = int(n)
            spec = stft_magnitude(np.zeros(n, dtype=np.float32), p)
            want_frames = (n + (p.n_fft - p.hop) - p.n_fft) // p.hop + 1
            assert spec.shape == (257, want_frames)

    def test_shorter_than_window_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            stft_magnitude(np.zeros(511, dtype=np.float32))

    def test_pure_tone_peaks_at_its_bin(self):
        # 1 kHz at 16 kHz with n_fft=512: bin spacing 31.25 Hz -> bin 32 exactly.
        t = np.arange(3 * RATE) / RATE
        x = np.sin(2 * np.pi * 1000.0 * t).astype(np.float32)
        spec = stft_magnitude(x)
        assert (spec.argmax(axis=0) == 32).all()

    def test_dc_energy_stays_in_low_bins(self):
        p = SpectrogramParams()
        x = np.ones(RATE, dtype=np.float64)
        spec = stft_magnitude(x, p)
        # keep only frames that never touch the zero-padded tail
        last = (len(x) - p.n_fft) // p.hop
        interior = spec[2:, 1 : last + 1]
        bin0 = spec[0, 1 : last + 1]
        assert (interior < 1e-6 * bin0).all()

    def test_window_energy_balance_per_frame(self):
        """One-sided power doubled off the ends equals n_fft * windowed power."""
        p = SpectrogramParams()
        rng = np.random.default_rng(11)
        x = rng.standard_normal(4 * p.n_fft)
        spec = stft_magnitude(x, p).astype(np.float64)
        w = hann_window(p.n_fft)
        frame0 = x[: p.n_fft] * w
        power = spec[:, 0] ** 2
        one_sided = power[0] + power[-1] + 2 * power[1:-1].sum()
        np.testing.assert_allclose(one_sided, p.n_fft * (frame0**2).sum(), rtol=1e-9)

    def test_frames_are_deterministic_and_uncentered(self):
        # Frame t must cover [t*hop, t*hop + n_fft): an impulse at sample `hop`
        # is absent from frame 0 (window zero at its first sample aside, any
        # energy in frame 0 would sit at sample hop with window weight > 0).
        p = SpectrogramParams()
        x = np.zeros(2 * p.n_fft, dtype=np.float64)
        x[p.hop] = 1.0
        spec = stft_magnitude(x, p)
        w = hann_window(p.n_fft)
        # frame 0 sees the impulse at offset hop, frame 1 sees it at offset 0
        # where the periodic hann window is exactly zero.
        np.testing.assert_allclose(spec[:, 0], w[p.hop], atol=1e-12)
        np.testing.assert_allclose(spec[:, 1], 0.0, atol=1e-12)

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError, match="hop"):
            stft_magnitude(np.zeros(1000), SpectrogramParams(hop=0))
        with pytest.raises(ValueError, match="window"):
            stft_magnitude(np.zeros(1000), SpectrogramParams(window="hamming"))
