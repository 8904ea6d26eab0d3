"""Waveform loading and the magnitude spectrogram frontend.

Audio enters as RIFF PCM16 mono WAV, scaled to floats by 1/32768. The STFT
uses a periodic Hann window with no centering: frame t covers samples
[t*hop, t*hop + n_fft). The waveform is zero-padded at the tail by
n_fft - hop samples so an exact multiple of the hop (e.g. 3 s at 16 kHz,
n_fft=512, hop=160) lands on a whole number of frames (257x300 there).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SpectrogramParams:
    n_fft: int = 512
    hop: int = 160
    window: str = "hann"

    def validate(self) -> None:
        if self.n_fft < 2:
            raise ValueError(f"n_fft must be >= 2, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in 1..n_fft, got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r} (only 'hann')")

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        """Frames produced for a waveform of the given length (pre-padding)."""
        if n_samples < self.n_fft:
            raise ValueError(f"waveform of {n_samples} samples is shorter than n_fft={self.n_fft}")
        padded = n_samples + (self.n_fft - self.hop)
        return (padded - self.n_fft) // self.hop + 1


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM16 mono WAV file; returns (float32 samples in [-1, 1), rate)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV ({wf.getcomptype()}) is not supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768.0)
    return samples, rate


def save_wav(path, samples: np.ndarray, rate: int) -> None:
    """Write float samples as PCM16 mono; values are clipped to [-1, 1)."""
    x = np.asarray(samples, dtype=np.float64)
    ints = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(rate))
        wf.writeframes(ints.tobytes())


def crop_or_pad(samples: np.ndarray, seconds: float, rate: int) -> np.ndarray:
    """Center-crop or symmetrically zero-pad to round(seconds * rate) samples."""
    if seconds <= 0 or rate <= 0:
        raise ValueError(f"seconds and rate must be positive, got {seconds}, {rate}")
    target = int(round(seconds * rate))
    n = len(samples)
    if n == target:
        return np.asarray(samples)
    if n > target:
        start = (n - target) // 2
        return np.asarray(samples[start : start + target])
    left = (target - n) // 2
    right = target - n - left
    return np.concatenate([np.zeros(left, samples.dtype), samples, np.zeros(right, samples.dtype)])


def hann_window(n: int, dtype=np.float64) -> np.ndarray:
    # Periodic form: its DFT is exactly zero beyond bins 0 and +-1, which keeps
    # spectral leakage of steady tones to the adjacent bin only.
    k = np.arange(n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)).astype(dtype)


def stft_magnitude(samples: np.ndarray, params: SpectrogramParams = SpectrogramParams()) -> np.ndarray:
    """Magnitude spectrogram, shape [n_fft//2+1, frames], same dtype as input."""
    params.validate()
    x = np.asarray(samples)
    if x.ndim != 1:
        raise ValueError(f"stft_magnitude expects a 1-d waveform, got shape {x.shape}")
    n_frames = params.frame_count(len(x))  # validates length >= n_fft
    tail = params.n_fft - params.hop
    if tail:
        x = np.concatenate([x, np.zeros(tail, x.dtype)])
    frames = np.lib.stride_tricks.sliding_window_view(x, params.n_fft)[:: params.hop]
    frames = frames[:n_frames]
    windowed = frames * hann_window(params.n_fft, x.dtype)
    mag = np.abs(np.fft.rfft(windowed, axis=1))
    return np.ascontiguousarray(mag.T.astype(x.dtype, copy=False))
