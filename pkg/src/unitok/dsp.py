"""Spectral primitives: framing, STFT/ISTFT, mel filterbanks and spectral losses.

Numpy functions are the reference implementations. The ``torch_*`` variants are
differentiable twins used inside codec training; they follow the same framing
conventions so the two agree to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigurationError, LengthError

SAMPLE_RATE = 16000
LOSS_WINDOW = 1024
LOSS_HOP = 256
LOSS_N_MELS = 100
SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class AudioBuffer:
    """Mono float64 signal at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"audio must be mono (1-D), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # complex, (n_frames, window_len // 2 + 1)
    window_len: int
    hop: int

    @property
    def n_bins(self):
        return self.window_len // 2 + 1


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    f_min: float
    f_max: float

    @property
    def n_mels(self):
        return self.weights.shape[0]

    @property
    def n_bins(self):
        return self.weights.shape[1]


def as_samples(audio):
    if isinstance(audio, AudioBuffer):
        return audio.samples
    return np.asarray(audio, dtype=np.float64)


@lru_cache(maxsize=32)
def _hann(n):
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def hann_window(n):
    """Periodic Hann window of length ``n``."""
    return _hann(int(n)).copy()


def frame_count(n_samples, window_len, hop):
    """Number of unpadded analysis frames."""
    if n_samples < window_len:
        return 0
    return (n_samples - window_len) // hop + 1


def _check_geometry(window_len, hop):
    if window_len <= 0 or window_len % 2:
        raise ConfigurationError(f"window_len must be a positive even number, got {window_len}")
    if hop <= 0 or hop > window_len:
        raise ConfigurationError(f"hop must lie in (0, window_len], got {hop}")


def is_cola(window_len, hop, tol=1e-10):
    """True when the squared Hann window overlap-adds to a constant at this hop."""
    if window_len % hop:
        return False
    w2 = _hann(window_len) ** 2
    total = w2.reshape(-1, hop).sum(axis=0)
    return bool(np.ptp(total) <= tol * total.max())


def stft(audio, window_len=LOSS_WINDOW, hop=LOSS_HOP):
    """Unpadded STFT; frame f covers samples [f*hop, f*hop + window_len)."""
    _check_geometry(window_len, hop)
    x = as_samples(audio)
    if x.shape[0] < window_len:
        raise LengthError(f"signal of {x.shape[0]} samples is shorter than one window ({window_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop]
    return Spectrogram(np.fft.rfft(frames * _hann(window_len), axis=-1), window_len, hop)


def istft(spec, sample_rate=SAMPLE_RATE):
    """Weighted overlap-add inverse; exact on the fully overlapped interior."""
    window_len, hop = spec.window_len, spec.hop
    _check_geometry(window_len, hop)
    if not is_cola(window_len, hop):
        raise ConfigurationError(f"window {window_len} / hop {hop} does not satisfy COLA for Hann^2")
    n_frames = spec.frames.shape[0]
    length = (n_frames - 1) * hop + window_len if n_frames else 0
    w = _hann(window_len)
    frames = np.fft.irfft(spec.frames, n=window_len, axis=-1) * w
    out = np.zeros(length)
    norm = np.zeros(length)
    for f in range(n_frames):
        out[f * hop:f * hop + window_len] += frames[f]
        norm[f * hop:f * hop + window_len] += w ** 2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return AudioBuffer(out, sample_rate)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_weights(n_mels, n_fft, sample_rate, f_min, f_max):
    bins = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # area normalisation so every triangle carries comparable energy
    weights *= 2.0 / (upper - lower)
    weights.setflags(write=False)
    return weights


def mel_filterbank(n_mels=LOSS_N_MELS, n_fft=LOSS_WINDOW, sample_rate=SAMPLE_RATE,
                   f_min=0.0, f_max=None):
    """HTK-scale triangular filterbank with area normalisation."""
    f_max = sample_rate / 2.0 if f_max is None else float(f_max)
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ConfigurationError(f"invalid mel range [{f_min}, {f_max}]")
    weights = _mel_weights(int(n_mels), int(n_fft), int(sample_rate), float(f_min), f_max)
    return MelFilterbank(weights, float(f_min), f_max)


def mel_project(spec, fb):
    """Mel energies of |spec|, shape (n_frames, n_mels)."""
    mag = np.abs(spec.frames) if isinstance(spec, Spectrogram) else np.asarray(spec)
    if mag.shape[-1] != fb.n_bins:
        raise ValueError(f"filterbank expects {fb.n_bins} bins, spectrogram has {mag.shape[-1]}")
    return mag @ fb.weights.T


def _pair(a, b):
    xa, xb = as_samples(a), as_samples(b)
    if xa.shape != xb.shape:
        raise LengthError(f"length mismatch: {xa.shape[0]} vs {xb.shape[0]}")
    if isinstance(a, AudioBuffer) and isinstance(b, AudioBuffer) and a.sample_rate != b.sample_rate:
        raise ValueError("sample rate mismatch")
    return xa, xb


def stft_loss(a, b, window_len=LOSS_WINDOW, hop=LOSS_HOP):
    """Mean absolute difference of STFT magnitudes."""
    xa, xb = _pair(a, b)
    ma = np.abs(stft(xa, window_len, hop).frames)
    mb = np.abs(stft(xb, window_len, hop).frames)
    return float(np.mean(np.abs(ma - mb)))


def mel_loss(a, b, window_len=LOSS_WINDOW, hop=LOSS_HOP, n_mels=LOSS_N_MELS, sample_rate=SAMPLE_RATE):
    """Mean absolute difference of linear-magnitude mel spectrograms."""
    xa, xb = _pair(a, b)
    if isinstance(a, AudioBuffer):
        sample_rate = a.sample_rate
    fb = mel_filterbank(n_mels, window_len, sample_rate)
    mel_a = mel_project(stft(xa, window_len, hop), fb)
    mel_b = mel_project(stft(xb, window_len, hop), fb)
    return float(np.mean(np.abs(mel_a - mel_b)))


def snr_db(reference, estimate, cap=SNR_CAP_DB):
    """Signal-to-error ratio in dB, capped for exact matches."""
    ref, est = _pair(reference, estimate)
    signal = float(np.sum(ref ** 2))
    error = float(np.sum((ref - est) ** 2))
    if error == 0.0:
        return cap
    if signal == 0.0:
        return -cap
    return float(min(cap, 10.0 * np.log10(signal / error)))


# ---------------------------------------------------------------------------
# torch twins (differentiable, used by the codec)
# ---------------------------------------------------------------------------

def _torch_window(window_len, like):
    return torch.from_numpy(_hann(window_len).copy()).to(like.dtype)


def torch_stft(x, window_len=LOSS_WINDOW, hop=LOSS_HOP):
    """Complex STFT of ``x`` with shape (..., n) -> (..., frames, bins)."""
    frames = x.unfold(-1, window_len, hop) * _torch_window(window_len, x)
    return torch.fft.rfft(frames, dim=-1)


def torch_istft(spec, window_len=LOSS_WINDOW, hop=LOSS_HOP):
    """Weighted overlap-add of a (batch, frames, bins) complex tensor."""
    batch, n_frames, _ = spec.shape
    w = _torch_window(window_len, spec.real)
    frames = torch.fft.irfft(spec, n=window_len, dim=-1) * w
    length = (n_frames - 1) * hop + window_len
    idx = (torch.arange(n_frames)[:, None] * hop + torch.arange(window_len)[None, :]).reshape(-1)
    out = frames.new_zeros(batch, length).index_add(1, idx, frames.reshape(batch, -1))
    norm = frames.new_zeros(length).index_add(0, idx, (w ** 2).repeat(n_frames))
    return torch.where(norm > 1e-10, out / norm.clamp_min(1e-10), torch.zeros_like(out))


def torch_mel_loss(a, b, window_len=LOSS_WINDOW, hop=LOSS_HOP, n_mels=LOSS_N_MELS,
                   sample_rate=SAMPLE_RATE):
    """Batched, differentiable version of :func:`mel_loss`."""
    fb = torch.from_numpy(mel_filterbank(n_mels, window_len, sample_rate).weights.copy()).to(a.dtype)
    mel_a = torch_stft(a, window_len, hop).abs() @ fb.T
    mel_b = torch_stft(b, window_len, hop).abs() @ fb.T
    return (mel_a - mel_b).abs().mean()
