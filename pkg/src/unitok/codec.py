"""Dual-stream codec: acoustic and semantic RVQ branches, joint decoder, ISTFT head.

The acoustic branch stacks 640-sample frames and maps them through dense layers
to a 25 Hz latent; the semantic branch starts from :func:`pseudo_ssl` features.
Both latents are residual-quantized, concatenated per frame and decoded to a
log-magnitude/phase spectrogram that is inverted with a weighted overlap-add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import dsp
from .dsp import AudioBuffer, as_samples
from .errors import TrainingFault
from .quantize import RvqStack, codebook_update, init_stack, rvq_decode, rvq_encode
from .seqgrammar import TokenGrid

torch.set_default_dtype(torch.float64)

SSL_SEED = 0x55D1
SSL_MELS = 80
SSL_LOG_CENTER = -6.0  # rough centring of log-mel values for [-1, 1]-scaled audio
SSL_LOG_SCALE = 4.0
LOG_MAG_MAX = 10.0
HEAD_LOG_MAG_INIT = -2.0


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = 16000
    downsample: int = 640
    dim: int = 64
    codebook_size: int = 64
    n_layers: int = 4
    hidden: int = 128
    ssl_dim: int = 64
    head_window: int = 1024
    head_hop: int = 256
    lambda_commit: float = 0.25
    lambda_mel: float = 1.0
    lambda_aux: float = 1.0
    lambda_adv: float = 0.0  # discriminators are not part of this build
    lambda_fm: float = 0.0
    ema_decay: float = 0.99
    dead_threshold: float = 1e-3

    def __post_init__(self):
        if self.sample_rate % self.downsample:
            raise ValueError("downsample must divide the sample rate")
        weights = (self.lambda_commit, self.lambda_mel, self.lambda_aux, self.lambda_adv, self.lambda_fm)
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def frame_rate(self):
        return self.sample_rate // self.downsample

    @property
    def n_bins(self):
        return self.head_window // 2 + 1

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "toy": {},
            "full": dict(dim=512, codebook_size=1024, hidden=512, ssl_dim=768),
        }
        if name not in presets:
            raise ValueError(f"unknown codec preset {name!r}")
        return cls(**{**presets[name], **overrides})


@dataclass(frozen=True)
class DualTokens:
    acoustic: TokenGrid
    semantic: TokenGrid

    def __post_init__(self):
        if self.acoustic.steps != self.semantic.steps:
            raise ValueError(f"stream frame counts differ: {self.acoustic.steps} vs {self.semantic.steps}")

    @property
    def steps(self):
        return self.acoustic.steps


@dataclass
class LossReport:
    total: float
    commit: float
    mel: float
    aux: float
    adv: float = 0.0
    fm: float = 0.0
    graph: torch.Tensor = None  # differentiable total, when requested

    def as_dict(self):
        return {k: getattr(self, k) for k in ("total", "commit", "mel", "aux", "adv", "fm")}


def n_frames(n_samples, downsample=640):
    return -(-n_samples // downsample)


def pad_to_frames(x, downsample=640):
    x = np.asarray(x, dtype=np.float64)
    n = n_frames(x.shape[-1], downsample) * downsample
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])])


@lru_cache(maxsize=4)
def _ssl_projection(ssl_dim):
    rng = np.random.default_rng(SSL_SEED)
    proj = rng.standard_normal((SSL_MELS, ssl_dim)) / math.sqrt(SSL_MELS)
    proj.setflags(write=False)
    return proj


def pseudo_ssl(audio, ssl_dim=64, downsample=640, sample_rate=16000):
    """Deterministic stand-in for pretrained speech features, (frames, ssl_dim) at 25 Hz.

    80-bin log-mel at twice the frame rate, averaged over pairs of frames and
    projected by a fixed seeded matrix.
    """
    x = pad_to_frames(as_samples(audio), downsample)
    half = downsample // 2
    spec = dsp.stft(np.pad(x, (0, half)), window_len=downsample, hop=half)
    fb = dsp.mel_filterbank(SSL_MELS, downsample, sample_rate)
    logmel = (np.log(dsp.mel_project(spec, fb) + 1e-5) - SSL_LOG_CENTER) / SSL_LOG_SCALE
    pooled = logmel.reshape(-1, 2, SSL_MELS).mean(axis=1)
    return pooled @ _ssl_projection(ssl_dim)


class HCodecNet(nn.Module):
    """Trainable arrays of the codec (everything except the codebooks)."""

    def __init__(self, cfg):
        super().__init__()
        h = cfg.hidden
        self.acoustic_encoder = nn.Sequential(
            nn.Linear(cfg.downsample, h), nn.Tanh(), nn.Linear(h, h), nn.Tanh(), nn.Linear(h, cfg.dim))
        self.semantic_encoder = nn.Sequential(nn.Linear(cfg.ssl_dim, h), nn.Tanh(), nn.Linear(h, cfg.dim))
        self.decoder = nn.Sequential(nn.Linear(2 * cfg.dim, h), nn.Tanh(), nn.Linear(h, h), nn.Tanh())
        # per STFT bin: log-magnitude plus an unnormalised phasor (re, im)
        self.head = nn.Linear(h, 3 * cfg.n_bins)
        self.semantic_decoder = nn.Sequential(nn.Linear(cfg.dim, h), nn.Tanh(), nn.Linear(h, cfg.ssl_dim))
        bins = cfg.n_bins
        with torch.no_grad():
            # start quiet and phase-coherent: unit increments, bin-centre rotation only
            self.head.bias[:bins] = HEAD_LOG_MAG_INIT
            self.head.weight[bins:] *= 0.01
            self.head.bias[bins:2 * bins] = 1.0
            self.head.bias[2 * bins:] = 0.0


@dataclass
class CodecParams:
    config: CodecConfig
    net: HCodecNet
    acoustic: RvqStack = None
    semantic: RvqStack = None

    @classmethod
    def create(cls, config, seed=0):
        torch.manual_seed(seed)
        return cls(config, HCodecNet(config))

    def copy(self):
        other = CodecParams(self.config, HCodecNet(self.config), self.acoustic and self.acoustic.copy(),
                            self.semantic and self.semantic.copy())
        other.net.load_state_dict(self.net.state_dict())
        return other


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _batch(audio):
    if isinstance(audio, AudioBuffer) or (not isinstance(audio, (list, tuple)) and np.ndim(audio) == 1):
        audio = [audio]
    return np.stack([as_samples(a) for a in audio])


def encode_latents(params, audio):
    """Acoustic latent, semantic latent and target SSL features for a (B, n) batch."""
    cfg = params.config
    x = pad_to_frames(audio, cfg.downsample)
    frames = torch.from_numpy(x).reshape(x.shape[0], -1, cfg.downsample)
    ssl = np.stack([pseudo_ssl(row, cfg.ssl_dim, cfg.downsample, cfg.sample_rate) for row in x])
    ssl = torch.from_numpy(ssl)
    return params.net.acoustic_encoder(frames), params.net.semantic_encoder(ssl), ssl


def _quantize(stack, latent):
    flat = latent.detach().reshape(-1, latent.shape[-1]).numpy()
    result = rvq_encode(stack, flat)
    quantized = torch.from_numpy(result.quantized).reshape(latent.shape)
    return quantized, result


@lru_cache(maxsize=64)
def _head_geometry(steps, downsample, window, hop):
    """STFT frame count, crop offset and a (frames, steps) linear-interpolation matrix."""
    n_out = steps * downsample
    offset = window - hop  # first sample with full overlap
    count = -(-(n_out + 2 * offset - window) // hop) + 1
    centres = np.arange(count) * hop + window / 2 - offset
    pos = np.clip(centres / downsample - 0.5, 0, steps - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, steps - 1)
    frac = pos - lo
    interp = np.zeros((count, steps))
    interp[np.arange(count), lo] += 1 - frac
    interp[np.arange(count), hi] += frac
    return count, offset, interp


@lru_cache(maxsize=4)
def _bin_advance(bins, window, hop):
    """Per-hop phase rotation of a sinusoid sitting exactly on each bin centre."""
    return torch.polar(torch.ones(bins), torch.arange(bins) * (2 * math.pi * hop / window))


def synthesize(params, quant_acoustic, quant_semantic):
    """Decode (B, T, dim) quantized streams to (B, T*downsample) waveforms."""
    cfg = params.config
    steps = quant_acoustic.shape[1]
    hidden = params.net.decoder(torch.cat([quant_acoustic, quant_semantic], dim=-1))
    count, offset, interp = _head_geometry(steps, cfg.downsample, cfg.head_window, cfg.head_hop)
    hidden = torch.from_numpy(interp) @ hidden
    out = params.net.head(hidden)
    bins = cfg.n_bins
    log_mag = out[..., :bins].clamp(max=LOG_MAG_MAX)
    step = torch.complex(out[..., bins:2 * bins], out[..., 2 * bins:])
    # zero increments stay zero, so an all-zero head yields silence
    step = step / torch.sqrt(step.abs() ** 2 + 1e-6)
    phasor = torch.cumprod(step * _bin_advance(bins, cfg.head_window, cfg.head_hop), dim=-2)
    wave = dsp.torch_istft(torch.exp(log_mag) * phasor, cfg.head_window, cfg.head_hop)
    return wave[:, offset:offset + steps * cfg.downsample]


def generator_loss(params, audio, straight_through=True, return_state=False):
    """Weighted commitment + mel + auxiliary SSL reconstruction loss for a batch.

    With ``straight_through=False`` the decoder sees the quantized vectors as
    constants, which makes the loss an ordinary piecewise-smooth function of
    the parameters (used by gradient checks).
    """
    cfg = params.config
    x = pad_to_frames(_batch(audio), cfg.downsample)
    z_a, z_s, ssl = encode_latents(params, x)
    q_a, res_a = _quantize(params.acoustic, z_a)
    q_s, res_s = _quantize(params.semantic, z_s)
    commit = ((z_a - q_a) ** 2).mean() + ((z_s - q_s) ** 2).mean()
    if straight_through:
        d_a, d_s = z_a + (q_a - z_a).detach(), z_s + (q_s - z_s).detach()
    else:
        d_a, d_s = q_a, q_s
    recon = synthesize(params, d_a, d_s)
    target = torch.from_numpy(x)
    mel = dsp.torch_mel_loss(recon, target, sample_rate=cfg.sample_rate)
    aux = ((params.net.semantic_decoder(d_s) - ssl) ** 2).mean()
    zero = torch.zeros(())
    adv, fm = zero, zero
    total = (cfg.lambda_commit * commit + cfg.lambda_mel * mel + cfg.lambda_aux * aux
             + cfg.lambda_adv * adv + cfg.lambda_fm * fm)
    report = LossReport(*(t.item() for t in (total, commit, mel, aux, adv, fm)), total)
    for name in ("commit", "mel", "aux"):
        if not math.isfinite(getattr(report, name)):
            raise TrainingFault(f"non-finite {name} loss", path=name)
    if return_state:
        return report, (res_a, res_s)
    return report


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def encode(params, audio):
    """Waveform -> acoustic and semantic (T, 4) index grids at 25 Hz."""
    x = as_samples(audio)
    if x.shape[0] == 0:
        raise ValueError("cannot encode empty audio")
    with torch.no_grad():
        z_a, z_s, _ = encode_latents(params, x[None])
    rate = params.config.frame_rate
    acoustic = rvq_encode(params.acoustic, z_a[0].numpy()).indices
    semantic = rvq_encode(params.semantic, z_s[0].numpy()).indices
    return DualTokens(TokenGrid(acoustic, rate, "acoustic"), TokenGrid(semantic, rate, "semantic"))


def decode(params, tokens):
    if tokens.acoustic.steps != tokens.semantic.steps:
        raise ValueError("frame-count mismatch between streams")
    q_a = torch.from_numpy(rvq_decode(params.acoustic, tokens.acoustic.rows))[None]
    q_s = torch.from_numpy(rvq_decode(params.semantic, tokens.semantic.rows))[None]
    with torch.no_grad():
        wave = synthesize(params, q_a, q_s)[0].numpy()
    return AudioBuffer(wave, params.config.sample_rate)


def semantic_reconstruct(params, semantic):
    """Semantic tokens -> reconstructed pseudo-SSL features, (T, ssl_dim)."""
    rows = semantic.rows if isinstance(semantic, TokenGrid) else semantic
    q = torch.from_numpy(rvq_decode(params.semantic, rows))
    with torch.no_grad():
        return params.net.semantic_decoder(q).numpy()


def init_codebooks(params, audio, seed=0):
    """k-means++ seeding of both stacks from one batch of encoder outputs."""
    cfg = params.config
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        z_a, z_s, _ = encode_latents(params, pad_to_frames(_batch(audio), cfg.downsample))
    params.acoustic = init_stack(z_a.reshape(-1, cfg.dim).numpy(), cfg.n_layers, cfg.codebook_size, rng)
    params.semantic = init_stack(z_s.reshape(-1, cfg.dim).numpy(), cfg.n_layers, cfg.codebook_size, rng)
    return params


def cosine_lr(step, total, peak, floor=0.0):
    if total <= 0:
        return peak
    progress = min(step, total) / total
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class CodecTrainer:
    """AdamW on the dense parameters, EMA on the codebooks, cosine learning rate."""

    def __init__(self, params, clips, total_steps, batch_size=4, lr=3e-3, weight_decay=0.0, seed=0):
        self.params = params
        self.clips = np.stack([pad_to_frames(as_samples(c), params.config.downsample) for c in clips])
        if len(self.clips) == 0:
            raise ValueError("empty training corpus")
        self.total_steps = total_steps
        self.batch_size = min(batch_size, len(self.clips))
        self.lr = lr
        self.rng = np.random.default_rng(seed)
        self.optimizer = torch.optim.AdamW(params.net.parameters(), lr=lr, weight_decay=weight_decay)
        self.step = 0
        if params.acoustic is None:
            init_codebooks(params, self.clips[self.rng.choice(len(self.clips), self.batch_size, replace=False)],
                           seed=int(self.rng.integers(2 ** 31)))

    def train_step(self):
        idx = self.rng.choice(len(self.clips), self.batch_size, replace=False)
        for group in self.optimizer.param_groups:
            group["lr"] = cosine_lr(self.step, self.total_steps, self.lr, 0.05 * self.lr)
        self.optimizer.zero_grad()
        report, (res_a, res_s) = generator_loss(self.params, self.clips[idx], return_state=True)
        report.graph.backward()
        for name, p in self.params.net.named_parameters():
            if not torch.all(torch.isfinite(p.grad)):
                raise TrainingFault(f"non-finite gradient at step {self.step}", self.step, name)
        self.optimizer.step()
        cfg = self.params.config
        seed = int(self.rng.integers(2 ** 31))
        self.params.acoustic = codebook_update(self.params.acoustic, res_a, cfg.ema_decay, cfg.dead_threshold, seed)
        self.params.semantic = codebook_update(self.params.semantic, res_s, cfg.ema_decay, cfg.dead_threshold, seed + 1)
        self.step += 1
        report.graph = None
        return report


class HCodec(TransformerMixin, BaseEstimator):
    """Estimator front-end: ``fit`` trains on clips, ``transform`` tokenizes,
    ``inverse_transform`` decodes tokens back to audio."""

    def __init__(self, preset="toy", steps=2000, batch_size=4, lr=3e-3, weight_decay=0.0, random_state=0,
                 config=None):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.config = config

    def _config(self):
        return self.config if self.config is not None else CodecConfig.preset(self.preset)

    def fit(self, X, y=None, callback=None):
        self.params_ = CodecParams.create(self._config(), seed=self.random_state)
        self.trainer_ = CodecTrainer(self.params_, X, self.steps, self.batch_size, self.lr, self.weight_decay,
                                     self.random_state)
        self.history_ = []
        self.train(self.steps, callback)
        return self

    def train(self, n_steps, callback=None):
        for _ in range(n_steps):
            report = self.trainer_.train_step()
            self.history_.append(report.as_dict())
            if callback is not None:
                callback(self.trainer_.step, report)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        if isinstance(X, AudioBuffer) or (not isinstance(X, (list, tuple)) and np.ndim(X) == 1):
            return encode(self.params_, X)
        return [encode(self.params_, x) for x in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "params_")
        if isinstance(X, DualTokens):
            return decode(self.params_, X)
        return [decode(self.params_, t) for t in X]

    def reconstruct(self, audio):
        return self.inverse_transform(self.transform(audio))

    @classmethod
    def from_params(cls, params, **kwargs):
        est = cls(config=params.config, **kwargs)
        est.params_ = params
        return est
