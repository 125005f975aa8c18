"""Seeded degradation chain and per-mode training-pair construction.

Distortions run in a fixed order (noise, reverberation, clipping, band limit,
packet loss, interfering speaker), each drawn independently with its own
occurrence probability. Every draw is recorded in ``SimPair.applied`` so a pair
can be rebuilt from its record alone with :func:`replay_chain`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, AudioBuffer, as_samples
from .errors import ConfigurationError, DegenerateInputError
from .seqgrammar import Mode

DISTORTIONS = ("noise", "reverb", "clip", "bandlimit", "packet_loss", "interferer")
FIR_TAPS = 255
VC_SHIFT_RATIOS = (0.85, 0.9, 1.1, 1.15)


@dataclass(frozen=True)
class DistortionConfig:
    p_noise: float = 0.5
    snr_db: tuple = (-15.0, 20.0)
    p_reverb: float = 0.4
    p_clip: float = 0.3
    clip_min_q: tuple = (0.0, 0.1)
    clip_max_q: tuple = (0.9, 1.0)
    p_bandlimit: float = 0.3
    cutoffs_hz: tuple = (2000.0, 4000.0)
    p_packet_loss: float = 0.3
    loss_rate: tuple = (0.05, 0.25)
    packet_ms: float = 20.0
    p_interferer: float = 0.2
    sir_db: tuple = (15.0, 25.0)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        for name in DISTORTIONS:
            p = self.probability(name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"p_{name} = {p} outside [0, 1]")
        for name in ("snr_db", "clip_min_q", "clip_max_q", "loss_rate", "sir_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if any(c >= self.sample_rate / 2 for c in self.cutoffs_hz):
            raise ConfigurationError("every cutoff must lie below Nyquist")

    def probability(self, name):
        return getattr(self, f"p_{name}")


@dataclass(frozen=True)
class ModeProfile:
    mode: Mode
    config: DistortionConfig


def _silent():
    return dict(p_noise=0.0, p_reverb=0.0, p_clip=0.0, p_bandlimit=0.0, p_packet_loss=0.0, p_interferer=0.0)


def mode_profile(mode, base=None):
    """The distortion profile each operational mode trains with."""
    mode = Mode.parse(mode)
    base = base or DistortionConfig()
    if mode in (Mode.TSE, Mode.RTSE):
        cfg = dataclasses.replace(base, p_interferer=1.0, sir_db=(-5.0, 5.0))
    elif mode is Mode.LASS:
        cfg = dataclasses.replace(base, **_silent(), sir_db=(-5.0, 20.0))
    elif mode is Mode.VC:
        cfg = dataclasses.replace(base, **_silent())
    else:
        cfg = base
    return ModeProfile(mode, cfg)


# ---------------------------------------------------------------------------
# individual distortions
# ---------------------------------------------------------------------------

def _power(x):
    return float(np.mean(x ** 2))


def interferer_gain(target, interferer, ratio_db):
    """Amplitude gain putting ``interferer`` ``ratio_db`` below ``target`` in power."""
    t, i = as_samples(target), as_samples(interferer)
    if _power(t) == 0.0 or _power(i) == 0.0:
        raise DegenerateInputError("cannot mix at a ratio with a silent signal")
    return float(np.sqrt(_power(t) / (_power(i) * 10.0 ** (ratio_db / 10.0))))


def fit_length(x, n):
    """Loop or truncate ``x`` to exactly ``n`` samples."""
    return np.resize(np.asarray(x, dtype=np.float64), n)


def mix_at_ratio(target, interferer, ratio_db):
    t = as_samples(target)
    i = fit_length(as_samples(interferer), t.shape[0])
    out = t + interferer_gain(t, i, ratio_db) * i
    return AudioBuffer(out, getattr(target, "sample_rate", SAMPLE_RATE))


def clip_by_quantile(audio, min_q, max_q):
    if not 0.0 <= min_q < max_q <= 1.0:
        raise ValueError(f"quantiles must satisfy 0 <= min_q < max_q <= 1, got ({min_q}, {max_q})")
    x = as_samples(audio)
    lo, hi = np.quantile(x, [min_q, max_q])
    return AudioBuffer(np.clip(x, lo, hi), getattr(audio, "sample_rate", SAMPLE_RATE))


def lowpass_taps(cutoff, sample_rate=SAMPLE_RATE, taps=FIR_TAPS):
    """Hamming-windowed sinc low-pass with unit DC gain."""
    n = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(2.0 * cutoff / sample_rate * n) * np.hamming(taps)
    return h / h.sum()


def bandlimit(audio, cutoff, allowed=DistortionConfig.cutoffs_hz):
    if float(cutoff) not in {float(c) for c in allowed}:
        raise ValueError(f"cutoff {cutoff} Hz not in the configured set {allowed}")
    x = as_samples(audio)
    sr = getattr(audio, "sample_rate", SAMPLE_RATE)
    # odd-length symmetric filter + mode="same" keeps the output time-aligned
    y = np.convolve(x, lowpass_taps(cutoff, sr), mode="same")
    return AudioBuffer(y, sr)


def packet_loss(audio, loss_rate, frame_ms=20.0, seed=None):
    """Zero whole frames independently with probability ``loss_rate``."""
    if not 0.0 <= loss_rate <= 1.0:
        raise ValueError(f"loss_rate {loss_rate} outside [0, 1]")
    x = as_samples(audio).copy()
    sr = getattr(audio, "sample_rate", SAMPLE_RATE)
    frame = max(1, int(round(frame_ms * sr / 1000.0)))
    n_frames = -(-x.shape[0] // frame)
    lost = np.random.default_rng(seed).random(n_frames) < loss_rate
    for f in np.flatnonzero(lost):
        x[f * frame:(f + 1) * frame] = 0.0
    return AudioBuffer(x, sr)


def reverberate(audio, rir):
    """Convolve with ``rir``, keep the input length, match the input peak."""
    x = as_samples(audio)
    h = as_samples(rir)
    if h.shape[0] == 0:
        raise ValueError("empty impulse response")
    y = fftconvolve(x, h)[:x.shape[0]]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return AudioBuffer(y, getattr(audio, "sample_rate", SAMPLE_RATE))


def pitch_shift(audio, ratio):
    """Resampling-based pitch/formant shift, cropped or looped to the input length."""
    x = as_samples(audio)
    n = x.shape[0]
    positions = np.arange(n) * ratio
    src = np.arange(n)
    y = np.interp(positions % n, src, x)
    return AudioBuffer(y, getattr(audio, "sample_rate", SAMPLE_RATE))


# ---------------------------------------------------------------------------
# pools and the chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Clip:
    id: str
    audio: AudioBuffer
    speaker: str = None
    caption: str = None


@dataclass
class Pools:
    clean: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    rir: list = field(default_factory=list)
    interferer: list = field(default_factory=list)
    captioned: list = field(default_factory=list)

    def lookup(self, clip_id):
        for role in ("clean", "noise", "rir", "interferer", "captioned"):
            for clip in getattr(self, role):
                if clip.id == clip_id:
                    return clip
        raise KeyError(clip_id)


@dataclass
class SimPair:
    input: AudioBuffer
    target: AudioBuffer
    applied: list
    seed: int
    mode: Mode = Mode.SR
    reference: AudioBuffer = None
    caption: str = None
    sources: dict = field(default_factory=dict)


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def _pick(rng, pool, name):
    if not pool:
        raise ValueError(f"the {name} pool is empty but a {name} distortion was drawn")
    return pool[int(rng.integers(len(pool)))]


def draw_chain(config, pools, rng, exclude_speaker=None):
    """Draw which distortions fire and their parameters; touches no audio."""
    applied = []
    for name in DISTORTIONS:
        # one uniform per distortion keeps occurrences independent of earlier draws
        if rng.random() >= config.probability(name):
            continue
        if name == "noise":
            params = {"clip": _pick(rng, pools.noise, "noise").id, "snr_db": _uniform(rng, config.snr_db)}
        elif name == "reverb":
            params = {"clip": _pick(rng, pools.rir, "rir").id}
        elif name == "clip":
            params = {"min_q": _uniform(rng, config.clip_min_q), "max_q": _uniform(rng, config.clip_max_q)}
        elif name == "bandlimit":
            params = {"cutoff_hz": float(config.cutoffs_hz[int(rng.integers(len(config.cutoffs_hz)))])}
        elif name == "packet_loss":
            params = {"loss_rate": _uniform(rng, config.loss_rate), "frame_ms": config.packet_ms,
                      "seed": int(rng.integers(2 ** 31))}
        else:
            candidates = [c for c in pools.interferer if c.speaker is None or c.speaker != exclude_speaker]
            params = {"clip": _pick(rng, candidates, "interferer").id, "sir_db": _uniform(rng, config.sir_db)}
        applied.append((name, params))
    return applied


def replay_chain(target, pools, applied, config=None):
    """Rebuild the degraded signal from a record of draws."""
    config = config or DistortionConfig()
    x = AudioBuffer(as_samples(target).copy(), getattr(target, "sample_rate", SAMPLE_RATE))
    for name, params in applied:
        if name == "noise":
            x = mix_at_ratio(x, pools.lookup(params["clip"]).audio, params["snr_db"])
        elif name == "reverb":
            x = reverberate(x, pools.lookup(params["clip"]).audio)
        elif name == "clip":
            x = clip_by_quantile(x, params["min_q"], params["max_q"])
        elif name == "bandlimit":
            x = bandlimit(x, params["cutoff_hz"], config.cutoffs_hz)
        elif name == "packet_loss":
            x = packet_loss(x, params["loss_rate"], params["frame_ms"], params["seed"])
        elif name == "interferer":
            x = mix_at_ratio(x, pools.lookup(params["clip"]).audio, params["sir_db"])
        else:
            raise ValueError(f"unknown distortion {name!r}")
    return x


def apply_chain(target, pools, profile, seed, exclude_speaker=None):
    rng = np.random.default_rng(seed)
    applied = draw_chain(profile.config, pools, rng, exclude_speaker)
    degraded = replay_chain(target, pools, applied, profile.config)
    return SimPair(degraded, target, applied, seed, profile.mode)


def make_mode_pair(mode, pools, seed, base=None):
    """Build one (input, target) pair for ``mode`` with its auxiliary conditions."""
    mode = Mode.parse(mode)
    profile = mode_profile(mode, base)
    rng = np.random.default_rng(seed)
    sub_seed = int(rng.integers(2 ** 31))

    if mode is Mode.LASS:
        if len(pools.captioned) < 2:
            raise ValueError("LASS needs at least two captioned clips")
        i, j = rng.choice(len(pools.captioned), size=2, replace=False)
        target, other = pools.captioned[int(i)], pools.captioned[int(j)]
        if not target.caption:
            raise ValueError(f"captioned clip {target.id} has no caption")
        sir = _uniform(rng, profile.config.sir_db)
        mixture = mix_at_ratio(target.audio, other.audio, sir)
        applied = [("mix", {"clip": other.id, "sir_db": sir})]
        return SimPair(mixture, target.audio, applied, seed, mode, caption=target.caption,
                       sources={"target": target.id, "other": other.id})

    clean = _pick(rng, pools.clean, "clean")
    if mode is Mode.SR:
        pair = apply_chain(clean.audio, pools, profile, sub_seed)
        pair.seed, pair.sources = seed, {"target": clean.id}
        return pair

    reference = _reference_for(rng, pools, clean)
    if mode is Mode.VC:
        ratio = float(VC_SHIFT_RATIOS[int(rng.integers(len(VC_SHIFT_RATIOS)))])
        perturbed = pitch_shift(clean.audio, ratio)
        return SimPair(perturbed, clean.audio, [("pitch_shift", {"ratio": ratio})], seed, mode,
                       reference=reference.audio, sources={"target": clean.id, "reference": reference.id})

    pair = apply_chain(clean.audio, pools, profile, sub_seed, exclude_speaker=clean.speaker)
    pair.seed, pair.reference = seed, reference.audio
    pair.sources = {"main": clean.id, "target": clean.id, "reference": reference.id}
    if mode is Mode.RTSE:
        # the non-matching speaker is the target; reference still names the main one
        interferer = next(p["clip"] for n, p in pair.applied if n == "interferer")
        pair.target = AudioBuffer(fit_length(pools.lookup(interferer).audio.samples, len(clean.audio)))
        pair.sources["target"] = interferer
    return pair


def _reference_for(rng, pools, clip):
    same = [c for c in pools.clean if c.speaker == clip.speaker and c.id != clip.id]
    return same[int(rng.integers(len(same)))] if same else clip


def replay_pair(record, pools):
    """Rebuild a pair's input from its provenance record (mode, sources, applied)."""
    mode = Mode.parse(record["mode"])
    target = pools.lookup(record["sources"]["target"]).audio
    if mode is Mode.LASS:
        (_, params), = record["applied"]
        return mix_at_ratio(target, pools.lookup(params["clip"]).audio, params["sir_db"])
    if mode is Mode.VC:
        (_, params), = record["applied"]
        return pitch_shift(target, params["ratio"])
    base = pools.lookup(record["sources"].get("main", record["sources"]["target"])).audio
    return replay_chain(base, pools, record["applied"], mode_profile(mode).config)


def provenance(pair):
    """JSON-serialisable description of a pair sufficient for :func:`replay_pair`."""
    return {"mode": pair.mode.value, "seed": int(pair.seed), "sources": dict(pair.sources),
            "applied": [[name, params] for name, params in pair.applied],
            "caption": pair.caption}


# ---------------------------------------------------------------------------
# synthetic pools
# ---------------------------------------------------------------------------

_EVENTS = {
    "tone": "a steady high pitched tone",
    "chirp": "a rising chirp sweep",
    "beeps": "short repeated electronic beeps",
    "hum": "a low droning hum",
    "rattle": "a noisy metallic rattle",
    "bell": "a ringing bell slowly fading away",
}


def _speaker_params(rng):
    return {"f0": float(rng.uniform(90, 260)), "tilt": float(rng.uniform(0.5, 1.5)),
            "formants": rng.uniform(300, 3000, size=3)}


def synth_speech(speaker, duration, rng, sample_rate=SAMPLE_RATE):
    """Harmonic 'speech': a speaker's f0 and formant profile, syllable-like envelope."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    contour = speaker["f0"] * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.28)))
    phase = 2 * np.pi * np.cumsum(contour) / sample_rate
    x = np.zeros(n)
    for h in range(1, 30):
        freq = h * speaker["f0"]
        if freq > sample_rate / 2 - 500:
            break
        gain = sum(np.exp(-((freq - f) / 250.0) ** 2) for f in speaker["formants"]) + 0.05
        x += gain / h ** speaker["tilt"] * np.sin(h * phase)
    rate = rng.uniform(3.0, 5.0)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.28))
    x *= envelope
    return AudioBuffer(0.3 * x / (np.max(np.abs(x)) + 1e-12), sample_rate)


def synth_event(kind, duration, rng, sample_rate=SAMPLE_RATE):
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    if kind == "tone":
        x = np.sin(2 * np.pi * rng.uniform(1500, 2500) * t)
    elif kind == "chirp":
        f = np.linspace(rng.uniform(200, 400), rng.uniform(2000, 3500), n)
        x = np.sin(2 * np.pi * np.cumsum(f) / sample_rate)
    elif kind == "beeps":
        x = np.sin(2 * np.pi * 1000 * t) * (np.sin(2 * np.pi * rng.uniform(4, 8) * t) > 0.3)
    elif kind == "hum":
        f0 = rng.uniform(50, 120)
        x = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 6))
    elif kind == "rattle":
        x = rng.standard_normal(n) * (0.5 + 0.5 * np.sign(np.sin(2 * np.pi * rng.uniform(10, 20) * t)))
    else:
        x = np.sin(2 * np.pi * rng.uniform(600, 900) * t) * np.exp(-3.0 * t)
    return AudioBuffer(0.3 * x / (np.max(np.abs(x)) + 1e-12), sample_rate)


def colored_noise(duration, rng, sample_rate=SAMPLE_RATE):
    """Gaussian noise with a random 1/f^alpha spectral tilt."""
    n = int(round(duration * sample_rate))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    alpha = rng.uniform(0.0, 1.5)
    spectrum /= np.maximum(freqs, 20.0) ** (alpha / 2.0)
    x = np.fft.irfft(spectrum, n)
    return AudioBuffer(0.3 * x / (np.max(np.abs(x)) + 1e-12), sample_rate)


def synthetic_rir(rng, sample_rate=SAMPLE_RATE):
    """Exponentially decaying white sequence with RT60 drawn from [0.2, 0.8] s."""
    rt60 = rng.uniform(0.2, 0.8)
    n = int(rt60 * sample_rate)
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60)
    h[0] = 1.0
    return AudioBuffer(h / np.max(np.abs(h)), sample_rate)


def synthetic_pools(seed=0, duration=1.0, n_speakers=4, clips_per_speaker=2, n_interferers=3,
                    n_noise=3, n_rir=3, sample_rate=SAMPLE_RATE):
    """Dataset-free pools: harmonic speakers, disjoint interferers, noise, RIRs, captioned events."""
    rng = np.random.default_rng(seed)
    pools = Pools()
    for s in range(n_speakers):
        spk = _speaker_params(rng)
        for c in range(clips_per_speaker):
            pools.clean.append(Clip(f"spk{s}_{c}", synth_speech(spk, duration, rng, sample_rate), f"spk{s}"))
    for s in range(n_interferers):
        spk = _speaker_params(rng)
        pools.interferer.append(Clip(f"int{s}", synth_speech(spk, duration, rng, sample_rate), f"int{s}"))
    for i in range(n_noise):
        pools.noise.append(Clip(f"noise{i}", colored_noise(duration, rng, sample_rate)))
    for i in range(n_rir):
        pools.rir.append(Clip(f"rir{i}", synthetic_rir(rng, sample_rate)))
    for kind, caption in _EVENTS.items():
        pools.captioned.append(Clip(f"evt_{kind}", synth_event(kind, duration, rng, sample_rate), caption=caption))
    return pools
