"""Task-level orchestration: per-mode inference, two-pass separation, LM
training over simulated pairs, and metric tables."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec as codec_mod
from . import dsp
from . import lm as lm_mod
from . import simulate
from .dsp import AudioBuffer, as_samples
from .errors import TrainingFault
from .seqgrammar import MODES, Mode, TokenGrid, apply_delay, deinterleave, interleave


@dataclass(frozen=True)
class TaskRequest:
    mode: Mode
    audio: AudioBuffer
    reference: AudioBuffer = None
    caption: str = None
    sampling: lm_mod.SamplingSpec = lm_mod.SamplingSpec()
    seed: int = 0
    max_steps: int = None  # delayed decoding steps; default scales with the input

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))


@dataclass
class TaskResult:
    tracks: list
    grids: list
    timings: dict = field(default_factory=dict)
    truncated: bool = False
    stages: list = field(default_factory=list)  # per-pass mode and conditioning layout
    partial: bool = False


def default_max_steps(n_samples, downsample=640):
    """Room for twice the input length in interleaved rows."""
    return 4 * codec_mod.n_frames(n_samples, downsample) + 8


def _tokens_to_audio(codec_params, grid):
    cfg = codec_params.config
    rows = grid.rows[: grid.steps - grid.steps % 2]
    if rows.shape[0] == 0:
        return AudioBuffer(np.zeros(0), cfg.sample_rate)
    acoustic, semantic = deinterleave(TokenGrid(rows, grid.rate, "interleaved"))
    return codec_mod.decode(codec_params, codec_mod.DualTokens(acoustic, semantic))


def run_task(codec_params, model, request):
    """Condition, generate and decode one request."""
    timings = {}
    t0 = time.perf_counter()
    cfg = model.config
    feats = lm_mod.extract_conditions(request.mode, request.audio, request.reference, request.caption,
                                      cfg.ssl_dim, cfg.text_rows)
    prefix = lm_mod.embed_conditions(model, feats).detach()
    layout = lm_mod.conditioning_of(model, feats).describe(cfg.vocab)
    timings["condition"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    max_steps = request.max_steps or default_max_steps(len(as_samples(request.audio)))
    sampling = replace(request.sampling, seed=request.seed)
    gen = lm_mod.generate(model, prefix, max_steps, sampling, rate=2 * codec_params.config.frame_rate)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    audio = _tokens_to_audio(codec_params, gen.grid)
    timings["decode"] = time.perf_counter() - t0
    stage = {"mode": request.mode.value, "conditioning": layout,
             "reference": request.reference}
    return TaskResult([audio], [gen.grid], timings, gen.truncated, [stage])


def _fit(audio, n):
    x = as_samples(audio)[:n]
    return AudioBuffer(np.pad(x, (0, n - len(x))))


def run_ss(codec_params, model, mixture, sampling=lm_mod.SamplingSpec(), seed=0, max_steps=None):
    """Two passes: SR on the mixture gives track A, then rTSE with A as the
    reference gives track B. Both tracks are cut or padded to the mixture length."""
    n = len(as_samples(mixture))
    first = run_task(codec_params, model, TaskRequest(Mode.SR, mixture, sampling=sampling, seed=seed,
                                                      max_steps=max_steps))
    track_a = _fit(first.tracks[0], n)
    if first.truncated:
        return TaskResult([track_a], first.grids, dict(first.timings), True, first.stages, partial=True)
    second = run_task(codec_params, model, TaskRequest(Mode.RTSE, mixture, reference=track_a, sampling=sampling,
                                                       seed=seed, max_steps=max_steps))
    timings = {f"pass1_{k}": v for k, v in first.timings.items()}
    timings.update({f"pass2_{k}": v for k, v in second.timings.items()})
    return TaskResult([track_a, _fit(second.tracks[0], n)], first.grids + second.grids, timings,
                      second.truncated, first.stages + second.stages)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def target_grid(codec_params, audio):
    tokens = codec_mod.encode(codec_params, audio)
    return interleave(tokens.acoustic, tokens.semantic)


def pair_example(codec_params, model, pair):
    """Simulated pair -> LM example (conditioning features plus delayed targets)."""
    cfg = model.config
    feats = lm_mod.extract_conditions(pair.mode, pair.input, pair.reference, pair.caption, cfg.ssl_dim,
                                      cfg.text_rows)
    delayed = apply_delay(target_grid(codec_params, pair.target), cfg.vocab.pad)
    return lm_mod.make_example(feats, delayed, cfg.vocab)


def parse_mode_set(modes):
    if isinstance(modes, (str, Mode)):
        modes = [modes]
    if modes is None or list(modes) == ["omni"]:
        return MODES
    out = tuple(dict.fromkeys(Mode.parse(m) for m in modes))
    if not out:
        raise ValueError("empty mode set")
    return out


def draw_modes(rng, mode_set, n):
    """Uniform per-batch mode choice."""
    return [mode_set[int(i)] for i in rng.integers(len(mode_set), size=n)]


def train_driver(codec_params, trainer, pools, steps, mode_set="omni", batch_size=None, callback=None):
    """Run ``steps`` LM updates on freshly simulated pairs.

    Each batch draws one mode uniformly from ``mode_set`` and simulates its pairs
    with seeds taken from the trainer's generator, so the trainer state alone
    determines the continuation. The codec is only read. Returns the loss log.
    """
    if not pools.clean:
        raise ValueError("empty training corpus")
    modes = parse_mode_set(mode_set)
    batch_size = batch_size or trainer.batch_size
    log = []
    for _ in range(steps):
        mode = modes[int(trainer.rng.integers(len(modes)))]
        seeds = trainer.rng.integers(2 ** 31, size=batch_size)
        batch = [pair_example(codec_params, trainer.model, simulate.make_mode_pair(mode, pools, int(s)))
                 for s in seeds]
        try:
            report = trainer.train_step(batch)
        except TrainingFault as err:
            err.step = trainer.step
            raise
        record = {"step": trainer.step, "mode": mode.value, "loss": report.loss, "accuracy": report.accuracy,
                  "lr": report.lr}
        log.append(record)
        if callback is not None:
            callback(record)
    return log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

METRICS = ("stft_loss", "mel_loss", "snr_db")


@dataclass
class MetricTable:
    rows: list
    summary: dict

    def to_jsonl(self):
        lines = [json.dumps(r, sort_keys=True) for r in self.rows]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"


def evaluate(pairs):
    """Per-pair STFT/mel L1 distances and SNR, plus their means."""
    rows = []
    for i, (reference, estimate) in enumerate(pairs):
        n = min(len(as_samples(reference)), len(as_samples(estimate)))
        ref, est = as_samples(reference)[:n], as_samples(estimate)[:n]
        rows.append({"index": i, "stft_loss": dsp.stft_loss(ref, est), "mel_loss": dsp.mel_loss(ref, est),
                     "snr_db": dsp.snr_db(ref, est)})
    summary = {"count": len(rows)}
    for name in METRICS:
        summary[name] = float(np.mean([r[name] for r in rows])) if rows else float("nan")
    return MetricTable(rows, summary)
