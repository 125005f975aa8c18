"""Cached trained models shared by the pipeline and acceptance tests.

Training the toy codec takes a couple of minutes, so it happens once per test
session and every consumer reuses the same parameters.
"""

import time
from functools import lru_cache

import numpy as np

from unitok import codec, lm, pipeline
from unitok import seqgrammar as sg
from unitok import simulate as sim

CODEC_STEPS = 2000


def codec_pools():
    return sim.synthetic_pools(0, duration=1.0, n_speakers=12, clips_per_speaker=2)


def codec_corpus(pools=None):
    pools = pools or codec_pools()
    clips = [c.audio for c in pools.clean + pools.captioned + pools.interferer[:2]]
    assert len(clips) == 32
    return clips


def corpus_mel(params, clips, chunk=8):
    return float(np.mean([codec.generator_loss(params, clips[i:i + chunk]).mel
                          for i in range(0, len(clips), chunk)]))


@lru_cache(maxsize=None)
def trained_codec():
    """(params, mel at step 0, mel after CODEC_STEPS, training seconds) on the 32-clip corpus."""
    start = time.perf_counter()
    clips = codec_corpus()
    params = codec.CodecParams.create(codec.CodecConfig(), seed=0)
    trainer = codec.CodecTrainer(params, clips, CODEC_STEPS, batch_size=4, lr=3e-3, seed=0)
    initial = corpus_mel(params, clips)
    for _ in range(CODEC_STEPS):
        trainer.train_step()
    return params, initial, corpus_mel(params, clips), time.perf_counter() - start


def tone(seconds=1.0, freq=440.0):
    t = np.arange(int(seconds * 16000)) / 16000
    return sim.AudioBuffer(0.3 * np.sin(2 * np.pi * freq * t))


def degrade(clean, pools):
    chain = [("noise", {"clip": pools.noise[0].id, "snr_db": 0.0}),
             ("clip", {"min_q": 0.1, "max_q": 0.9})]
    return sim.replay_chain(clean, pools, chain)


def example(params, model_cfg, mode, target, audio, reference=None):
    feats = lm.extract_conditions(mode, audio, reference, ssl_dim=model_cfg.ssl_dim)
    delayed = sg.apply_delay(pipeline.target_grid(params, target), model_cfg.vocab.pad)
    return lm.make_example(feats, delayed, model_cfg.vocab)


@lru_cache(maxsize=None)
def memorized_system():
    """Trained codec plus an LM that has memorized three requests:
    SR on a degraded tone, SR on a two-speaker mixture (louder speaker out) and
    rTSE on the same mixture with the SR output as reference (quieter speaker out)."""
    params = trained_codec()[0]
    pools = codec_pools()
    cfg = lm.LMConfig(codebook_size=params.config.codebook_size, ssl_dim=params.config.ssl_dim)
    clean = tone()
    degraded = degrade(clean, pools)
    loud, quiet = pools.clean[0].audio, pools.clean[2].audio
    mixture = sim.mix_at_ratio(loud, quiet, 6.0)
    n = len(mixture)
    track_a = pipeline._fit(pipeline._tokens_to_audio(params, pipeline.target_grid(params, loud)), n)
    examples = [example(params, cfg, "sr", clean, degraded),
                example(params, cfg, "sr", loud, mixture),
                example(params, cfg, "rtse", quiet, mixture, track_a)]
    est = lm.UniTokLM(steps=1500, batch_size=3, peak_lr=3e-3, warmup=20, random_state=0)
    est.fit(examples, until_accuracy=0.999)
    signals = {"tone": clean, "degraded": degraded, "mixture": mixture, "loud": loud, "quiet": quiet}
    return params, est.model_, examples, signals
