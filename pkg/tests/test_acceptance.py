"""Acceptance suite: one check per criterion, each printing a single PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly
(``python tests/test_acceptance.py``) for just the summary lines.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

import gradcheck as gc  # noqa: E402
import systems  # noqa: E402
from unitok import cli, codec, dsp, formats, lm, pipeline  # noqa: E402
from unitok import quantize as q  # noqa: E402
from unitok import seqgrammar as sg  # noqa: E402
from unitok import simulate as sim  # noqa: E402
from unitok.errors import TemplateError  # noqa: E402

VOCAB = lm.LMConfig().vocab  # toy layout: 64 codec ids


def check_rates():
    rng = np.random.default_rng(0)
    lengths = rng.integers(1, 10 * 16000, 100)
    bad = []
    for n in lengths:
        frames = codec.n_frames(int(n))
        grid = sg.interleave(sg.TokenGrid(np.zeros((frames, 4), int), 25, "acoustic"),
                             sg.TokenGrid(np.zeros((frames, 4), int), 25, "semantic"))
        if frames != -(-int(n) // 640) or grid.rate != 50 or grid.steps != 2 * frames:
            bad.append(int(n))
    whole = all(codec.n_frames(16000 * s) == 25 * s for s in range(1, 11))
    return not bad and whole, f"100 lengths, {len(bad)} violations; 25 frames/s and 50 rows/s"


def check_delay_algebra():
    rng = np.random.default_rng(1)
    failures = 0
    for _ in range(10_000):
        steps = int(rng.integers(1, 12))
        g = sg.TokenGrid(rng.integers(0, 64, (2 * steps, 4)), 50, "interleaved")
        a, s = sg.deinterleave(g)
        if sg.remove_delay(sg.apply_delay(g, VOCAB.pad), VOCAB.pad) != g or sg.interleave(a, s) != g:
            failures += 1
    p = VOCAB.pad
    single = sg.apply_delay(sg.TokenGrid(np.array([[10, 11, 12, 13]]), 50, "interleaved"), p).rows
    layout = np.array_equal(single, [[10, p, p, p], [p, 11, p, p], [p, p, 12, p], [p, p, p, 13]])
    return failures == 0 and layout, f"10^4 grids, {failures} round-trip failures; single-row layout ok={layout}"


def _greedy_oracle(entries, frame):
    residual = frame.copy()
    out = []
    for e in entries:
        k = int(np.argmin(np.sum((e - residual) ** 2, axis=1)))
        out.append(k)
        residual = residual - e[k]
    return out


def check_rvq():
    from test_quantize import exhaustive_greedy

    rng = np.random.default_rng(2)
    stack = q.random_stack(64, 64, n_layers=4, rng=rng)
    frames = rng.standard_normal((1000, 64))
    idx = q.rvq_encode(stack, frames).indices
    entries = [cb.entries for cb in stack.codebooks]
    mismatched = sum(list(idx[f]) != _greedy_oracle(entries, frames[f]) for f in range(1000))
    exhaustive_bad = 0
    for size, layers in [(2, 1), (4, 2), (8, 2), (8, 3)]:
        small = q.random_stack(3, size, n_layers=layers, rng=rng)
        x = rng.standard_normal((25, 3))
        got = q.rvq_encode(small, x).indices
        exhaustive_bad += sum(list(got[f]) != exhaustive_greedy([cb.entries for cb in small.codebooks], x[f])
                              for f in range(25))
    return mismatched == 0 and exhaustive_bad == 0, \
        f"1000 toy frames, {mismatched} mismatches; exhaustive small stacks, {exhaustive_bad} mismatches"


TEMPLATES = {
    "sr": ["T_SR", "I", "audio(5)", "S"],
    "tse": ["T_TSE", "R", "reference(5)", "I", "audio(5)", "S"],
    "rtse": ["T_rTSE", "R", "reference(5)", "I", "audio(5)", "S"],
    "vc": ["T_VC", "R", "reference(5)", "I", "audio(5)", "S"],
    "lass": ["T_LASS", "C", "caption(5)", "I", "audio(5)", "S"],
}


def check_templates():
    ok_layout = ok_missing = True
    for mode, expected in TEMPLATES.items():
        needed = {k: 5 for k in sg.required_blocks(mode)}
        ok_layout &= sg.build_conditioning(mode, needed, VOCAB).describe(VOCAB) == expected
        for source in needed:
            try:
                sg.build_conditioning(mode, {k: v for k, v in needed.items() if k != source})
                ok_missing = False
            except TemplateError:
                pass
    lengths = {"audio": 5, "reference": 5}
    tse = sg.build_conditioning("tse", lengths, VOCAB).elements
    rtse = sg.build_conditioning("rtse", lengths, VOCAB).elements
    diff = [i for i, (a, b) in enumerate(zip(tse, rtse)) if a != b]
    ok_rtse = diff == [0] and len(tse) == len(rtse)
    return ok_layout and ok_missing and ok_rtse, \
        f"layouts={ok_layout}, missing conditions raise={ok_missing}, rTSE differs only at {diff}"


def check_spectral():
    config = (dsp.LOSS_WINDOW, dsp.LOSS_HOP, dsp.LOSS_N_MELS) == (1024, 256, 100)
    x = np.random.default_rng(3).standard_normal(16000)
    y = dsp.istft(dsp.stft(x)).samples
    interior = slice(1024, len(y) - 1024)
    snr = dsp.snr_db(x[interior], y[interior])
    zero = dsp.stft_loss(x, x) == 0.0 and dsp.mel_loss(x, x) == 0.0
    z = np.zeros_like(x)
    base = dsp.stft_loss(x, z), dsp.mel_loss(x, z)
    worst = 0.0
    for a in (0.25, 2.0, 3.7):
        worst = max(worst, abs(dsp.stft_loss(a * x, z) / (a * base[0]) - 1),
                    abs(dsp.mel_loss(a * x, z) / (a * base[1]) - 1))
    return config and snr > 60 and zero and worst < 1e-9, \
        f"interior SNR {snr:.1f} dB (>60), identical-input losses zero={zero}, scaling error {worst:.1e} (<1e-9)"


def check_simulation():
    pools = sim.synthetic_pools(0, duration=0.5)
    cfg = sim.DistortionConfig()
    counts = dict.fromkeys(sim.DISTORTIONS, 0)
    for seed in range(10_000):
        for name, _ in sim.draw_chain(cfg, pools, np.random.default_rng(seed)):
            counts[name] += 1
    freq_err = max(abs(counts[n] / 10_000 - cfg.probability(n)) for n in sim.DISTORTIONS)
    rng = np.random.default_rng(4)
    mix_err = 0.0
    for _ in range(200):
        t, i = rng.standard_normal(4000), rng.uniform(0.1, 5) * rng.standard_normal(4000)
        ratio = rng.uniform(-20, 30)
        out = sim.mix_at_ratio(t, i, ratio).samples
        measured = 10 * np.log10(np.sum(t ** 2) / np.sum((out - t) ** 2))
        mix_err = max(mix_err, abs(measured - ratio))
    tse = [p["sir_db"] for s in range(300) for n, p in sim.make_mode_pair("tse", pools, s).applied
           if n == "interferer"]
    lass = [sim.make_mode_pair("lass", pools, s).applied[0][1]["sir_db"] for s in range(300)]
    ranges = min(tse) >= -5 and max(tse) <= 5 and min(lass) >= -5 and max(lass) <= 20
    return freq_err <= 0.02 and mix_err < 0.01 and ranges, \
        f"max frequency error {freq_err:.4f} (<=0.02), mix error {mix_err:.1e} dB (<0.01), SIR ranges ok={ranges}"


def check_gradients():
    pools = sim.synthetic_pools(0, duration=0.25)
    params = codec.CodecParams.create(codec.CodecConfig(), seed=0)
    codec.init_codebooks(params, [c.audio for c in pools.clean[2:8]], seed=0)
    audio = [pools.clean[0].audio, pools.captioned[1].audio]
    families = ["acoustic_encoder", "semantic_encoder", "decoder", "head", "semantic_decoder"]
    codec_results = gc.check(params.net, lambda: codec.generator_loss(params, audio, straight_through=False).graph,
                             gc.sample_coordinates(params.net, 20, gc.rng(1), families))

    torch.manual_seed(3)
    model = lm.TokenLM(lm.LMConfig())
    rng = np.random.default_rng(5)
    batch = []
    for clip in pools.clean[:2]:
        g = sg.TokenGrid(rng.integers(0, 64, (10, 4)), 50, "interleaved")
        batch.append(lm.make_example(lm.extract_conditions("sr", clip.audio), sg.apply_delay(g, VOCAB.pad), VOCAB))

    def nll():
        prefix, pmask, hist, targets, mask = lm.collate(model, batch)
        return lm.nll_loss(model(prefix, hist, pmask), targets, mask)[0]

    lm_families = ["token_embeddings", "special_embedding", "audio_adapter", "blocks", "norm", "heads"]
    lm_results = gc.check(model, nll, gc.sample_coordinates(model, 20, gc.rng(4), lm_families))
    c, m = gc.worst(codec_results), gc.worst(lm_results)
    return c < 1e-4 and m < 1e-4, f"codec worst relative error {c:.1e}, LM {m:.1e} over 20+20 parameters (<1e-4)"


def check_memorization():
    params, initial, final, codec_seconds = systems.trained_codec()
    start = time.perf_counter()
    pools = sim.synthetic_pools(1, duration=1.0, n_speakers=4, clips_per_speaker=2)
    cfg = lm.LMConfig(codebook_size=params.config.codebook_size, ssl_dim=params.config.ssl_dim)
    examples = []
    for seed in range(16):
        pair = sim.make_mode_pair("sr", pools, seed)
        feats = lm.extract_conditions("sr", pair.input, ssl_dim=cfg.ssl_dim)
        delayed = sg.apply_delay(pipeline.target_grid(params, pair.target), VOCAB.pad)
        examples.append(lm.make_example(feats, delayed, cfg.vocab))
    est = lm.UniTokLM(steps=2000, batch_size=16, peak_lr=3e-3, warmup=20, random_state=0)
    est.fit(examples, until_accuracy=0.999)
    accuracy = lm.token_accuracy(est.model_, examples)
    exact = 0
    for e in examples:
        gen = est.generate(e.features, max_steps=400)
        rows = np.where(e.labels == VOCAB.end, VOCAB.pad, e.labels)[:-1]
        exact += (not gen.truncated) and np.array_equal(gen.delayed.rows, rows)
    total = codec_seconds + time.perf_counter() - start
    ok = accuracy > 0.99 and est.trainer_.step <= 2000 and exact == 16 and final <= 0.5 * initial and total < 600
    return ok, (f"LM accuracy {accuracy:.4f} after {est.trainer_.step} steps, {exact}/16 exact; "
                f"codec mel {initial:.4f} -> {final:.4f} ({final / initial:.2f}x, <=0.5x); {total:.0f} s (<600)")


def check_separation():
    params, model, _, s = systems.memorized_system()
    result = pipeline.run_ss(params, model, s["mixture"])
    n = len(s["mixture"])
    shapes = len(result.tracks) == 2 and all(len(t) == n for t in result.tracks)
    second = result.stages[-1]
    layout = second["conditioning"][0] == "T_rTSE" and second["conditioning"][1] == "R"
    uses_a = shapes and np.array_equal(second["reference"].samples, result.tracks[0].samples)
    a, b = result.tracks if shapes else (None, None)
    order = shapes and dsp.mel_loss(a, s["loud"]) < dsp.mel_loss(a, s["quiet"]) and \
        dsp.mel_loss(b, s["quiet"]) < dsp.mel_loss(b, s["loud"])
    return shapes and layout and uses_a and order, \
        f"2 tracks of {n} samples={shapes}, pass 2 T_rTSE={layout} on track A={uses_a}, energy order={order}"


RESUME_CONFIG = """\
seed: 0
checkpoint_every: 100
codec: {steps: 200, batch_size: 2}
lm: {steps: 200, batch_size: 2, warmup: 10}
data: {duration: 0.25, n_speakers: 2, n_interferers: 2, n_noise: 2, n_rir: 2}
"""


def _same_tree(a, b):
    names = sorted(p.name for p in a.iterdir())
    return names == sorted(p.name for p in b.iterdir()) and \
        all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


def check_reproducibility():
    def run(*argv):
        return cli.main([str(x) for x in argv])

    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        (d / "cfg.yaml").write_text(RESUME_CONFIG)
        (d / "m.json").write_text(json.dumps({"synthetic": {"seed": 0, "duration": 0.25, "n_speakers": 2}}))
        for k in (1, 2):
            run("simulate", "--manifest", d / "m.json", "--mode", "tse", "--count", 3, "--seed", 5,
                "--out", d / f"sim{k}")
        same_sim = _same_tree(d / "sim1", d / "sim2")

        codes = []
        for name, stop in (("straight", 200), ("half", 100)):
            codes.append(run("codec-train", "--config", d / "cfg.yaml", "--out", d / f"c_{name}", "--max-steps",
                             stop))
        codes.append(run("codec-train", "--resume", d / "c_half", "--out", d / "c_resumed", "--max-steps", 200))
        codec_resume = (d / "c_straight").read_bytes() == (d / "c_resumed").read_bytes()

        for name, stop in (("straight", 200), ("half", 100)):
            codes.append(run("lm-train", "--config", d / "cfg.yaml", "--codec", d / "c_straight",
                             "--out", d / f"l_{name}", "--max-steps", stop))
        codes.append(run("lm-train", "--resume", d / "l_half", "--out", d / "l_resumed", "--max-steps", 200))
        lm_resume = (d / "l_straight").read_bytes() == (d / "l_resumed").read_bytes()

        wav = d / "sim1" / "pair_00000.input.wav"
        for k in (1, 2):
            (d / f"out{k}").mkdir()
            codes.append(run("tokenize", "--ckpt", d / "c_straight", "--in", wav, "--out", d / f"out{k}" / "t.utk"))
            codes.append(run("generate", "--ckpt", d / "l_straight", "--mode", "sr", "--in", wav,
                             "--out", d / f"out{k}" / "g.wav", "--tokens", d / f"out{k}" / "g.utk"))
        same_outputs = _same_tree(d / "out1", d / "out2")
    ok = same_sim and codec_resume and lm_resume and same_outputs and set(codes) == {0}
    return ok, (f"simulate identical={same_sim}, tokenize+generate identical={same_outputs}, "
                f"100-step resume codec={codec_resume} lm={lm_resume}")


CRITERIA = [
    (1, "rate laws", check_rates, 1.0),
    (2, "delay-pattern algebra", check_delay_algebra, 5.0),
    (3, "RVQ oracle", check_rvq, 30.0),
    (4, "conditioning grammar", check_templates, None),
    (5, "spectral metrics", check_spectral, None),
    (6, "simulation statistics", check_simulation, 120.0),
    (7, "gradient correctness", check_gradients, 120.0),
    (8, "overfit memorization", check_memorization, None),  # budget is checked inside
    (9, "SS procedure", check_separation, None),
    (10, "reproducibility", check_reproducibility, None),
]


def evaluate_criterion(number):
    _, title, fn, budget = CRITERIA[number - 1]
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    if budget is not None:
        ok = ok and elapsed < budget
        detail += f"; {elapsed:.2f} s (<{budget:g} s)"
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    return ok, line


@pytest.mark.parametrize("number", [c[0] for c in CRITERIA])
def test_criterion(number, capsys):
    ok, line = evaluate_criterion(number)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate_criterion(n) for n, *_ in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
