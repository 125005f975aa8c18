"""Command-line entry point (``unitok``)."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from . import codec as codec_mod
from . import formats
from . import lm as lm_mod
from . import pipeline, simulate
from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigurationError, FormatError, TemplateError, TrainingFault, UnitokError
from .seqgrammar import Mode, deinterleave

EXIT_OK, EXIT_CONFIG, EXIT_TEMPLATE, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def load_manifest(path):
    """JSON manifest: {"clips": [{"id", "role", "path", "speaker"?, "caption"?}, ...]}
    or {"synthetic": {...synthetic_pools keyword arguments...}}."""
    try:
        with open(path) as f:
            data = json.load(f)
    except ValueError as err:
        raise ConfigurationError(f"{path}: invalid manifest ({err})") from None
    if "synthetic" in data:
        return simulate.synthetic_pools(**data["synthetic"])
    roles = {"clean": [], "noise": [], "rir": [], "interferer": [], "captioned": []}
    base = Path(path).parent
    for entry in data.get("clips", []):
        role = entry.get("role")
        if role not in roles:
            raise ConfigurationError(f"clip {entry.get('id')!r}: unknown role {role!r}")
        audio = formats.read_wav(base / entry["path"])
        roles[role].append(simulate.Clip(entry["id"], audio, entry.get("speaker"), entry.get("caption")))
    return simulate.Pools(**roles)


def pools_for(cfg):
    d = cfg.data
    if d.manifest:
        return load_manifest(d.manifest)
    return simulate.synthetic_pools(d.seed, d.duration, d.n_speakers, d.clips_per_speaker, d.n_interferers,
                                    d.n_noise, d.n_rir)


def codec_corpus(pools):
    return [c.audio for c in pools.clean + pools.captioned + pools.interferer]


# ---------------------------------------------------------------------------
# checkpoint sections
# ---------------------------------------------------------------------------

def codec_section(params):
    arrays = formats.module_arrays(params.net, "net.")
    arrays.update(formats.stack_arrays(params.acoustic, "acoustic."))
    arrays.update(formats.stack_arrays(params.semantic, "semantic."))
    return asdict(params.config), arrays


def load_codec(sections):
    if "codec" not in sections:
        raise FormatError("checkpoint has no codec section")
    meta, arrays = sections["codec"]
    cfg = codec_mod.CodecConfig(**meta)
    params = codec_mod.CodecParams.create(cfg)
    formats.load_module(params.net, arrays, "net.")
    params.acoustic = formats.load_stack(arrays, "acoustic.", cfg.n_layers)
    params.semantic = formats.load_stack(arrays, "semantic.", cfg.n_layers)
    return params


def lm_section(model):
    return asdict(model.config), formats.module_arrays(model)


def load_lm(sections):
    if "lm" not in sections:
        raise FormatError("checkpoint has no lm section")
    meta, arrays = sections["lm"]
    model = lm_mod.TokenLM(lm_mod.LMConfig(**meta))
    formats.load_module(model, arrays)
    return model


def trainer_section(trainer, extra=None):
    groups, arrays = formats.optimizer_section(trainer.optimizer)
    meta = {"step": trainer.step, "rng": formats.rng_state(trainer.rng), "param_groups": groups}
    meta.update(extra or {})
    return meta, arrays


def restore_trainer(trainer, section):
    meta, arrays = section
    formats.load_optimizer(trainer.optimizer, meta["param_groups"], arrays)
    trainer.rng = formats.restore_rng(meta["rng"])
    trainer.step = meta["step"]


def config_section(cfg):
    return {"yaml": cfg.to_yaml()}, {}


def config_of(sections):
    return config_from_dict(yaml.safe_load(sections["config"][0]["yaml"]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    pools = load_manifest(args.manifest)
    mode = Mode.parse(args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(args.seed).integers(2 ** 31, size=args.count)
    for i, seed in enumerate(seeds):
        pair = simulate.make_mode_pair(mode, pools, int(seed))
        stem = out / f"pair_{i:05d}"
        formats.write_wav(f"{stem}.input.wav", pair.input)
        formats.write_wav(f"{stem}.target.wav", pair.target)
        if pair.reference is not None:
            formats.write_wav(f"{stem}.reference.wav", pair.reference)
        if pair.caption is not None:
            Path(f"{stem}.caption.txt").write_text(pair.caption + "\n")
        Path(f"{stem}.json").write_text(json.dumps(simulate.provenance(pair), sort_keys=True) + "\n")
    summary = {"count": int(args.count), "mode": mode.value, "seed": int(args.seed)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def _log(path, record):
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_codec_train(args):
    if args.resume:
        sections = formats.read_checkpoint(args.resume)
        cfg = config_of(sections)
        params = load_codec(sections)
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
        params = codec_mod.CodecParams.create(codec_mod.CodecConfig.preset(cfg.codec.preset), seed=cfg.seed)
    c = cfg.codec
    trainer = codec_mod.CodecTrainer(params, codec_corpus(pools_for(cfg)), c.steps, c.batch_size, c.lr,
                                     c.weight_decay, cfg.seed)
    if args.resume:
        restore_trainer(trainer, sections["codec_trainer"])
    log_path = f"{args.out}.log.jsonl"
    stop = min(c.steps, args.max_steps) if args.max_steps is not None else c.steps

    def save():
        formats.write_checkpoint(args.out, {"config": config_section(cfg), "codec": codec_section(params),
                                            "codec_trainer": trainer_section(trainer)})

    while trainer.step < stop:
        report = trainer.train_step()
        _log(log_path, {"step": trainer.step, **report.as_dict()})
        if trainer.step % cfg.checkpoint_every == 0:
            save()
    save()
    return EXIT_OK


def cmd_lm_train(args):
    if args.resume:
        sections = formats.read_checkpoint(args.resume)
        cfg = config_of(sections)
        model = load_lm(sections)
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
        if not args.codec:
            raise ConfigurationError("lm-train needs --codec CKPT (or --resume)")
        sections = formats.read_checkpoint(args.codec)
        codec_cfg = codec_mod.CodecConfig(**sections["codec"][0])
        lm_cfg = lm_mod.LMConfig.from_preset(cfg.lm.preset, codebook_size=codec_cfg.codebook_size,
                                             ssl_dim=codec_cfg.ssl_dim)
        torch.manual_seed(cfg.seed)
        model = lm_mod.TokenLM(lm_cfg)
    params = load_codec(sections)
    s = cfg.lm
    trainer = lm_mod.LMTrainer(model, s.peak_lr, s.warmup, s.steps_per_epoch, s.lr_decay, s.weight_decay,
                               s.batch_size, cfg.seed)
    if args.resume:
        restore_trainer(trainer, sections["lm_trainer"])
    pools = pools_for(cfg)
    log_path = f"{args.out}.log.jsonl"
    stop = min(s.steps, args.max_steps) if args.max_steps is not None else s.steps

    def save():
        formats.write_checkpoint(args.out, {"config": config_section(cfg), "codec": codec_section(params),
                                            "lm": lm_section(model), "lm_trainer": trainer_section(trainer)})

    while trainer.step < stop:
        n = min(cfg.checkpoint_every - trainer.step % cfg.checkpoint_every, stop - trainer.step)
        pipeline.train_driver(params, trainer, pools, n, s.modes, callback=lambda r: _log(log_path, r))
        if trainer.step % cfg.checkpoint_every == 0:
            save()
    save()
    return EXIT_OK


def cmd_tokenize(args):
    params = load_codec(formats.read_checkpoint(args.ckpt))
    tokens = codec_mod.encode(params, formats.read_wav(args.input))
    formats.write_tokens(args.out, [tokens.acoustic, tokens.semantic])
    return EXIT_OK


def cmd_detokenize(args):
    params = load_codec(formats.read_checkpoint(args.ckpt))
    grids = formats.read_tokens(args.input, max_id=params.config.codebook_size)
    if len(grids) == 2:
        tokens = codec_mod.DualTokens(*grids)
    elif len(grids) == 1 and grids[0].kind == "interleaved":
        tokens = codec_mod.DualTokens(*deinterleave(grids[0]))
    else:
        raise FormatError("expected acoustic+semantic streams or one interleaved stream")
    formats.write_wav(args.out, codec_mod.decode(params, tokens))
    return EXIT_OK


def _track_path(out, k):
    p = Path(out)
    return p.with_name(f"{p.stem}.trk{k}{p.suffix or '.wav'}")


def cmd_generate(args):
    sections = formats.read_checkpoint(args.ckpt)
    params, model = load_codec(sections), load_lm(sections)
    model.eval()
    audio = formats.read_wav(args.input)
    sampling = lm_mod.SamplingSpec(args.temperature, args.top_k, args.seed)
    if args.mode.lower() == "ss":
        result = pipeline.run_ss(params, model, audio, sampling, args.seed, args.max_steps)
        for k, track in enumerate(result.tracks):
            formats.write_wav(_track_path(args.out, k), track)
    else:
        reference = formats.read_wav(args.ref) if args.ref else None
        request = pipeline.TaskRequest(args.mode, audio, reference, args.caption, sampling, args.seed,
                                       args.max_steps)
        result = pipeline.run_task(params, model, request)
        formats.write_wav(args.out, result.tracks[0])
    if args.tokens:
        formats.write_tokens(args.tokens, result.grids)
    if result.truncated:
        print("warning: generation hit max_steps before END", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args):
    pairs = []
    with open(args.pairs) as f:
        for line in f:
            if line.strip():
                entry = json.loads(line)
                pairs.append((formats.read_wav(entry["reference"]), formats.read_wav(entry["estimate"])))
    table = pipeline.evaluate(pairs)
    Path(args.out).write_text(table.to_jsonl())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="unitok", description="Token-based audio task toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated (input, target) pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func in (("codec-train", cmd_codec_train), ("lm-train", cmd_lm_train)):
        p = sub.add_parser(name, help=f"train the {name.split('-')[0]}")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--max-steps", type=int, help="stop at this global step")
        if name == "lm-train":
            p.add_argument("--codec", help="trained codec checkpoint (frozen)")
        p.set_defaults(func=func)

    p = sub.add_parser("tokenize", help="WAV -> token file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="token file -> WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detokenize)

    p = sub.add_parser("generate", help="run one task (sr, tse, rtse, vc, lass or ss)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ref")
    p.add_argument("--caption")
    p.add_argument("--out", required=True)
    p.add_argument("--tokens", help="also write the generated grids")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metric table for (reference, estimate) WAV pairs")
    p.add_argument("--pairs", required=True, help="JSON lines with reference/estimate paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TemplateError as err:
        code, msg = EXIT_TEMPLATE, f"template error: {err}"
    except ConfigurationError as err:
        code, msg = EXIT_CONFIG, f"configuration error: {err}"
    except TrainingFault as err:
        code, msg = EXIT_TRAINING, f"training fault at step {err.step}: {err}"
    except (FormatError, OSError) as err:
        code, msg = EXIT_IO, f"I/O error: {err}"
    except (UnitokError, ValueError) as err:
        code, msg = EXIT_CONFIG, f"error: {err}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
