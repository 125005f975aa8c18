"""On-disk formats: 16-bit WAV, token files ("UTKA") and checkpoints ("UTKC").

Binary layouts are little-endian. Every token file and checkpoint section
carries a 64-bit BLAKE2b checksum that is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import wave

import numpy as np
import torch

from .dsp import AudioBuffer, as_samples
from .errors import FormatError
from .seqgrammar import N_LAYERS, TokenGrid

SAMPLE_RATE = 16000
TOKEN_MAGIC = b"UTKA"
TOKEN_VERSION = 1
CKPT_MAGIC = b"UTKC"
CKPT_VERSION = 1
KINDS = TokenGrid.KINDS


def checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def to_pcm16(audio):
    x = np.clip(as_samples(audio), -1.0, 1.0)
    return np.round(x * 32767.0).astype("<i2")


def write_wav(path, audio):
    rate = getattr(audio, "sample_rate", SAMPLE_RATE)
    if rate != SAMPLE_RATE:
        raise FormatError(f"only {SAMPLE_RATE} Hz audio is supported, got {rate}")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(to_pcm16(audio).tobytes())


def read_wav(path):
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            data = w.readframes(n)
    except (wave.Error, EOFError) as err:
        raise FormatError(f"{path}: not a readable WAV file ({err})") from None
    if channels != 1 or width != 2:
        raise FormatError(f"{path}: need 16-bit mono PCM, got {channels} channel(s) of {8 * width} bits")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz is not {SAMPLE_RATE} Hz; resample first")
    if len(data) != 2 * n:
        raise FormatError(f"{path}: truncated sample data")
    return AudioBuffer(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0, rate)


# ---------------------------------------------------------------------------
# token files
# ---------------------------------------------------------------------------

def encode_tokens(grids):
    """Serialize a list of token grids."""
    out = bytearray(TOKEN_MAGIC)
    out += struct.pack("<HH", TOKEN_VERSION, len(grids))
    for grid in grids:
        rows = np.asarray(grid.rows)
        if rows.size and (rows.min() < 0 or rows.max() > 0xFFFF):
            raise FormatError("token ids must fit in 16 bits")
        out += struct.pack("<BHI", KINDS.index(grid.kind), grid.rate, grid.steps)
        out += rows.astype("<u2").tobytes()
    out += checksum(bytes(out))
    return bytes(out)


def decode_tokens(data, max_id=None):
    if len(data) < 8 + 8:
        raise FormatError("truncated token file")
    body, digest = data[:-8], data[-8:]
    if body[:4] != TOKEN_MAGIC:
        raise FormatError("not a token file (bad magic)")
    if checksum(body) != digest:
        raise FormatError("token file checksum mismatch")
    r = _Reader(body, "token file")
    r.take(4)
    version, count = r.unpack("<HH")
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported token file version {version}")
    grids = []
    for _ in range(count):
        kind, rate, steps = r.unpack("<BHI")
        if kind >= len(KINDS):
            raise FormatError(f"unknown stream kind {kind}")
        rows = np.frombuffer(r.take(2 * N_LAYERS * steps), dtype="<u2").reshape(steps, N_LAYERS)
        if max_id is not None and rows.size and rows.max() >= max_id:
            raise FormatError(f"token id {int(rows.max())} outside vocabulary of {max_id}")
        grids.append(TokenGrid(rows.astype(np.int64), rate, KINDS[kind]))
    r.done()
    return grids


def write_tokens(path, grids):
    with open(path, "wb") as f:
        f.write(encode_tokens(grids))


def read_tokens(path, max_id=None):
    with open(path, "rb") as f:
        return decode_tokens(f.read(), max_id)


# ---------------------------------------------------------------------------
# array packing and checkpoints
# ---------------------------------------------------------------------------

def pack(meta, arrays):
    """JSON header (meta plus array layout) followed by raw little-endian bytes."""
    layout, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        layout.append([name, a.dtype.str, list(a.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": layout}, sort_keys=True).encode()
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def unpack(data):
    r = _Reader(data, "section")
    (n,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(n))
    except ValueError as err:
        raise FormatError(f"corrupt section header: {err}") from None
    base = r.pos
    arrays = {}
    for name, dtype, shape, offset, nbytes in header["arrays"]:
        raw = data[base + offset: base + offset + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"truncated array {name}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).copy()
    return header["meta"], arrays


def write_checkpoint(path, sections):
    """``sections`` maps name -> (meta, arrays)."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HH", CKPT_VERSION, len(sections))
    for name in sorted(sections):
        payload = pack(*sections[name])
        encoded = name.encode()
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<Q", len(payload)) + checksum(payload) + payload
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, "checkpoint")
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<HH")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode()
        except UnicodeDecodeError:
            raise FormatError("corrupt checkpoint section name") from None
        (size,) = r.unpack("<Q")
        digest = r.take(8)
        payload = r.take(size)
        if checksum(payload) != digest:
            raise FormatError(f"checksum mismatch in checkpoint section {name!r}")
        sections[name] = unpack(payload)
    r.done()
    return sections


# --- converters between live objects and (meta, arrays) sections ---

def module_arrays(module, prefix=""):
    return {prefix + k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module, arrays, prefix=""):
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def optimizer_section(optimizer):
    state = optimizer.state_dict()
    arrays = {}
    for idx, entries in state["state"].items():
        for key, value in entries.items():
            arrays[f"{idx}.{key}"] = torch.as_tensor(value).detach().numpy().copy()
    return state["param_groups"], arrays


def load_optimizer(optimizer, groups, arrays):
    state = {}
    for key, value in arrays.items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(value)
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def stack_arrays(stack, prefix):
    out = {}
    for k, cb in enumerate(stack.codebooks):
        out[f"{prefix}{k}.entries"] = cb.entries
        out[f"{prefix}{k}.usage_ema"] = cb.usage_ema
        out[f"{prefix}{k}.entry_ema"] = cb.entry_ema
    return out


def load_stack(arrays, prefix, n_layers):
    from .quantize import Codebook, RvqStack

    return RvqStack([Codebook(arrays[f"{prefix}{k}.entries"], arrays[f"{prefix}{k}.usage_ema"],
                              arrays[f"{prefix}{k}.entry_ema"]) for k in range(n_layers)])


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng

