"""Discrete-sequence bookkeeping.

Dual-stream interleaving, the per-layer delay pattern, the vocabulary layout and
the per-mode conditioning templates all live here. Everything is a pure function
of its inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import GridError, TemplateError

N_LAYERS = 4
FRAME_RATE = 25


class Mode(str, Enum):
    SR = "sr"
    TSE = "tse"
    RTSE = "rtse"
    VC = "vc"
    LASS = "lass"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise TemplateError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None


MODES = tuple(Mode)
START_TOKENS = ("I", "R", "C", "S")


@dataclass(frozen=True)
class Vocabulary:
    """Id layout: codec indices first, then PAD, END, task ids and start ids.

    Only the codec range plus PAD and END are ever produced by the output heads;
    task and start ids exist solely as rows of the conditioning embedding table.
    """

    codebook_size: int = 1024

    @property
    def pad(self):
        return self.codebook_size

    @property
    def end(self):
        return self.codebook_size + 1

    @property
    def head_size(self):
        return self.codebook_size + 2

    def task(self, mode):
        return self.codebook_size + 2 + MODES.index(Mode.parse(mode))

    def start(self, name):
        return self.codebook_size + 2 + len(MODES) + START_TOKENS.index(name)

    @property
    def n_special(self):
        """Rows of the conditioning embedding table (task + start ids)."""
        return len(MODES) + len(START_TOKENS)

    def special_row(self, token_id):
        row = token_id - self.codebook_size - 2
        if not 0 <= row < self.n_special:
            raise ValueError(f"{token_id} is not a conditioning token id")
        return row

    def is_codec(self, ids):
        ids = np.asarray(ids)
        return (ids >= 0) & (ids < self.codebook_size)


@dataclass(frozen=True)
class TokenGrid:
    rows: np.ndarray  # (steps, 4) integer
    rate: int
    kind: str  # acoustic | semantic | interleaved | delayed

    KINDS = ("acoustic", "semantic", "interleaved", "delayed")

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[1] != N_LAYERS:
            raise GridError(f"token grid must have shape (steps, {N_LAYERS}), got {rows.shape}")
        if self.kind not in self.KINDS:
            raise GridError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "rows", rows)

    @property
    def steps(self):
        return self.rows.shape[0]

    def __eq__(self, other):
        return (isinstance(other, TokenGrid) and self.kind == other.kind and self.rate == other.rate
                and np.array_equal(self.rows, other.rows))

    __hash__ = None


def interleave(acoustic, semantic, acoustic_first=True):
    """Merge two 25 Hz grids into one 50 Hz grid, alternating rows per time step."""
    if acoustic.steps != semantic.steps:
        raise GridError(f"step-count mismatch: {acoustic.steps} acoustic vs {semantic.steps} semantic")
    first, second = (acoustic, semantic) if acoustic_first else (semantic, acoustic)
    rows = np.empty((2 * acoustic.steps, N_LAYERS), dtype=np.int64)
    rows[0::2] = first.rows
    rows[1::2] = second.rows
    return TokenGrid(rows, 2 * acoustic.rate, "interleaved")


def deinterleave(grid, acoustic_first=True):
    if grid.kind != "interleaved":
        raise GridError(f"expected an interleaved grid, got {grid.kind}")
    if grid.steps % 2:
        raise GridError(f"interleaved grid has odd step count {grid.steps}")
    rate = grid.rate // 2
    first, second = grid.rows[0::2], grid.rows[1::2]
    if not acoustic_first:
        first, second = second, first
    return TokenGrid(first, rate, "acoustic"), TokenGrid(second, rate, "semantic")


def apply_delay(grid, pad):
    """Shift layer i down by i rows; vacated cells hold ``pad``."""
    if grid.kind == "delayed":
        raise GridError("grid is already delayed")
    if grid.kind != "interleaved":
        raise GridError(f"delay applies to interleaved grids, got {grid.kind}")
    steps = grid.steps
    out = np.full((steps + N_LAYERS - 1, N_LAYERS), pad, dtype=np.int64)
    for layer in range(N_LAYERS):
        out[layer:layer + steps, layer] = grid.rows[:, layer]
    return TokenGrid(out, grid.rate, "delayed")


def remove_delay(grid, pad):
    """Exact inverse of :func:`apply_delay`."""
    if grid.kind != "delayed":
        raise GridError(f"expected a delayed grid, got {grid.kind}")
    steps = grid.steps - (N_LAYERS - 1)
    if steps < 0:
        raise GridError(f"delayed grid needs at least {N_LAYERS - 1} rows, got {grid.steps}")
    if np.all(grid.rows == pad):
        warnings.warn("delayed grid contains only padding; result is empty", stacklevel=2)
        return TokenGrid(np.empty((0, N_LAYERS), dtype=np.int64), grid.rate, "interleaved")
    rows = np.empty((steps, N_LAYERS), dtype=np.int64)
    for layer in range(N_LAYERS):
        col = grid.rows[:, layer]
        vacated = np.r_[col[:layer], col[layer + steps:]]
        if np.any(vacated != pad):
            raise GridError(f"layer {layer}: non-PAD value in a vacated cell")
        rows[:, layer] = col[layer:layer + steps]
    if np.any(rows == pad):
        raise GridError("PAD found in the interior of a delayed grid")
    return TokenGrid(rows, grid.rate, "interleaved")


@dataclass(frozen=True)
class Target:
    """Supervision layout for one sequence: labels plus loss mask."""

    labels: np.ndarray  # (steps + 4, 4)
    mask: np.ndarray  # bool, same shape; False where the label is PAD


def target_sequence(delayed, vocab):
    """Labels for a delayed grid: each layer's column followed by its own END.

    END is shifted with its layer like every other token, so layer i ends at
    row T + i and layer 0's END is the first one the decoder sees.
    """
    if delayed.kind != "delayed":
        raise GridError(f"expected a delayed grid, got {delayed.kind}")
    steps = delayed.steps - (N_LAYERS - 1)
    if steps < 0:
        raise GridError(f"delayed grid needs at least {N_LAYERS - 1} rows, got {delayed.steps}")
    labels = np.vstack([delayed.rows, np.full((1, N_LAYERS), vocab.pad, dtype=np.int64)])
    for layer in range(N_LAYERS):
        labels[steps + layer, layer] = vocab.end
    return Target(labels, labels != vocab.pad)


# ---------------------------------------------------------------------------
# conditioning templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpecialToken:
    id: int


@dataclass(frozen=True)
class EmbeddingBlock:
    source: str  # audio | reference | caption
    length: int


_TEMPLATES = {
    Mode.SR: (("I", "audio"),),
    Mode.TSE: (("R", "reference"), ("I", "audio")),
    Mode.RTSE: (("R", "reference"), ("I", "audio")),
    Mode.VC: (("R", "reference"), ("I", "audio")),
    Mode.LASS: (("C", "caption"), ("I", "audio")),
}


def required_blocks(mode):
    return tuple(source for _, source in _TEMPLATES[Mode.parse(mode)])


@dataclass(frozen=True)
class ConditioningSequence:
    mode: Mode
    elements: tuple

    def __len__(self):
        return sum(e.length if isinstance(e, EmbeddingBlock) else 1 for e in self.elements)

    def describe(self, vocab):
        """Human-readable element list, e.g. ['T_SR', 'I', 'audio(125)', 'S']."""
        names = {vocab.task(m): f"T_{m.name.replace('RTSE', 'rTSE')}" for m in MODES}
        names.update({vocab.start(s): s for s in START_TOKENS})
        return [f"{e.source}({e.length})" if isinstance(e, EmbeddingBlock) else names[e.id]
                for e in self.elements]


def build_conditioning(mode, lengths, vocab=Vocabulary()):
    """Assemble the element order for ``mode`` from the available block lengths.

    ``lengths`` maps block source to its length; extra blocks not used by the
    mode are rejected so a condition is never silently dropped.
    """
    mode = Mode.parse(mode)
    needed = _TEMPLATES[mode]
    lengths = {k: v for k, v in lengths.items() if v is not None}
    missing = [source for _, source in needed if source not in lengths]
    if missing:
        raise TemplateError(f"mode {mode.value} requires {', '.join(missing)}")
    extra = set(lengths) - {source for _, source in needed}
    if extra:
        raise TemplateError(f"mode {mode.value} does not accept {', '.join(sorted(extra))}")
    elements = [SpecialToken(vocab.task(mode))]
    for start, source in needed:
        if lengths[source] <= 0:
            raise TemplateError(f"{source} block for mode {mode.value} is empty")
        elements += [SpecialToken(vocab.start(start)), EmbeddingBlock(source, int(lengths[source]))]
    elements.append(SpecialToken(vocab.start("S")))
    return ConditioningSequence(mode, tuple(elements))
